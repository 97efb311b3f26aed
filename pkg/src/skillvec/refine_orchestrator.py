"""Resumable iterative skill refinement driven by external trainer hooks.

Round ``k`` of a ``K``-round pipeline runs four phases, persisting state after
each one:

1. ``theta_sft[k] = sft_hook(theta_base, S_k)``
2. ``theta_init[k] = theta_sft[k] + v[k-1]``  (``v[0]`` is the zero manifest)
3. ``theta_rl[k] = rl_hook(theta_init[k], S_k)``
4. ``v[k] = theta_rl[k] - theta_sft[k]``

The final skill vector is ``v[K]``. Training itself happens in the hook
commands; this module only runs them, checks their outputs and does the
checkpoint arithmetic.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .checkpoint_store import CheckpointIndex, open_checkpoint
from .delta_arith import DeltaManifest, apply_delta, extract_delta, load_manifest, zero_manifest
from .exceptions import (
    BaseCheckpointUnreadable,
    CheckpointError,
    ConfigInvalid,
    DigestMismatchOnResume,
    HookFailed,
    Incompatible,
    IncompatibleCheckpoints,
    MissingSourceRl,
    PipelineIncomplete,
    StateCorrupt,
)
from .validation import check_lambda

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

STATE_SCHEMA_VERSION = 1
STATE_FILE = "state.json"
PLACEHOLDERS = ("init_ckpt", "data_id", "out_ckpt", "sft_ckpt", "base_ckpt", "round", "phase")


class Phase(str, enum.Enum):
    PENDING_SFT = "pending_sft"
    PENDING_CARRYOVER = "pending_carryover"
    PENDING_RL = "pending_rl"
    PENDING_EXTRACT = "pending_extract"
    DONE = "done"


# ---------------------------------------------------------------- hooks


@dataclass(frozen=True)
class TrainerHook:
    """External command template run once per training phase.

    The template is split like a shell command line, then each word is
    formatted with the placeholders ``{init_ckpt}``, ``{data_id}``,
    ``{out_ckpt}``, ``{sft_ckpt}``, ``{base_ckpt}``, ``{round}`` and
    ``{phase}``; write ``{{`` for a literal brace. No shell is involved. The
    hook succeeds when it exits 0 and leaves a readable checkpoint at
    ``{out_ckpt}``.
    """

    command: str
    timeout: float | None = None
    retries: int = 0

    def argv(self, values: dict[str, str]) -> list[str]:
        try:
            return [word.format_map(values) for word in shlex.split(self.command)]
        except (KeyError, IndexError, ValueError) as e:
            raise ConfigInvalid(f"bad hook template {self.command!r}: {e}") from e

    def run(self, phase: str, values: dict[str, Any], log_path: Path) -> CheckpointIndex:
        values = {k: str(v) for k, v in values.items()}
        argv = self.argv(values)
        out = Path(values["out_ckpt"])
        env = dict(os.environ, SKILLVEC_PHASE=phase, SKILLVEC_ROUND=values.get("round", ""),
                   SKILLVEC_DATA_ID=values.get("data_id", ""))
        log_path.parent.mkdir(parents=True, exist_ok=True)
        last = None
        for attempt in range(1, self.retries + 2):
            out.unlink(missing_ok=True)
            with open(log_path, "a") as fh:
                fh.write(f"--- {phase} attempt {attempt}: {shlex.join(argv)}\n")
                fh.flush()
                try:
                    proc = subprocess.run(argv, stdout=fh, stderr=subprocess.STDOUT, env=env,
                                          timeout=self.timeout, check=False)
                except subprocess.TimeoutExpired:
                    last = HookFailed(phase, f"timed out after {self.timeout} s (log: {log_path})")
                    continue
                except OSError as e:
                    raise HookFailed(phase, f"cannot start {argv[0]!r}: {e}") from e
            if proc.returncode != 0:
                last = HookFailed(phase, f"exited with status {proc.returncode} (log: {log_path})", proc.returncode)
                continue
            try:
                return open_checkpoint(out)
            except (CheckpointError, OSError) as e:
                last = HookFailed(phase, f"did not leave a readable checkpoint at {out}: {e}")
        raise last


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class RoundSpec:
    k: int
    subset_id: str
    sft_hook: TrainerHook
    rl_hook: TrainerHook
    expected_digests: dict = field(default_factory=dict)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigInvalid(msg)


def load_config(path: str | os.PathLike) -> dict:
    """Read a JSON or TOML pipeline config (chosen by file extension)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigInvalid(f"cannot read config {path}: {e}") from e
    try:
        if path.suffix.lower() == ".toml":
            cfg = tomllib.loads(raw.decode("utf-8"))
        else:
            cfg = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as e:
        raise ConfigInvalid(f"cannot parse config {path}: {e}") from e
    return normalize_config(cfg)


def _hook_field(value: Any, where: str) -> str:
    _require(isinstance(value, str) and value.strip() != "", f"{where} must be a non-empty command string")
    # fail at load time on unknown placeholders rather than mid-pipeline
    TrainerHook(value).argv({p: "" for p in PLACEHOLDERS})
    return value


def normalize_config(cfg: Any) -> dict:
    """Validate a config mapping and fill defaults; paths become absolute."""
    _require(isinstance(cfg, dict), "config must be a mapping")
    known = {"base_ckpt", "rounds", "lambda", "workdir", "sft_init", "timeout", "retries", "sft_hook", "rl_hook"}
    extra = sorted(set(cfg) - known)
    _require(not extra, f"unknown config keys: {extra}")
    _require(isinstance(cfg.get("base_ckpt"), str), "base_ckpt is required")
    _require(isinstance(cfg.get("workdir"), str), "workdir is required")
    rounds = cfg.get("rounds")
    _require(isinstance(rounds, list) and len(rounds) >= 1, "rounds must be a non-empty list")
    try:
        lam = check_lambda(cfg.get("lambda", 1.0))
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(str(e)) from e
    sft_init = cfg.get("sft_init", "base")
    _require(sft_init in ("base", "previous_rl"), "sft_init must be 'base' or 'previous_rl'")
    timeout = cfg.get("timeout")
    _require(timeout is None or (isinstance(timeout, (int, float)) and not isinstance(timeout, bool) and timeout > 0),
             "timeout must be a positive number of seconds")
    retries = cfg.get("retries", 0)
    _require(isinstance(retries, int) and not isinstance(retries, bool) and retries >= 0,
             "retries must be a non-negative integer")
    out_rounds, seen = [], set()
    for i, r in enumerate(rounds, 1):
        _require(isinstance(r, dict), f"round {i} must be a mapping")
        extra = sorted(set(r) - {"subset_id", "sft_hook", "rl_hook", "expected_digests"})
        _require(not extra, f"round {i} has unknown keys: {extra}")
        sid = r.get("subset_id")
        _require(isinstance(sid, str) and sid != "", f"round {i} needs a subset_id")
        _require(sid not in seen, f"subset_id {sid!r} is used by more than one round; subsets must be disjoint")
        seen.add(sid)
        pins = r.get("expected_digests", {})
        _require(isinstance(pins, dict) and set(pins) <= {"sft", "rl"},
                 f"round {i} expected_digests may only pin 'sft' and 'rl'")
        out_rounds.append({
            "subset_id": sid,
            "sft_hook": _hook_field(r.get("sft_hook", cfg.get("sft_hook")), f"round {i} sft_hook"),
            "rl_hook": _hook_field(r.get("rl_hook", cfg.get("rl_hook")), f"round {i} rl_hook"),
            "expected_digests": dict(pins),
        })
    return {
        "base_ckpt": os.path.abspath(cfg["base_ckpt"]),
        "workdir": os.path.abspath(cfg["workdir"]),
        "lambda": lam,
        "sft_init": sft_init,
        "timeout": timeout,
        "retries": retries,
        "rounds": out_rounds,
    }


def round_specs(config: dict) -> list[RoundSpec]:
    t, n = config["timeout"], config["retries"]
    return [
        RoundSpec(k, r["subset_id"], TrainerHook(r["sft_hook"], t, n), TrainerHook(r["rl_hook"], t, n),
                  dict(r["expected_digests"]))
        for k, r in enumerate(config["rounds"], 1)
    ]


# ---------------------------------------------------------------- state


@dataclass
class PipelineState:
    config: dict
    base_digest: str
    current_round: int = 1
    phase: Phase = Phase.PENDING_SFT
    artifacts: dict[str, dict] = field(default_factory=dict)
    v_prev: str = "v_0"
    log: list[dict] = field(default_factory=list)

    @property
    def workdir(self) -> Path:
        return Path(self.config["workdir"])

    @property
    def path(self) -> Path:
        return self.workdir / STATE_FILE

    @property
    def rounds(self) -> int:
        return len(self.config["rounds"])

    @property
    def done(self) -> bool:
        return self.phase is Phase.DONE

    def artifact_path(self, key: str) -> Path:
        return self.workdir / self.artifacts[key]["path"]

    def to_json(self) -> dict:
        return {
            "schema_version": STATE_SCHEMA_VERSION,
            "config": self.config,
            "base_digest": self.base_digest,
            "current_round": self.current_round,
            "phase": self.phase.value,
            "artifacts": self.artifacts,
            "v_prev": self.v_prev,
            "log": self.log,
        }

    @classmethod
    def from_json(cls, data: Any) -> "PipelineState":
        try:
            if data["schema_version"] != STATE_SCHEMA_VERSION:
                raise StateCorrupt(f"unsupported state schema version {data['schema_version']!r}")
            state = cls(
                config=normalize_config(data["config"]),
                base_digest=str(data["base_digest"]),
                current_round=int(data["current_round"]),
                phase=Phase(data["phase"]),
                artifacts={str(k): {"path": str(v["path"]), "digest": str(v["digest"])}
                           for k, v in data["artifacts"].items()},
                v_prev=str(data["v_prev"]),
                log=list(data["log"]),
            )
        except StateCorrupt:
            raise
        except (KeyError, TypeError, ValueError, AttributeError, ConfigInvalid) as e:
            raise StateCorrupt(f"state file is not a valid pipeline state: {e}") from e
        if not 1 <= state.current_round <= state.rounds:
            raise StateCorrupt(f"current_round {state.current_round} outside 1..{state.rounds}")
        return state

    def save(self) -> None:
        """Atomically replace the state file."""
        self.workdir.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"
        fd, tmp = tempfile.mkstemp(dir=self.workdir, prefix=".state-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


def plan_rounds(config: dict | str | os.PathLike) -> tuple[list[RoundSpec], PipelineState]:
    """Validate the config, write ``v[0]`` and the initial state under the workdir."""
    if not isinstance(config, dict):
        config = load_config(config)
    else:
        config = normalize_config(config)
    try:
        base = open_checkpoint(config["base_ckpt"])
    except (CheckpointError, OSError) as e:
        raise BaseCheckpointUnreadable(f"cannot read base checkpoint {config['base_ckpt']}: {e}") from e
    state = PipelineState(config=config, base_digest=base.content_digest)
    state.workdir.mkdir(parents=True, exist_ok=True)
    v0 = zero_manifest(base, name="v_0")
    v0.provenance = {"chain": []}
    digest = v0.save(state.workdir / "v_0.safetensors")
    state.artifacts["v_0"] = {"path": "v_0.safetensors", "digest": digest}
    state.log.append({"round": 0, "phase": "init", "event": "v[0] = 0", "artifact": "v_0", "digest": digest})
    state.save()
    return round_specs(config), state


def _verify(state: PipelineState, key: str) -> None:
    rec = state.artifacts[key]
    path = state.workdir / rec["path"]
    try:
        digest = open_checkpoint(path).content_digest
    except (CheckpointError, OSError) as e:
        raise DigestMismatchOnResume(f"artifact {key} at {path} is unreadable: {e}") from e
    if digest != rec["digest"]:
        raise DigestMismatchOnResume(f"artifact {key} at {path} has digest {digest}, state recorded {rec['digest']}")


# config fields that define what a pipeline computes; hooks, timeouts and
# retries may change between attempts (say, after fixing a broken trainer)
IDENTITY_FIELDS = ("base_ckpt", "workdir", "lambda", "sft_init")


def _adopt(state: PipelineState, config: dict) -> None:
    old, new = state.config, normalize_config(config)
    changed = [k for k in IDENTITY_FIELDS if old[k] != new[k]]
    if [r["subset_id"] for r in old["rounds"]] != [r["subset_id"] for r in new["rounds"]]:
        changed.append("rounds")
    if changed:
        raise ConfigInvalid(f"config differs from the recorded pipeline in {changed}; start a new workdir instead")
    state.config = new


def resume(state_path: str | os.PathLike, config: dict | None = None) -> PipelineState:
    """Load a state file and verify every recorded artifact against its digest.

    ``config``, if given, replaces the recorded one; it must describe the same
    pipeline (see ``IDENTITY_FIELDS``) but may change hook commands.
    """
    path = Path(state_path)
    if path.is_dir():
        path = path / STATE_FILE
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise StateCorrupt(f"cannot read state file {path}: {e}") from e
    except ValueError as e:
        raise StateCorrupt(f"state file {path} is not valid JSON: {e}") from e
    state = PipelineState.from_json(data)
    if config is not None:
        _adopt(state, config)
    if Path(state.config["workdir"]) != path.parent.resolve():
        log.warning("state file %s names workdir %s", path, state.config["workdir"])
    try:
        base_digest = open_checkpoint(state.config["base_ckpt"]).content_digest
    except (CheckpointError, OSError) as e:
        raise DigestMismatchOnResume(f"base checkpoint is unreadable: {e}") from e
    if base_digest != state.base_digest:
        raise DigestMismatchOnResume("base checkpoint changed since the pipeline started")
    for key in state.artifacts:
        _verify(state, key)
    log.info("resuming at round %d, %s", state.current_round, state.phase.value)
    return state


# ---------------------------------------------------------------- execution


def _record(state: PipelineState, key: str, rel: str, digest: str, phase: str, event: str) -> None:
    state.artifacts[key] = {"path": rel, "digest": digest}
    state.log.append({"round": state.current_round, "phase": phase, "event": event, "artifact": key, "digest": digest})


def _hook_values(state: PipelineState, spec: RoundSpec, phase: str, init: Path, out: Path) -> dict:
    k = spec.k
    sft = state.artifact_path(f"sft_{k}") if f"sft_{k}" in state.artifacts else ""
    return {"init_ckpt": init, "data_id": spec.subset_id, "out_ckpt": out, "sft_ckpt": sft,
            "base_ckpt": state.config["base_ckpt"], "round": k, "phase": phase}


def _run_hook(state: PipelineState, spec: RoundSpec, phase: str, hook: TrainerHook, init: Path) -> tuple[str, str]:
    rel = f"round_{spec.k}/{phase}.safetensors"
    final = state.workdir / rel
    final.parent.mkdir(parents=True, exist_ok=True)
    partial = final.with_name(f"{phase}.partial.safetensors")
    idx = hook.run(phase, _hook_values(state, spec, phase, init, partial),
                   state.workdir / "logs" / f"round_{spec.k}_{phase}.log")
    pinned = spec.expected_digests.get(phase)
    if pinned and pinned != idx.content_digest:
        raise HookFailed(phase, f"output digest {idx.content_digest} does not match pinned {pinned}")
    os.replace(partial, final)
    return rel, idx.content_digest


def step(state: PipelineState, specs: list[RoundSpec] | None = None, threads: int | None = 1) -> PipelineState:
    """Run exactly one phase and persist the new state."""
    if state.done:
        return state
    specs = specs or round_specs(state.config)
    spec = specs[state.current_round - 1]
    k = spec.k
    if state.phase is Phase.PENDING_SFT:
        if state.config["sft_init"] == "previous_rl" and k > 1:
            init, src = state.artifact_path(f"rl_{k - 1}"), f"theta_rl[{k - 1}]"
        else:
            init, src = Path(state.config["base_ckpt"]), "theta_base"
        rel, digest = _run_hook(state, spec, "sft", spec.sft_hook, init)
        _record(state, f"sft_{k}", rel, digest, "sft", f"theta_sft[{k}] = sft_hook({src}, {spec.subset_id})")
        state.phase = Phase.PENDING_CARRYOVER
    elif state.phase is Phase.PENDING_CARRYOVER:
        lam = state.config["lambda"]
        rel = f"round_{k}/init.safetensors"
        try:
            out = apply_delta(state.artifact_path(f"sft_{k}"), state.artifact_path(state.v_prev), lam,
                              state.workdir / rel, threads=threads)
        except Incompatible as e:
            raise IncompatibleCheckpoints(f"carryover in round {k}: {e}") from e
        _record(state, f"init_{k}", rel, out.content_digest, "carryover",
                f"theta_init[{k}] = theta_sft[{k}] + {lam!r} * v[{k - 1}]")
        state.phase = Phase.PENDING_RL
    elif state.phase is Phase.PENDING_RL:
        rel, digest = _run_hook(state, spec, "rl", spec.rl_hook, state.artifact_path(f"init_{k}"))
        _record(state, f"rl_{k}", rel, digest, "rl", f"theta_rl[{k}] = rl_hook(theta_init[{k}], {spec.subset_id})")
        state.phase = Phase.PENDING_EXTRACT
    elif state.phase is Phase.PENDING_EXTRACT:
        try:
            v = extract_delta(state.artifact_path(f"rl_{k}"), state.artifact_path(f"sft_{k}"), mode="strict",
                              name=f"v_{k}", threads=threads)
        except Incompatible as e:
            raise IncompatibleCheckpoints(f"extraction in round {k}: {e}") from e
        prev = load_manifest(state.artifact_path(state.v_prev))
        link = {"round": k, "subset_id": spec.subset_id}
        link.update({f"{kind}_digest": state.artifacts[f"{kind}_{k}"]["digest"] for kind in ("sft", "init", "rl")})
        link["v_prev_digest"] = state.artifacts[state.v_prev]["digest"]
        v.provenance = {"chain": [*prev.provenance.get("chain", []), link]}
        rel = f"round_{k}/v.safetensors"
        digest = v.save(state.workdir / rel, threads=threads)
        _record(state, f"v_{k}", rel, digest, "extract", f"v[{k}] = theta_rl[{k}] - theta_sft[{k}]")
        state.v_prev = f"v_{k}"
        if k == state.rounds:
            state.phase = Phase.DONE
            state.log.append({"round": k, "phase": "done", "event": f"v_star = v[{k}]", "artifact": f"v_{k}",
                              "digest": digest})
        else:
            state.current_round = k + 1
            state.phase = Phase.PENDING_SFT
    state.save()
    return state


def run_round(state: PipelineState, spec: RoundSpec) -> PipelineState:
    """All four phases of round ``spec.k``; the state must be at its start."""
    if state.done or state.current_round != spec.k or state.phase is not Phase.PENDING_SFT:
        raise ValueError(f"state is at round {state.current_round} {state.phase.value}, not the start of round {spec.k}")
    specs = round_specs(state.config)
    specs[spec.k - 1] = spec
    for _ in range(4):
        step(state, specs)
    return state


def run_pipeline(state: PipelineState, max_steps: int | None = None, threads: int | None = 1) -> PipelineState:
    """Advance until done, or until ``max_steps`` phases have completed."""
    specs = round_specs(state.config)
    taken = 0
    while not state.done and (max_steps is None or taken < max_steps):
        step(state, specs, threads)
        taken += 1
    return state


def extract_final_vector(state: PipelineState) -> DeltaManifest:
    """``v[K]``, after checking it against its recorded digest."""
    if not state.done:
        raise PipelineIncomplete(f"pipeline is at round {state.current_round}, {state.phase.value}")
    key = f"v_{state.rounds}"
    _verify(state, key)
    return load_manifest(state.artifact_path(key))


# ---------------------------------------------------------------- transfer


STRATEGIES = ("post_hoc", "sequential_ft", "pre_injection")


@dataclass(frozen=True)
class TransferStrategy:
    tag: str
    lam: float = 1.0

    def __post_init__(self):
        if self.tag not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.tag!r}")
        check_lambda(self.lam)


def compose_target(
    strategy: TransferStrategy,
    base,
    target_data_id: str,
    v,
    sft_hook: TrainerHook,
    out_path: str | os.PathLike,
    source_rl=None,
) -> CheckpointIndex:
    """Carry a skill vector to a target domain.

    ``post_hoc``: ``apply(sft_hook(base), v, lam)``. ``sequential_ft``:
    ``sft_hook(source_rl)``. ``pre_injection``: ``sft_hook(apply(base, v, lam))``.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    base_path = Path(base.path if isinstance(base, CheckpointIndex) else base)
    work = out_path.with_name(out_path.stem + ".work")
    work.mkdir(exist_ok=True)
    logf = work / "target_sft.log"

    def sft(init: Path, out: Path) -> CheckpointIndex:
        values = {"init_ckpt": init, "data_id": target_data_id, "out_ckpt": out, "sft_ckpt": "",
                  "base_ckpt": base_path, "round": 0, "phase": "target_sft"}
        return sft_hook.run("target_sft", values, logf)

    if strategy.tag == "post_hoc":
        tuned = sft(base_path, work / "target_sft.safetensors")
        return apply_delta(tuned, v, strategy.lam, out_path)
    if strategy.tag == "sequential_ft":
        if source_rl is None:
            raise MissingSourceRl("sequential_ft needs the source-domain RL checkpoint")
        src = Path(source_rl.path if isinstance(source_rl, CheckpointIndex) else source_rl)
        sft(src, work / "target_sft.safetensors")
    else:
        injected = apply_delta(base_path, v, strategy.lam, work / "injected.safetensors")
        sft(injected.path, work / "target_sft.safetensors")
    os.replace(work / "target_sft.safetensors", out_path)
    return open_checkpoint(out_path)
