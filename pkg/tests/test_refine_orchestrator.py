import json
import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest

from conftest import hook_cmd
from skillvec.checkpoint_store import open_checkpoint, read_raw, read_tensor, tensor_digest, write_checkpoint
from skillvec.delta_arith import DeltaManifest, apply_delta, load_manifest
from skillvec.exceptions import (
    BaseCheckpointUnreadable,
    ConfigInvalid,
    DigestMismatchOnResume,
    HookFailed,
    MissingSourceRl,
    PipelineIncomplete,
    StateCorrupt,
)
from skillvec.refine_orchestrator import (
    Phase,
    TrainerHook,
    TransferStrategy,
    compose_target,
    extract_final_vector,
    load_config,
    plan_rounds,
    resume,
    run_pipeline,
    run_round,
    step,
)

BASE = {
    "model.layers.0.mlp.up_proj.weight": np.array([[0.5, 1.0], [1.5, 2.0]], np.float32),
    "lm_head.weight": np.array([[-1.0, 0.25], [4.0, 0.0]], np.float32),
}


def c_sft(k):
    return 0.25 * k


def c_rl(k):
    return 0.125 * (-1) ** k * (k + 1)


@pytest.fixture
def base(tmp_path):
    p = tmp_path / "base.safetensors"
    write_checkpoint(BASE, None, p)
    return p


def config(tmp_path, base, K, sft=None, rl=None, **extra):
    tmp_path.mkdir(parents=True, exist_ok=True)
    table = tmp_path / "table.json"
    table.write_text(json.dumps({f"S{k}": {"sft": c_sft(k), "rl": c_rl(k)} for k in range(1, K + 1)}))
    add = hook_cmd("add", "--in", "{init_ckpt}", "--out", "{out_ckpt}", "--data", "{data_id}", "--table", str(table))
    cfg = {
        "base_ckpt": str(base),
        "workdir": str(tmp_path / "work"),
        "rounds": [{"subset_id": f"S{k}", "sft_hook": sft or add, "rl_hook": rl or add} for k in range(1, K + 1)],
    }
    cfg.update(extra)
    return cfg


def oracle(K, sft_init="base"):
    """The refinement recurrence evaluated exactly on rationals: artifacts per round plus the event trace."""
    base = {n: np.vectorize(Fraction)(v.astype(np.float64)) for n, v in BASE.items()}
    v = {n: np.full(t.shape, Fraction(0)) for n, t in base.items()}
    events = ["v[0] = 0"]
    out, rl = {}, None
    for k in range(1, K + 1):
        src = base if sft_init == "base" or k == 1 else rl
        sft = {n: t + Fraction(c_sft(k)) for n, t in src.items()}
        init = {n: sft[n] + v[n] for n in sft}
        rl = {n: init[n] + Fraction(c_rl(k)) for n in init}
        v = {n: rl[n] - sft[n] for n in rl}
        src_name = "theta_base" if sft_init == "base" or k == 1 else f"theta_rl[{k - 1}]"
        events += [
            f"theta_sft[{k}] = sft_hook({src_name}, S{k})",
            f"theta_init[{k}] = theta_sft[{k}] + 1.0 * v[{k - 1}]",
            f"theta_rl[{k}] = rl_hook(theta_init[{k}], S{k})",
            f"v[{k}] = theta_rl[{k}] - theta_sft[{k}]",
        ]
        out.update({f"sft_{k}": sft, f"init_{k}": init, f"rl_{k}": rl, f"v_{k}": v})
    events.append(f"v_star = v[{K}]")
    return out, events


def as_fractions(path):
    idx = open_checkpoint(path)
    return {n: np.vectorize(Fraction)(read_tensor(idx, n)) for n in idx.tensors}


def assert_matches_oracle(state, K, sft_init="base"):
    want, events = oracle(K, sft_init)
    assert [e["event"] for e in state.log] == events
    for key, tensors in want.items():
        got = as_fractions(state.artifact_path(key))
        assert set(got) == set(tensors)
        for n in tensors:
            assert (got[n] == tensors[n]).all(), (key, n)


# ---------------------------------------------------------------- planning


def test_plan_two_rounds(tmp_path, base):
    specs, state = plan_rounds(config(tmp_path, base, 2))
    assert [s.k for s in specs] == [1, 2] and [s.subset_id for s in specs] == ["S1", "S2"]
    assert state.phase is Phase.PENDING_SFT and state.current_round == 1
    v0 = load_manifest(state.artifact_path("v_0"))
    assert v0.names() == list(BASE) and all(not np.any(v0.entries[n]) for n in v0.names())
    assert (state.workdir / "state.json").exists()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda c: c["rounds"][1].update(subset_id="S1"),
        lambda c: c.update(rounds=[]),
        lambda c: c.pop("workdir"),
        lambda c: c["rounds"][0].pop("sft_hook"),
        lambda c: c.update(sft_init="rl"),
        lambda c: c.update(bogus=1),
        lambda c: c["rounds"][0].update(rl_hook="train {nope}"),
        lambda c: c.update({"lambda": float("inf")}),
    ],
)
def test_invalid_configs(tmp_path, base, mutate):
    cfg = config(tmp_path, base, 2)
    mutate(cfg)
    with pytest.raises(ConfigInvalid):
        plan_rounds(cfg)


def test_unreadable_base(tmp_path, base):
    cfg = config(tmp_path, base, 1)
    cfg["base_ckpt"] = str(tmp_path / "missing.safetensors")
    with pytest.raises(BaseCheckpointUnreadable):
        plan_rounds(cfg)


def test_toml_config(tmp_path, base):
    cfg = config(tmp_path, base, 1)
    r = cfg["rounds"][0]
    p = tmp_path / "c.toml"
    p.write_text(
        f"base_ckpt = {json.dumps(cfg['base_ckpt'])}\nworkdir = {json.dumps(cfg['workdir'])}\nlambda = 1.0\n"
        f"[[rounds]]\nsubset_id = \"S1\"\nsft_hook = {json.dumps(r['sft_hook'])}\nrl_hook = {json.dumps(r['rl_hook'])}\n"
    )
    assert load_config(p)["rounds"][0]["subset_id"] == "S1"
    p.write_text("rounds = [")
    with pytest.raises(ConfigInvalid):
        load_config(p)


# ---------------------------------------------------------------- execution


@pytest.mark.parametrize("K", [1, 2, 3])
def test_trace_matches_exact_recurrence(tmp_path, base, K):
    _, state = plan_rounds(config(tmp_path, base, K))
    run_pipeline(state)
    assert state.done
    assert_matches_oracle(state, K)
    v = extract_final_vector(state)
    assert v.digest == state.artifacts[f"v_{K}"]["digest"]
    assert len(v.provenance["chain"]) == K


def test_previous_rl_initialisation(tmp_path, base):
    _, state = plan_rounds(config(tmp_path, base, 2, sft_init="previous_rl"))
    run_pipeline(state)
    assert_matches_oracle(state, 2, "previous_rl")


def test_round_one_carryover_is_a_no_op(tmp_path, base):
    _, state = plan_rounds(config(tmp_path, base, 1))
    run_pipeline(state)
    sft, init = open_checkpoint(state.artifact_path("sft_1")), open_checkpoint(state.artifact_path("init_1"))
    assert tensor_digest(sft) == tensor_digest(init)
    for n in BASE:
        assert read_raw(sft, n) == read_raw(init, n)


def test_identity_hooks_give_zero_vector(tmp_path, base):
    ident = hook_cmd("identity", "--in", "{init_ckpt}", "--out", "{out_ckpt}")
    specs, state = plan_rounds(config(tmp_path, base, 1, sft=ident, rl=ident))
    run_round(state, specs[0])
    v = extract_final_vector(state)
    assert all(not np.any(v.entries[n]) for n in v.names())


def test_single_round_residual(tmp_path, base):
    _, state = plan_rounds(config(tmp_path, base, 1))
    run_pipeline(state)
    v = extract_final_vector(state)
    for n in v.names():
        assert np.all(v.entries[n] == c_rl(1))


def test_incomplete_pipeline(tmp_path, base):
    _, state = plan_rounds(config(tmp_path, base, 1))
    with pytest.raises(PipelineIncomplete):
        extract_final_vector(state)


def test_failed_hook_is_resumable(tmp_path, base):
    cfg = config(tmp_path, base, 1, rl=hook_cmd("fail", "--in", "{init_ckpt}", "--out", "{out_ckpt}"))
    _, state = plan_rounds(cfg)
    with pytest.raises(HookFailed) as err:
        run_pipeline(state)
    assert err.value.phase == "rl" and err.value.returncode == 3
    again = resume(state.workdir)
    assert again.phase is Phase.PENDING_RL
    assert "failing on purpose" in (state.workdir / "logs" / "round_1_rl.log").read_text()
    # fix the hook in place and finish
    good = config(tmp_path, base, 1)
    again.config["rounds"][0]["rl_hook"] = good["rounds"][0]["rl_hook"]
    run_pipeline(again)
    assert_matches_oracle(again, 1)


def test_retries(tmp_path, base):
    flaky = hook_cmd("identity", "--in", "{init_ckpt}", "--out", "{out_ckpt}", "--fail-times", "2",
                     "--marker", str(tmp_path / "marker"))
    hook = TrainerHook(flaky, retries=2)
    out = tmp_path / "o.safetensors"
    values = {"init_ckpt": base, "out_ckpt": out, "data_id": "x", "sft_ckpt": "", "base_ckpt": base,
              "round": 1, "phase": "sft"}
    assert hook.run("sft", values, tmp_path / "h.log").content_digest == open_checkpoint(base).content_digest
    (tmp_path / "marker").unlink()
    with pytest.raises(HookFailed):
        TrainerHook(flaky, retries=1).run("sft", values, tmp_path / "h.log")


def test_hook_must_write_a_checkpoint(tmp_path, base):
    hook = TrainerHook(f"{sys.executable} -c pass")
    values = {"init_ckpt": base, "out_ckpt": tmp_path / "o.safetensors", "data_id": "x", "sft_ckpt": "",
              "base_ckpt": base, "round": 1, "phase": "sft"}
    with pytest.raises(HookFailed, match="readable checkpoint"):
        hook.run("sft", values, tmp_path / "h.log")
    slow = TrainerHook(f"{sys.executable} -c 'import time; time.sleep(5)'", timeout=0.5)
    with pytest.raises(HookFailed, match="timed out"):
        slow.run("sft", values, tmp_path / "h.log")


def test_pinned_digest(tmp_path, base):
    cfg = config(tmp_path, base, 1)
    cfg["rounds"][0]["expected_digests"] = {"sft": "0" * 64}
    _, state = plan_rounds(cfg)
    with pytest.raises(HookFailed, match="pinned"):
        step(state)


# ---------------------------------------------------------------- resume


def final_files(state):
    return {k: state.artifact_path(k).read_bytes() for k in state.artifacts} | {
        "state": state.path.read_bytes(),
        "sidecar": (state.workdir / f"round_{state.rounds}" / "v.json").read_bytes(),
    }


def test_crash_at_every_phase_boundary(tmp_path, base):
    K = 2
    _, ref = plan_rounds(config(tmp_path / "ref", base, K))
    run_pipeline(ref)
    want = final_files(ref)
    for stop in range(4 * K):
        d = tmp_path / f"stop{stop}"
        _, state = plan_rounds(config(d, base, K))
        run_pipeline(state, max_steps=stop)
        again = resume(state.workdir / "state.json")
        assert again.phase == state.phase
        run_pipeline(again)
        got = final_files(again)
        assert got.keys() == want.keys()
        for key in want:
            if key != "state":
                assert got[key] == want[key], (stop, key)
        # the state differs only in its absolute workdir paths
        assert json.loads(got["state"].decode().replace(str(d), "W")) == json.loads(
            want["state"].decode().replace(str(tmp_path / "ref"), "W"))


def test_killed_orchestrator_resumes(tmp_path, base):
    table_cfg = config(tmp_path, base, 2)
    killer = table_cfg["rounds"][1]["sft_hook"] + " --kill-parent"
    cfg = config(tmp_path, base, 2)
    cfg["rounds"][1]["sft_hook"] = killer
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(cfg))
    script = ("import sys; from skillvec.refine_orchestrator import plan_rounds, run_pipeline; "
              "run_pipeline(plan_rounds(sys.argv[1])[1])")
    proc = subprocess.run([sys.executable, "-c", script, str(cfg_path)], capture_output=True)
    assert proc.returncode == -9
    state = resume(tmp_path / "work")
    assert state.current_round == 2 and state.phase is Phase.PENDING_SFT
    state.config["rounds"][1]["sft_hook"] = table_cfg["rounds"][1]["sft_hook"]
    run_pipeline(state)
    assert_matches_oracle(state, 2)


def test_resume_rejects_tampering(tmp_path, base):
    _, state = plan_rounds(config(tmp_path, base, 1))
    run_pipeline(state, max_steps=2)
    p = state.artifact_path("sft_1")
    data = bytearray(p.read_bytes())
    data[-1] ^= 1
    p.write_bytes(bytes(data))
    with pytest.raises(DigestMismatchOnResume):
        resume(state.workdir)


def test_resume_done_is_a_no_op(tmp_path, base):
    _, state = plan_rounds(config(tmp_path, base, 1))
    run_pipeline(state)
    before = state.path.read_bytes()
    again = resume(state.workdir)
    assert again.done
    run_pipeline(again)
    assert state.path.read_bytes() == before


def test_corrupt_state(tmp_path, base):
    _, state = plan_rounds(config(tmp_path, base, 1))
    state.path.write_text("{")
    with pytest.raises(StateCorrupt):
        resume(state.workdir)
    state.path.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(StateCorrupt):
        resume(state.workdir)
    state.path.write_text(json.dumps({"schema_version": 1, "phase": "nowhere"}))
    with pytest.raises(StateCorrupt):
        resume(state.workdir)


# ---------------------------------------------------------------- transfer


@pytest.fixture
def transfer_setup(tmp_path, base):
    v = DeltaManifest("v", {n: np.full(t.shape, 0.5, np.float64) for n, t in BASE.items()})
    src_rl = tmp_path / "src_rl.safetensors"
    write_checkpoint({n: t + np.float32(3.0) for n, t in BASE.items()}, None, src_rl)
    ident = TrainerHook(hook_cmd("identity", "--in", "{init_ckpt}", "--out", "{out_ckpt}"))
    return v, src_rl, ident


def values_of(idx):
    return {n: read_tensor(idx, n) for n in idx.tensors}


def test_transfer_strategies_identity_hooks(tmp_path, base, transfer_setup):
    v, src_rl, ident = transfer_setup
    post = compose_target(TransferStrategy("post_hoc"), base, "T", v, ident, tmp_path / "post.safetensors")
    seq = compose_target(TransferStrategy("sequential_ft"), base, "T", v, ident, tmp_path / "seq.safetensors",
                         source_rl=src_rl)
    pre = compose_target(TransferStrategy("pre_injection"), base, "T", v, ident, tmp_path / "pre.safetensors")
    expected_post = apply_delta(base, v, 1.0, tmp_path / "expected.safetensors")
    assert tensor_digest(post) == tensor_digest(expected_post)
    assert seq.content_digest == open_checkpoint(src_rl).content_digest
    assert tensor_digest(pre) == tensor_digest(post)
    assert tensor_digest(seq) != tensor_digest(post)
    for n, t in values_of(post).items():
        assert np.all(t == BASE[n].astype(np.float64) + 0.5)


def test_post_hoc_lambda_zero(tmp_path, base, transfer_setup):
    v, _, ident = transfer_setup
    out = compose_target(TransferStrategy("post_hoc", 0.0), base, "T", v, ident, tmp_path / "o.safetensors")
    assert tensor_digest(out) == tensor_digest(open_checkpoint(base))


def test_strategies_distinct_under_a_real_hook(tmp_path, base, transfer_setup):
    v, src_rl, _ = transfer_setup
    # a hook that doubles nothing but adds 1 still commutes with addition, so pre == post;
    # what separates them is a hook that is not translation-equivariant, which the mock cannot model
    add = TrainerHook(hook_cmd("add", "--in", "{init_ckpt}", "--out", "{out_ckpt}", "--const", "1.0"))
    outs = {
        tag: values_of(compose_target(TransferStrategy(tag), base, "T", v, add, tmp_path / f"{tag}.safetensors",
                                      source_rl=src_rl))
        for tag in ("post_hoc", "sequential_ft", "pre_injection")
    }
    for n in BASE:
        assert np.all(outs["post_hoc"][n] == BASE[n].astype(np.float64) + 1.5)
        assert np.all(outs["sequential_ft"][n] == BASE[n].astype(np.float64) + 4.0)
        assert np.all(outs["pre_injection"][n] == outs["post_hoc"][n])


def test_sequential_needs_source(tmp_path, base, transfer_setup):
    v, _, ident = transfer_setup
    with pytest.raises(MissingSourceRl):
        compose_target(TransferStrategy("sequential_ft"), base, "T", v, ident, tmp_path / "o.safetensors")
    with pytest.raises(ValueError):
        TransferStrategy("blend")
