"""Skill-vector arithmetic for safetensors checkpoints."""

__version__ = "0.1.0"

from .checkpoint_store import (  # noqa: E402
    CheckpointIndex,
    NameSchema,
    ParamKey,
    open_checkpoint,
    parse_param_name,
    read_tensor,
    write_checkpoint,
)
from .delta_arith import (  # noqa: E402
    DeltaManifest,
    add_deltas,
    apply_delta,
    check_compatibility,
    delta_norms,
    extract_delta,
    load_manifest,
)
from .numerics import DType  # noqa: E402

_LAZY = {"SkillVector", "SignalOverlap"}


def __getattr__(name):
    # the estimators import scikit-learn, which is slow; load them on first use
    if name in _LAZY:
        from . import estimators

        return getattr(estimators, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = [
    "CheckpointIndex",
    "DType",
    "DeltaManifest",
    "NameSchema",
    "ParamKey",
    "SignalOverlap",
    "SkillVector",
    "add_deltas",
    "apply_delta",
    "check_compatibility",
    "delta_norms",
    "extract_delta",
    "load_manifest",
    "open_checkpoint",
    "parse_param_name",
    "read_tensor",
    "write_checkpoint",
]
