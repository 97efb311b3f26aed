"""JSON Schemas (draft 2020-12) for the command line's ``--json`` output.

These are the stable contract for scripts; fields are only ever added.
"""

from __future__ import annotations

_DIGEST = {"type": "string", "pattern": "^[0-9a-f]{64}$"}
_NUM = {"type": "number"}
_NULLABLE_NUM = {"type": ["number", "null"]}
_SHAPE = {"type": "array", "items": {"type": "integer", "minimum": 0}}


def _obj(props: dict, required: list[str] | None = None) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": sorted(required if required is not None else props),
        "additionalProperties": False,
    }


DIFF = _obj({
    "command": {"const": "diff"},
    "out": {"type": "string"},
    "digest": _DIGEST,
    "minuend_digest": _DIGEST,
    "subtrahend_digest": _DIGEST,
    "mode": {"enum": ["strict", "intersect"]},
    "excluded": {"type": "array", "items": {"type": "string"}},
    "global_norm": _NUM,
    "tensors": {"type": "array", "items": _obj({"name": {"type": "string"}, "shape": _SHAPE, "dtype": {"type": "string"},
                                                "norm": _NUM})},
})

APPLY = _obj({
    "command": {"const": "apply"},
    "out": {"type": "string"},
    "digest": _DIGEST,
    "tensor_digest": _DIGEST,
    "base_tensor_digest": _DIGEST,
    "lambda": _NUM,
    "lambda_history": {"type": "array", "items": _NUM},
})

COSIM = _obj({
    "command": {"const": "cosim"},
    "manifest_a": _DIGEST,
    "manifest_b": _DIGEST,
    "layers": {"type": "array", "items": {"type": "integer"}},
    "modules": {"type": "array", "items": {"type": "string"}},
    "cells": {"type": "integer", "minimum": 1},
    "null_cells": {"type": "integer", "minimum": 0},
    "mean_cosine": _NULLABLE_NUM,
    "max_abs_cosine": _NULLABLE_NUM,
    "csv": {"type": ["string", "null"]},
    "svg": {"type": ["string", "null"]},
})

_TAIL_ROW = _obj({"d": {"type": "integer"}, "t": _NUM, "empirical": _NUM, "bound": _NUM,
                  "exceeds_bound": {"type": "boolean"}})

ORTHO_RECORD = _obj({
    "construction": {"type": "string"},
    "d": {"type": "integer", "minimum": 2},
    "sigma": _NUM,
    "n": {"type": "integer", "minimum": 100},
    "mc_mean": _NUM,
    "mc_stderr": _NUM,
    "analytic": _NUM,
    "z_score": _NUM,
    "tail_table": {"type": "array", "items": _TAIL_ROW},
})

ORTHO_REPORT = {"type": "array", "items": ORTHO_RECORD}

ORTHO = _obj({
    "command": {"const": "ortho"},
    "report": {"type": "string"},
    "records": ORTHO_REPORT,
    "all_within_4_stderr": {"type": "boolean"},
    "std_strictly_decreasing": {"type": ["boolean", "null"]},
})

REFINE = _obj({
    "command": {"const": "refine"},
    "state": {"type": "string"},
    "phase": {"enum": ["pending_sft", "pending_carryover", "pending_rl", "pending_extract", "done"]},
    "current_round": {"type": "integer", "minimum": 1},
    "rounds": {"type": "integer", "minimum": 1},
    "v_star": {"type": ["string", "null"]},
    "v_star_digest": {"anyOf": [_DIGEST, {"type": "null"}]},
    "events": {"type": "array", "items": {"type": "string"}},
})

INSPECT = _obj(
    {
        "command": {"const": "inspect"},
        "path": {"type": "string"},
        "kind": {"enum": ["checkpoint", "manifest"]},
        "digest": _DIGEST,
        "tensor_count": {"type": "integer", "minimum": 0},
        "total_params": {"type": "integer", "minimum": 0},
        "dtypes": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 1}},
        "metadata": {"type": ["object", "null"], "additionalProperties": {"type": "string"}},
        "manifest": _obj({
            "name": {"type": "string"},
            "lambda_history": {"type": "array", "items": _NUM},
            "minuend_digest": {"type": "string"},
            "subtrahend_digest": {"type": "string"},
            "created_at": {"type": "string"},
            "excluded": {"type": "array", "items": {"type": "string"}},
        }),
    },
    required=["command", "path", "kind", "digest", "tensor_count", "total_params", "dtypes", "metadata"],
)

BY_COMMAND = {"diff": DIFF, "apply": APPLY, "cosim": COSIM, "ortho": ORTHO, "refine": REFINE, "inspect": INSPECT}
