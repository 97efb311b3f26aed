"""Exception hierarchy.

Every error raised on purpose by the toolkit derives from :class:`SkillVecError`
so the command line can tell domain failures (exit 1) from usage errors (exit 2).
"""

from __future__ import annotations


class SkillVecError(Exception):
    """Base class for all domain errors."""


# checkpoint format


class CheckpointError(SkillVecError):
    pass


class MalformedHeader(CheckpointError):
    pass


class UnsupportedDType(CheckpointError):
    pass


class OverlappingRanges(CheckpointError):
    pass


class TruncatedData(CheckpointError):
    pass


class UnknownTensor(CheckpointError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class InconsistentMeta(CheckpointError, ValueError):
    pass


class IoFailure(CheckpointError, OSError):
    pass


class SchemaInvalid(SkillVecError, ValueError):
    pass


# arithmetic and analysis


class ShapeMismatch(SkillVecError, ValueError):
    pass


class Incompatible(SkillVecError):
    pass


class EmptyIntersection(SkillVecError):
    pass


class NonFiniteResult(SkillVecError, ArithmeticError):
    pass


class EmptyOverlap(SkillVecError):
    pass


class AmbiguousCell(SkillVecError):
    pass


class DimMismatch(SkillVecError, ValueError):
    pass


class DegenerateA(SkillVecError, ValueError):
    pass


class PowerIterationNoConvergence(SkillVecError, ArithmeticError):
    pass


# orchestration


class ConfigInvalid(SkillVecError, ValueError):
    pass


class BaseCheckpointUnreadable(SkillVecError):
    pass


class HookFailed(SkillVecError):
    def __init__(self, phase: str, message: str, returncode: int | None = None):
        super().__init__(f"{phase} hook failed: {message}")
        self.phase = phase
        self.returncode = returncode


class DigestMismatchOnResume(SkillVecError):
    pass


class IncompatibleCheckpoints(Incompatible):
    pass


class PipelineIncomplete(SkillVecError):
    pass


class StateCorrupt(SkillVecError):
    pass


class MissingSourceRl(SkillVecError, ValueError):
    pass
