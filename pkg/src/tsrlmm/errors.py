"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class TsrError(Exception):
    """Base class for every error raised by this package."""


# configuration / input problems (CLI exit code 2)


class ConfigError(TsrError):
    """Invalid configuration or contradictory switches."""


class ConfigViolation(ConfigError):
    """A call whose arguments contradict the recognition config."""


class MissingFile(TsrError):
    pass


class SchemaViolation(TsrError):
    """A structured file does not follow its schema."""


class UnresolvedClass(SchemaViolation):
    pass


class DuplicateClassId(SchemaViolation):
    pass


class MissingTemplateImage(MissingFile):
    pass


class SingletonGroup(SchemaViolation):
    pass


class CoverageGap(TsrError):
    """The memory bank lacks entries required by a catalog or a stage."""

    def __init__(self, missing_classes=(), missing_pairs=()):
        self.missing_classes = sorted(missing_classes)
        self.missing_pairs = sorted(tuple(p) for p in missing_pairs)
        parts = []
        if self.missing_classes:
            parts.append("missing characteristics: " + ", ".join(self.missing_classes))
        if self.missing_pairs:
            parts.append(
                "missing differentials: "
                + ", ".join(f"{u}|{v}" for u, v in self.missing_pairs)
            )
        super().__init__("; ".join(parts) or "coverage gap")


# extraction


class UnknownLabel(TsrError):
    pass


class DimensionMismatch(TsrError):
    pass


class RegionOutOfBounds(TsrError):
    pass


# LMM backend


class LmmError(TsrError):
    """Any failure of a backend call."""


class AuthError(LmmError):
    pass


class RateLimited(LmmError):
    pass


class Timeout(LmmError):
    pass


class MalformedResponse(LmmError):
    pass


class ServerError(LmmError):
    """5xx responses that persisted through every retry."""


class ParseFailure(TsrError):
    pass


class EmptyAnswer(TsrError):
    pass


class AlignmentError(TsrError):
    pass
