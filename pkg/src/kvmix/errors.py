"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes so shell pipelines can
discriminate failure modes.
"""


class KvmixError(Exception):
    """Base class for all package errors."""


class ValidationError(KvmixError):
    """Malformed input: bad shapes, corrupt files, unbalanced templates."""


class TemplateStructureError(ValidationError):
    """Trace violates chat-template bracket structure.

    Carries the token position where the violation was detected.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at token position {position})")
        self.position = position


class CapacityError(KvmixError):
    """A memory-pool region ran out of free slots."""

    def __init__(self, message: str, region: str):
        super().__init__(message)
        self.region = region


class InfeasibleBudgetError(KvmixError):
    """No bitwidth allocation satisfies the requested budget."""
