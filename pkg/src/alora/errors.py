"""Exception types shared across the engine.

The CLI maps these onto exit codes: verification failures exit 1,
configuration errors exit 2, file format / IO errors exit 3.
"""


class AloraError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(AloraError):
    """Invalid model/adapter/plan configuration (bad shapes, bad ranges)."""


class ContractViolationError(AloraError):
    """A caller broke an operation's precondition."""


class NotInvokedError(AloraError):
    """The invocation sequence was not found in the token stream."""

    def __init__(self, sequence, message=None):
        self.sequence = tuple(sequence)
        super().__init__(message or f"invocation sequence {list(sequence)} not found")


class FormatError(AloraError):
    """A checkpoint/adapter file is malformed. Carries the byte offset."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VerificationError(AloraError):
    """An invariant check in the verification suite failed."""


class TrainingDivergedError(AloraError):
    """Training loss became non-finite."""

    def __init__(self, step):
        self.step = step
        super().__init__(f"training diverged (non-finite loss) at step {step}")
