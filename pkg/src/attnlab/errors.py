"""Exception types shared across the laboratory."""


class AttnLabError(Exception):
    pass


class DimensionError(AttnLabError, ValueError):
    pass


class ConfigError(AttnLabError, ValueError):
    pass


class InputError(AttnLabError, ValueError):
    pass


class ParameterError(AttnLabError, ValueError):
    pass


class NumericError(AttnLabError, ArithmeticError):
    """Raised when a computation leaves the finite floats.

    ``magnitude`` is the largest absolute input that was involved, so callers
    can report how far out of range the offending values were.
    """

    def __init__(self, message, magnitude=float("nan")):
        super().__init__(message)
        self.magnitude = magnitude


class TrainingAborted(AttnLabError, RuntimeError):
    def __init__(self, step, mechanism, max_abs_grad, reason="non-finite loss"):
        self.step = step
        self.mechanism = mechanism
        self.max_abs_grad = max_abs_grad
        self.reason = reason
        super().__init__(
            f"training aborted at step {step} ({mechanism}): {reason}, "
            f"max |grad| = {max_abs_grad:.6g}"
        )


class CheckpointError(AttnLabError, ValueError):
    pass
