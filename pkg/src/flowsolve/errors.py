"""Exception types shared across the package."""


class FlowSolveError(Exception):
    """Base class for all errors raised by this package."""


class TimeDomainError(FlowSolveError, ValueError):
    """A time argument lies outside the valid interval [0, 1]."""


class RangeUnattainableError(FlowSolveError, ValueError):
    """A requested signal-to-noise ratio cannot be reached by the schedule.

    Carries the attainable bounds so callers can report the feasible
    time window.
    """

    def __init__(self, target, snr_min, snr_max, min_usable_t=None):
        self.target = target
        self.snr_min = snr_min
        self.snr_max = snr_max
        self.min_usable_t = min_usable_t
        msg = (
            f"SNR {target!r} is outside the attainable range "
            f"[{snr_min!r}, {snr_max!r}]"
        )
        if min_usable_t is not None:
            msg += f"; minimum usable time on the sampling path is {min_usable_t!r}"
        super().__init__(msg)


class SingularityError(FlowSolveError, ZeroDivisionError):
    """A schedule coefficient is degenerate at the requested time."""

    def __init__(self, t, what):
        self.t = t
        super().__init__(f"{what} is singular at t={t!r}")


class SingularSystemError(FlowSolveError, ValueError):
    """The regularized Gram system has no invertible part."""


class ShapeMismatchError(FlowSolveError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, expected, got, what="operand"):
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected shape {expected}, got {got}")


class ConfigError(FlowSolveError, ValueError):
    """A run configuration is invalid or inconsistent."""


class DivergenceError(FlowSolveError, RuntimeError):
    """The ODE state became non-finite during integration."""

    def __init__(self, step, t, diagnostics=None):
        self.step = step
        self.t = t
        self.diagnostics = diagnostics
        super().__init__(f"non-finite state at step {step} (t={t!r})")


class TensorFormatError(FlowSolveError, ValueError):
    """A tensor or image file is malformed."""

    def __init__(self, path, offset, detail):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {detail}")
