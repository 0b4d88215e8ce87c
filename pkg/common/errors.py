import typing as t


class PathflowError(Exception):
    """Base class of every error raised by the library."""
    pass


class NonGridTime(PathflowError):
    """Time is not an integer multiple of the grid step (or lies outside [0, T])."""
    def __init__(self, time: float, dt: float):
        self.time = time
        self.dt = dt
        super().__init__(f"Time {time!r} is not a grid time for dt={dt!r}.")


class GridMismatch(PathflowError):
    """Two objects live on different grids."""
    pass


class ProfileInconsistent(PathflowError):
    """The derivative of a smooth profile does not match its values."""
    pass


class IndexOutOfRange(PathflowError):
    """Path or step index outside the noise specification."""
    pass


class CoefficientEvaluation(PathflowError):
    """A coefficient returned non-finite values."""
    pass


class InsufficientSamples(PathflowError):
    """Fewer than 5 samples per basis function."""
    pass


class SingularDesign(PathflowError):
    """Design matrix has no usable rank after regularization."""
    pass


class RegressionFailure(PathflowError):
    """A backward regression failed at a given step."""
    def __init__(self, step: int, cause: Exception):
        self.step = step
        self.cause = cause
        super().__init__(f"Regression failed at step {step}: {cause}")


class DriverEvaluation(PathflowError):
    """The driver G returned non-finite values."""
    pass


class UnboundedCoefficient(PathflowError):
    """A linear BSDE coefficient exceeds its declared bound."""
    pass


class StencilOverflow(PathflowError):
    """A perturbed state broke coefficient evaluation inside a finite-difference stencil."""
    pass


class EpsOutOfRange(PathflowError):
    """Clamping width outside (0, T/2)."""
    pass


class BandwidthTooWide(PathflowError):
    """Mollifier bandwidth 1/n is not below T/2."""
    pass


class NonCoercive(PathflowError):
    """Control cost fails the a|u|^2 - b lower bound."""
    pass


class ResolveWithLargerM(PathflowError):
    """Observed max |Z| reached the truncation level of the Hamiltonian."""
    def __init__(self, observed_max_z: float, M: float):
        self.observed_max_z = observed_max_z
        self.M = M
        super().__init__(f"max|Z| = {observed_max_z:.6g} is not below the truncation M = {M:.6g}.")


class UnboundedControl(PathflowError):
    """A control is non-finite or exceeds the admissible bound."""
    pass


class DegenerateNoise(PathflowError):
    """Sigma vanishes, so the control channel is degenerate."""
    pass


class ConfigInvalid(PathflowError):
    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"Invalid config field '{field}': {reason}")


class BenchmarkUnknown(PathflowError):
    def __init__(self, name: str, known: t.Optional[t.List[str]] = None):
        self.name = name
        known = ", ".join(known or [])
        super().__init__(f"Unknown benchmark '{name}'. Known: {known}")


class PolicyExtrapolation(UserWarning):
    """Closed-loop features left the hull seen while fitting the policy."""
    pass
