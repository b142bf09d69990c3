"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class DimensionError(ValueError):
    """Array shape incompatible with the model or operator."""


class DegenerateLikelihoodError(ValueError):
    """Observation noise is zero, so the Gaussian likelihood has no density."""


class UnsupportedOracleError(ValueError):
    """Requested an exact oracle outside the linear-Gaussian family."""


class OraclePrecisionError(RuntimeError):
    """Quadrature grid too coarse to bound the requested error."""


class ProjectionDegenerateError(ValueError):
    """Trajectory projection axes are not well defined for these inputs."""


class NonFiniteSampleError(RuntimeError):
    """A sampling chain produced a non-finite state."""

    def __init__(self, message: str, *, step: int, t: int, chains: list[int]):
        super().__init__(message)
        self.step = step
        self.t = t
        self.chains = chains
