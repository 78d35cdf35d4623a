"""Exception hierarchy shared by all rflscm modules."""


class RflscmError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RflscmError, ValueError):
    """Invalid configuration, shape mismatch or inconsistent inputs."""


class SingularMediumError(RflscmError, ZeroDivisionError):
    """A medium with zero permittivity has no defined impedance."""


class SingularInterfaceError(RflscmError, ZeroDivisionError):
    """Two media whose impedances sum to (numerically) zero."""


class NonconvergentEtalonError(RflscmError, ArithmeticError):
    """The multiple-reflection series of a voxel does not converge."""

    def __init__(self, magnitude: float):
        self.magnitude = float(magnitude)
        super().__init__(
            f"internal reflection series diverges: |Gamma_q*Gamma_q+1*T^2| = {self.magnitude:.6g}"
        )


class TrainingDivergedError(RflscmError, FloatingPointError):
    """Loss became NaN or infinite during optimization."""
