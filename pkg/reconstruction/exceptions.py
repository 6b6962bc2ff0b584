class ReconstructionError(Exception):
    """Base class for toolkit failures. ``exit_code`` is what the CLI exits with."""

    exit_code = 1


class ConfigError(ReconstructionError, ValueError):
    exit_code = 2


class DimensionMismatchError(ReconstructionError, ValueError):
    exit_code = 2

    def __init__(self, what: str, expected: int, got: int):
        super().__init__(f"{what}: expected dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


class VerificationError(ReconstructionError):
    """A numerical check disagreed with its closed form or theorem."""

    exit_code = 3

    def __init__(self, message: str, measured=None, expected=None, rows=None):
        super().__init__(message)
        self.measured = measured
        self.expected = expected
        self.rows = rows or []


class ImageIOError(ReconstructionError, OSError):
    exit_code = 4


class SolverError(ReconstructionError):
    exit_code = 5


class ConvergenceError(SolverError):
    """An inner iteration (CG, Sinkhorn) stopped before reaching its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations
