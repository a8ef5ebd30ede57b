"""Exception hierarchy shared by every module."""


class GciError(Exception):
    """Base class for library errors."""


class ShapeError(GciError, ValueError):
    pass


class NonFiniteError(GciError, FloatingPointError):
    pass


class SvdConvergenceError(GciError, ArithmeticError):
    def __init__(self, iterations: int, off: float):
        super().__init__(
            f"thin_svd did not converge after {iterations} sweeps "
            f"(largest off-diagonal cosine {off:.3e})"
        )
        self.iterations = iterations
        self.off = off


class ConfigError(GciError, ValueError):
    pass


class BatchCompositionError(GciError, ValueError):
    pass


class DatasetError(GciError):
    pass


class RegionOverlapError(DatasetError, ValueError):
    pass


class CheckpointError(GciError, ValueError):
    pass
