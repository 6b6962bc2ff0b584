"""
Matrix-free linear maps and the D-weighted inner-product space.

Every operator in the toolkit (forward models, denoisers, update operators) is a
``LinearMap``: a pair of callables for the action and its Euclidean transpose.
Dense matrices are only ever formed by ``to_dense`` for test oracles.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings
from scipy.sparse.linalg import LinearOperator

from .exceptions import ConfigError, DimensionMismatchError

# Above this size inner products switch to exactly rounded summation.
COMPENSATED_SUM_THRESHOLD = 100_000
DENSE_ORACLE_LIMIT = 4096


def dense_oracle_limit() -> int:
    """Largest dimension a dense oracle may materialize; PNP_DENSE_LIMIT when configured."""
    return getattr(settings, 'PNP_DENSE_LIMIT', DENSE_ORACLE_LIMIT)


@dataclass(frozen=True, eq=False)
class VecImage:
    """A grayscale image stored as a row-major vector of ``width * height`` intensities."""

    data: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64).ravel()
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"Image dimensions must be positive, got {self.width}x{self.height}")
        if data.size != self.width * self.height:
            raise DimensionMismatchError('VecImage data', self.width * self.height, data.size)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def n(self) -> int:
        return self.data.size

    @property
    def grid(self) -> np.ndarray:
        return self.data.reshape(self.height, self.width)

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> 'VecImage':
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 2:
            raise ConfigError(f"Expected a 2-D grid, got shape {grid.shape}")
        return cls(grid.ravel(), width=grid.shape[1], height=grid.shape[0])

    @classmethod
    def constant(cls, width: int, height: int, value: float = 1.0) -> 'VecImage':
        return cls(np.full(width * height, float(value)), width, height)

    def with_data(self, data: np.ndarray) -> 'VecImage':
        return VecImage(data, self.width, self.height)

    def in_unit_range(self) -> bool:
        return bool(np.all((self.data >= 0.0) & (self.data <= 1.0)))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.data, dtype=dtype)


Vector = Union[np.ndarray, VecImage, Sequence[float]]


def as_vector(x: Vector) -> np.ndarray:
    if isinstance(x, VecImage):
        return x.data
    return np.asarray(x, dtype=np.float64).ravel()


def accurate_sum(values: np.ndarray) -> float:
    # numpy's sum is pairwise; fsum is exactly rounded for the large cases
    if values.size > COMPENSATED_SUM_THRESHOLD:
        return math.fsum(values)
    return float(np.sum(values))


@dataclass(frozen=True, eq=False)
class DiagonalWeights:
    """The diagonal of D = diag(Ke)."""

    d: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=np.float64).ravel()
        if d.size == 0:
            raise ConfigError("DiagonalWeights needs at least one entry")
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ConfigError("DiagonalWeights entries must be finite and positive")
        d.setflags(write=False)
        object.__setattr__(self, 'd', d)

    @classmethod
    def identity(cls, n: int) -> 'DiagonalWeights':
        return cls(np.ones(n))

    @property
    def n(self) -> int:
        return self.d.size

    @property
    def norm(self) -> float:
        """‖D‖₂ = max Dᵢᵢ."""
        return float(self.d.max())

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.d == 1.0))

    def at_least_one(self) -> bool:
        return bool(np.all(self.d >= 1.0))


def _check_dim(what: str, expected: int, v: np.ndarray):
    if v.size != expected:
        raise DimensionMismatchError(what, expected, v.size)


def d_inner(x: Vector, y: Vector, D: DiagonalWeights) -> float:
    """⟨x, y⟩_D = Σ Dᵢᵢ xᵢ yᵢ."""
    x, y = as_vector(x), as_vector(y)
    _check_dim('d_inner x', D.n, x)
    _check_dim('d_inner y', D.n, y)
    return accurate_sum(D.d * x * y)


def d_norm(x: Vector, D: DiagonalWeights) -> float:
    return math.sqrt(max(d_inner(x, x, D), 0.0))


def euclidean_norm(x: Vector) -> float:
    x = as_vector(x)
    return math.sqrt(accurate_sum(x * x))


class LinearMap:
    """
    Action-only linear map ℝ^dim_in → ℝ^dim_out.

    ``adjoint_apply`` is the Euclidean transpose. Instances are immutable and may be
    applied concurrently.
    """

    def __init__(
        self,
        dim_in: int,
        dim_out: int,
        apply: Callable[[np.ndarray], np.ndarray],
        adjoint_apply: Callable[[np.ndarray], np.ndarray],
        name: str = 'M',
    ):
        if dim_in <= 0 or dim_out <= 0:
            raise ConfigError(f"LinearMap dimensions must be positive, got {dim_in}->{dim_out}")
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self._apply = apply
        self._adjoint = adjoint_apply
        self.name = name

    def __repr__(self):
        return f"LinearMap({self.name}: {self.dim_in}->{self.dim_out})"

    def apply(self, x: Vector) -> np.ndarray:
        x = as_vector(x)
        _check_dim(f"{self.name}.apply", self.dim_in, x)
        return np.asarray(self._apply(x), dtype=np.float64)

    def adjoint_apply(self, y: Vector) -> np.ndarray:
        y = as_vector(y)
        _check_dim(f"{self.name}.adjoint_apply", self.dim_out, y)
        return np.asarray(self._adjoint(y), dtype=np.float64)

    __call__ = apply

    @property
    def T(self) -> 'LinearMap':
        return LinearMap(self.dim_out, self.dim_in, self._adjoint, self._apply, name=f"{self.name}ᵀ")

    @property
    def is_square(self) -> bool:
        return self.dim_in == self.dim_out

    def to_dense(self, limit: Optional[int] = None) -> np.ndarray:
        """Materialize column by column from basis vectors. Test-oracle use only."""
        limit = dense_oracle_limit() if limit is None else limit
        if max(self.dim_in, self.dim_out) > limit:
            raise ConfigError(f"{self.name} is too large to materialize ({self.dim_out}x{self.dim_in})")
        dense = np.empty((self.dim_out, self.dim_in))
        basis = np.zeros(self.dim_in)
        for j in range(self.dim_in):
            basis[j] = 1.0
            dense[:, j] = self.apply(basis)
            basis[j] = 0.0
        return dense

    def as_scipy(self) -> LinearOperator:
        return LinearOperator(
            (self.dim_out, self.dim_in),
            matvec=self.apply,
            rmatvec=self.adjoint_apply,
            dtype=np.float64,
        )

    @classmethod
    def identity(cls, n: int) -> 'LinearMap':
        return cls(n, n, np.array, np.array, name='I')

    @classmethod
    def zero(cls, dim_in: int, dim_out: Optional[int] = None) -> 'LinearMap':
        dim_out = dim_in if dim_out is None else dim_out
        return cls(
            dim_in, dim_out,
            lambda x: np.zeros(dim_out),
            lambda y: np.zeros(dim_in),
            name='0',
        )

    @classmethod
    def from_matrix(cls, matrix, name: str = 'M') -> 'LinearMap':
        """Wrap a dense ndarray or scipy sparse matrix."""
        rows, cols = matrix.shape
        return cls(cols, rows, lambda x: matrix @ x, lambda y: matrix.T @ y, name=name)

    @classmethod
    def diagonal(cls, d: np.ndarray, name: str = 'diag') -> 'LinearMap':
        d = np.array(d, dtype=np.float64).ravel()
        return cls(d.size, d.size, lambda x: d * x, lambda y: d * y, name=name)


def compose(M: LinearMap, N: LinearMap) -> LinearMap:
    """M∘N, with adjoint Nᵀ∘Mᵀ."""
    if N.dim_out != M.dim_in:
        raise DimensionMismatchError(f"compose({M.name}, {N.name})", M.dim_in, N.dim_out)
    return LinearMap(
        N.dim_in, M.dim_out,
        lambda x: M.apply(N.apply(x)),
        lambda y: N.adjoint_apply(M.adjoint_apply(y)),
        name=f"{M.name}{N.name}",
    )


def compose_all(*maps: LinearMap) -> LinearMap:
    """Left-to-right product: compose_all(A, B, C) acts as A∘B∘C."""
    result = maps[-1]
    for outer in reversed(maps[:-1]):
        result = compose(outer, result)
    return result


def linear_combination(terms: Iterable[Tuple[float, LinearMap]], name: str = 'Σ') -> LinearMap:
    """Σ cᵢ Mᵢ over maps sharing their shapes."""
    terms = [(float(c), m) for c, m in terms]
    first = terms[0][1]
    for _, m in terms[1:]:
        if (m.dim_in, m.dim_out) != (first.dim_in, first.dim_out):
            raise DimensionMismatchError(f"linear_combination {m.name}", first.dim_in, m.dim_in)

    def apply(x):
        out = np.zeros(first.dim_out)
        for c, m in terms:
            out += c * m.apply(x)
        return out

    def adjoint(y):
        out = np.zeros(first.dim_in)
        for c, m in terms:
            out += c * m.adjoint_apply(y)
        return out

    return LinearMap(first.dim_in, first.dim_out, apply, adjoint, name=name)


def similarity_in_d_norm(M: LinearMap, D: DiagonalWeights) -> LinearMap:
    """D^{1/2} M D^{-1/2}; its Euclidean norm is the D-norm of M."""
    root = np.sqrt(D.d)
    return compose_all(
        LinearMap.diagonal(root, name='D½'),
        M,
        LinearMap.diagonal(1.0 / root, name='D⁻½'),
    )


@dataclass
class AdjointCheck:
    worst_relative_gap: float
    trials: int
    tolerance: float
    failures: int = field(default=0)

    @property
    def passed(self) -> bool:
        return self.failures == 0


def adjoint_consistency(
    M: LinearMap,
    trials: int = 100,
    tol: float = 1e-10,
    norm_estimate: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> AdjointCheck:
    """Check |⟨Mx, y⟩ − ⟨x, Mᵀy⟩| ≤ tol·‖x‖‖y‖‖M‖ on random pairs."""
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    failures = 0
    scale = max(norm_estimate, 1.0)
    for _ in range(trials):
        x = rng.standard_normal(M.dim_in)
        y = rng.standard_normal(M.dim_out)
        gap = abs(float(M.apply(x) @ y) - float(x @ M.adjoint_apply(y)))
        rel = gap / (euclidean_norm(x) * euclidean_norm(y) * scale)
        worst = max(worst, rel)
        if rel > tol:
            failures += 1
    return AdjointCheck(worst_relative_gap=worst, trials=trials, tolerance=tol, failures=failures)
