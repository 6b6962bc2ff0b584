"""
Kernel denoisers W = D⁻¹K built from a frozen guide image.

Affinities follow the non-local means pattern: a Gaussian of the squared patch
distance times a separable triangular window, all on the image torus. K is stored
sparse and is exactly symmetric with unit diagonal.
"""
import enum
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .exceptions import ConfigError, ConvergenceError, DimensionMismatchError
from .forward import ForwardKind, ForwardModel
from .linop import DiagonalWeights, LinearMap, VecImage, Vector, as_vector, dense_oracle_limit

logger = logging.getLogger(__name__)

PSD_TOL = 1e-8
STRUCTURE_TOL = 1e-12
SINKHORN_TOL = 1e-10
SINKHORN_MAX_ITER = 10000


class DenoiserMode(str, enum.Enum):
    PLAIN = 'plain'
    SYMMETRIZED = 'symmetrized'


class WindowProfile(str, enum.Enum):
    HAT = 'hat'
    BOX = 'box'


@dataclass(frozen=True)
class KernelParams:
    bandwidth: float
    window_radius: int = 1
    patch_radius: int = 1
    window_profile: WindowProfile = WindowProfile.HAT

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigError(f"Kernel bandwidth h must be positive, got {self.bandwidth}")
        if self.window_radius < 1:
            raise ConfigError(
                f"Window radius must be >= 1 so that K stays irreducible, got {self.window_radius}"
            )
        if self.patch_radius < 0:
            raise ConfigError(f"Patch radius must be >= 0, got {self.patch_radius}")
        object.__setattr__(self, 'window_profile', WindowProfile(self.window_profile))

    def window_weight(self, dy: int, dx: int) -> float:
        if self.window_profile is WindowProfile.BOX:
            return 1.0
        span = self.window_radius + 1
        return max(0.0, 1.0 - abs(dy) / span) * max(0.0, 1.0 - abs(dx) / span)


def _clip_radius(radius: int, size: int) -> int:
    # patch offsets stay distinct modulo the grid size
    return min(radius, (size - 1) // 2)


def _torus_window(radius: int, height: int, width: int):
    """
    One representative (dy, dx) per unordered pair class {o, −o} on the torus.

    Offsets are taken modulo the grid, so an axis shorter than the window still
    couples its pixels; offsets that alias to the centre are dropped. The flag is
    True when o ≡ −o, in which case a single directed entry per pixel covers the pair.
    """
    raw = sorted(
        ((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda o: (abs(o[0]) + abs(o[1]), abs(o[0]), abs(o[1]), o[0], o[1]),
    )
    seen = set()
    window = []
    for dy, dx in raw:
        key = (dy % height, dx % width)
        neg = ((-dy) % height, (-dx) % width)
        if key == (0, 0):
            continue
        pair = min(key, neg)
        if pair in seen:
            continue
        seen.add(pair)
        window.append((dy, dx, key == neg))
    return window


def patch_distances(grid: np.ndarray, dy: int, dx: int, patch_radius: int) -> np.ndarray:
    """‖ζ(p) − ζ(p + (dy, dx))‖² for every pixel p, with circular patches."""
    height, width = grid.shape
    diff = grid - np.roll(grid, shift=(-dy, -dx), axis=(0, 1))
    sq = diff * diff
    py = _clip_radius(patch_radius, height)
    px = _clip_radius(patch_radius, width)
    total = np.zeros_like(sq)
    for ty in range(-py, py + 1):
        for tx in range(-px, px + 1):
            total += np.roll(sq, shift=(-ty, -tx), axis=(0, 1))
    return total


def build_kernel_matrix(guide: VecImage, params: KernelParams) -> sparse.csr_matrix:
    grid = guide.grid
    if not np.all(np.isfinite(grid)):
        raise ConfigError("Guide image contains non-finite intensities")
    height, width = grid.shape
    n = guide.n
    index = np.arange(n).reshape(height, width)
    two_h_sq = 2.0 * params.bandwidth ** 2

    rows: List[np.ndarray] = [np.arange(n)]
    cols: List[np.ndarray] = [np.arange(n)]
    vals: List[np.ndarray] = [np.ones(n)]
    for dy, dx, self_inverse in _torus_window(params.window_radius, height, width):
        dist = patch_distances(grid, dy, dx, params.patch_radius)
        weight = np.exp(-dist / two_h_sq) * params.window_weight(dy, dx)
        p = index.ravel()
        q = np.roll(index, shift=(-dy, -dx), axis=(0, 1)).ravel()
        w = weight.ravel()
        if self_inverse:
            rows.append(p)
            cols.append(q)
            vals.append(w)
            continue
        rows += [p, q]
        cols += [q, p]
        vals += [w, w]

    K = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    K.eliminate_zeros()
    return K


class KernelDenoiser:
    """
    The triple (K, D, W).

    Plain mode acts as W = D⁻¹K, which is D-self-adjoint but not symmetric.
    Symmetrized mode acts as diag(s) K diag(s), stored explicitly so that it is
    exactly symmetric; its D is the identity.
    """

    def __init__(
        self,
        K: sparse.csr_matrix,
        width: int,
        height: int,
        params: Optional[KernelParams] = None,
        mode: DenoiserMode = DenoiserMode.PLAIN,
        scaling: Optional[np.ndarray] = None,
        balance_residual: float = 0.0,
    ):
        if K.shape != (width * height, width * height):
            raise DimensionMismatchError('kernel matrix', width * height, K.shape[0])
        self.K = sparse.csr_matrix(K)
        self.width = width
        self.height = height
        self.params = params
        self.mode = DenoiserMode(mode)
        self.row_sums = np.asarray(self.K.sum(axis=1)).ravel()
        if np.any(self.row_sums <= 0):
            raise ConfigError("Kernel matrix has an empty row")
        self.scaling = scaling
        self.balance_residual = balance_residual
        if self.mode is DenoiserMode.SYMMETRIZED:
            if scaling is None:
                raise ConfigError("Symmetrized denoiser needs its scaling vector")
            coo = self.K.tocoo()
            data = coo.data * (scaling[coo.row] * scaling[coo.col])
            self.W_sym = sparse.csr_matrix((data, (coo.row, coo.col)), shape=self.K.shape)
            self.D = DiagonalWeights.identity(self.n)
        else:
            self.W_sym = None
            self.D = DiagonalWeights(self.row_sums)

    def __repr__(self):
        return f"KernelDenoiser({self.mode.value}, {self.width}x{self.height}, nnz={self.K.nnz})"

    @classmethod
    def from_kernel_matrix(cls, K, width: Optional[int] = None, height: int = 1) -> 'KernelDenoiser':
        """Wrap an explicit kernel. Unit diagonal is not enforced here; verify_assumptions reports it."""
        K = sparse.csr_matrix(K, dtype=np.float64)
        width = K.shape[0] if width is None else width
        return cls(K, width=width, height=height)

    @property
    def n(self) -> int:
        return self.width * self.height

    @property
    def is_plain(self) -> bool:
        return self.mode is DenoiserMode.PLAIN

    @property
    def stochastic_tol(self) -> float:
        """How far We may drift from e: rounding for plain W, the balancing residual otherwise."""
        return max(STRUCTURE_TOL, 10.0 * self.balance_residual)

    def _apply(self, x: np.ndarray) -> np.ndarray:
        if self.W_sym is not None:
            return self.W_sym @ x
        return (self.K @ x) / self.row_sums

    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        if self.W_sym is not None:
            return self.W_sym.T @ y
        return self.K @ (y / self.row_sums)

    def as_linear_map(self) -> LinearMap:
        return LinearMap(self.n, self.n, self._apply, self._adjoint, name='W')

    def apply(self, x: Vector) -> np.ndarray:
        return self.as_linear_map().apply(x)

    def dense_W(self) -> np.ndarray:
        if self.n > dense_oracle_limit():
            raise ConfigError(f"Denoiser with n={self.n} is too large to materialize")
        if self.W_sym is not None:
            return self.W_sym.toarray()
        return self.K.toarray() / self.row_sums[:, None]


def build_kernel(guide: VecImage, params: KernelParams) -> KernelDenoiser:
    started = time.perf_counter()
    K = build_kernel_matrix(guide, params)
    den = KernelDenoiser(K, guide.width, guide.height, params=params)
    logger.info(
        "Built kernel denoiser %dx%d (nnz=%d, h=%g, r=%d, patch=%d) in %.3fs",
        guide.width, guide.height, K.nnz, params.bandwidth, params.window_radius,
        params.patch_radius, time.perf_counter() - started,
    )
    return den


def apply_W(den: KernelDenoiser, x: Vector) -> np.ndarray:
    return den.apply(x)


def symmetrize(
    den: KernelDenoiser,
    tol: float = SINKHORN_TOL,
    max_iter: int = SINKHORN_MAX_ITER,
) -> KernelDenoiser:
    """Symmetric Sinkhorn balancing: s ← √(s / Ks) until diag(s) K diag(s) has unit row sums."""
    if not den.is_plain:
        raise ConfigError("Only a plain kernel denoiser can be symmetrized")
    K = den.K
    s = 1.0 / np.sqrt(den.row_sums)
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        Ks = K @ s
        residual = float(np.max(np.abs(s * Ks - 1.0)))
        if residual < tol:
            logger.debug("Sinkhorn balancing converged in %d iterations", iteration)
            return KernelDenoiser(
                K, den.width, den.height, params=den.params,
                mode=DenoiserMode.SYMMETRIZED, scaling=s, balance_residual=residual,
            )
        s = np.sqrt(s / Ks)
    raise ConvergenceError("Sinkhorn balancing did not converge", residual=residual, iterations=max_iter)


@dataclass
class AssumptionReport:
    n: int
    min_eigenvalue: Optional[float]
    symmetry_residual: float
    diagonal_residual: float
    min_entry: float
    irreducible: bool
    row_stochastic_residual: float
    psd_tol: float = PSD_TOL
    stochastic_tol: float = STRUCTURE_TOL
    notes: List[str] = field(default_factory=list)

    @property
    def psd(self) -> Optional[bool]:
        if self.min_eigenvalue is None:
            return None
        return self.min_eigenvalue >= -self.psd_tol

    @property
    def symmetric(self) -> bool:
        return self.symmetry_residual <= STRUCTURE_TOL

    @property
    def unit_diagonal(self) -> bool:
        return self.diagonal_residual <= STRUCTURE_TOL

    @property
    def nonnegative(self) -> bool:
        return self.min_entry >= 0.0

    @property
    def row_stochastic(self) -> bool:
        return self.row_stochastic_residual <= self.stochastic_tol

    def checks(self) -> dict:
        return {
            'psd': self.psd,
            'symmetric': self.symmetric,
            'unit_diagonal': self.unit_diagonal,
            'nonnegative': self.nonnegative,
            'irreducible': self.irreducible,
            'row_stochastic': self.row_stochastic,
        }

    def failures(self) -> List[str]:
        return [name for name, ok in self.checks().items() if ok is False]

    @property
    def passed(self) -> bool:
        return not self.failures()

    def as_dict(self) -> dict:
        return {
            'n': self.n,
            'min_eigenvalue': self.min_eigenvalue,
            'symmetry_residual': self.symmetry_residual,
            'diagonal_residual': self.diagonal_residual,
            'min_entry': self.min_entry,
            'row_stochastic_residual': self.row_stochastic_residual,
            'checks': self.checks(),
            'notes': self.notes,
        }


def is_irreducible(K: sparse.spmatrix) -> bool:
    """Connectivity of the sparsity graph; equivalent to irreducibility for symmetric K."""
    order = csgraph.breadth_first_order(sparse.csr_matrix(K), 0, directed=False, return_predecessors=False)
    return order.size == K.shape[0]


def verify_assumptions(den: KernelDenoiser, dense_limit: Optional[int] = None) -> AssumptionReport:
    K = den.K
    notes = []
    dense_limit = dense_oracle_limit() if dense_limit is None else dense_limit
    if den.n <= dense_limit:
        min_eig = float(np.linalg.eigvalsh(K.toarray()).min())
    else:
        min_eig = None
        notes.append(f"PSD check skipped for n={den.n} > {dense_limit}")
    asym = abs(K - K.T)
    ones = np.ones(den.n)
    report = AssumptionReport(
        n=den.n,
        min_eigenvalue=min_eig,
        symmetry_residual=float(asym.max()) if asym.nnz else 0.0,
        diagonal_residual=float(np.max(np.abs(K.diagonal() - 1.0))),
        min_entry=float(min(K.data.min(), 0.0)) if K.nnz else 0.0,
        irreducible=is_irreducible(K),
        row_stochastic_residual=float(np.max(np.abs(den.apply(ones) - ones))),
        stochastic_tol=den.stochastic_tol,
        notes=notes,
    )
    if not report.passed:
        logger.warning("Denoiser assumption checks failed: %s", ', '.join(report.failures()))
    return report


def _fill_unobserved(grid: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Fill unknown pixels with the mean of known 3×3 neighbours, repeating until none is left."""
    values = np.where(observed, grid, 0.0)
    known = observed.astype(np.float64)
    while known.min() == 0.0:
        total = np.zeros_like(values)
        count = np.zeros_like(values)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                total += np.roll(values * known, shift=(dy, dx), axis=(0, 1))
                count += np.roll(known, shift=(dy, dx), axis=(0, 1))
        fresh = (known == 0.0) & (count > 0)
        values = np.where(fresh, total / np.maximum(count, 1.0), values)
        known = np.where(fresh, 1.0, known)
    return values


def make_guide(model: ForwardModel, b: Vector) -> VecImage:
    """A full-resolution surrogate of the unknown image built from the observation."""
    b = as_vector(b)
    if b.size != model.dim_out:
        raise DimensionMismatchError('make_guide observation', model.dim_out, b.size)
    if model.kind is ForwardKind.DEBLURRING:
        return VecImage(b, model.width, model.height)
    if model.kind is ForwardKind.INPAINTING:
        shape = (model.height, model.width)
        filled = _fill_unobserved(b.reshape(shape), model.mask.observed.reshape(shape))
        return VecImage(filled.ravel(), model.width, model.height)
    stride = model.subsampler.stride
    small = b.reshape(model.output_shape)
    upsampled = np.repeat(np.repeat(small, stride, axis=0), stride, axis=1)
    return VecImage(upsampled[:model.height, :model.width].ravel(), model.width, model.height)
