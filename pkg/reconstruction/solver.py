"""
PnP-ISTA, PnP-ADMM and their D-scaled variants with a frozen kernel denoiser.

The D-prox of the quadratic loss is never inverted explicitly: each application
solves (D + ρAᵀA)z = Dv + ρAᵀb with conjugate gradients, warm-started from the
previous solution.
"""
import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .denoiser import KernelDenoiser, make_guide
from .exceptions import ConfigError, ConvergenceError, DimensionMismatchError, SolverError
from .forward import ForwardModel
from .image_io import psnr
from .linop import DiagonalWeights, VecImage, Vector, as_vector, d_norm, euclidean_norm

logger = logging.getLogger(__name__)


class Algorithm(str, enum.Enum):
    PNP_ISTA = 'pnp_ista'
    PNP_ADMM = 'pnp_admm'
    SC_PNP_ISTA = 'sc_pnp_ista'
    SC_PNP_ADMM = 'sc_pnp_admm'

    @property
    def is_ista(self) -> bool:
        return self in (Algorithm.PNP_ISTA, Algorithm.SC_PNP_ISTA)

    @property
    def is_scaled(self) -> bool:
        return self in (Algorithm.SC_PNP_ISTA, Algorithm.SC_PNP_ADMM)

    @property
    def parameter_name(self) -> str:
        return 'gamma' if self.is_ista else 'rho'


class InitRule(str, enum.Enum):
    GUIDE = 'guide'
    ZERO = 'zero'
    ADJOINT = 'adjoint'


@dataclass(frozen=True)
class CGConfig:
    tol: float = 1e-10
    max_iters: int = 500

    def __post_init__(self):
        if not self.tol > 0 or self.max_iters < 1:
            raise ConfigError(f"CG needs tol > 0 and max_iters >= 1, got {self.tol}, {self.max_iters}")


@dataclass(frozen=True, eq=False)
class SolverConfig:
    algorithm: Algorithm
    gamma: float = 1.0
    rho: float = 1.0
    max_iters: int = 1000
    stop_tol: float = 1e-9
    cg: CGConfig = field(default_factory=CGConfig)
    init: Union[InitRule, np.ndarray, VecImage, None] = InitRule.GUIDE

    def __post_init__(self):
        object.__setattr__(self, 'algorithm', Algorithm(self.algorithm))
        if self.algorithm.is_ista and not 0.0 < self.gamma < 2.0:
            raise ConfigError(f"gamma must lie in (0, 2), got {self.gamma}")
        if not self.algorithm.is_ista and not self.rho > 0.0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.stop_tol > 0:
            raise ConfigError(f"stop_tol must be positive, got {self.stop_tol}")
        if isinstance(self.init, str):
            object.__setattr__(self, 'init', InitRule(self.init))

    @property
    def parameter(self) -> float:
        return self.gamma if self.algorithm.is_ista else self.rho


@dataclass(frozen=True, eq=False)
class LossSpec:
    """f(x) = ½‖Ax − b‖²."""

    model: ForwardModel
    b: np.ndarray

    def __post_init__(self):
        b = np.array(as_vector(self.b), dtype=np.float64)
        if b.size != self.model.dim_out:
            raise DimensionMismatchError('LossSpec measurement', self.model.dim_out, b.size)
        b.setflags(write=False)
        object.__setattr__(self, 'b', b)

    @property
    def A(self):
        return self.model.as_linear_map()

    def value(self, x: Vector) -> float:
        r = self.A.apply(x) - self.b
        return 0.5 * float(r @ r)


def grad_f(loss: LossSpec, x: Vector) -> np.ndarray:
    A = loss.A
    return A.adjoint_apply(A.apply(x) - loss.b)


def solve_spd(
    matvec: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    cg_cfg: CGConfig,
    x0: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, int]:
    """Conjugate gradients to relative residual cg_cfg.tol; returns (solution, iterations)."""
    n = rhs.size
    operator = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    z, info = cg(operator, rhs, x0=x0, rtol=cg_cfg.tol, atol=0.0, maxiter=cg_cfg.max_iters, callback=count)
    if info != 0:
        rhs_norm = euclidean_norm(rhs)
        residual = euclidean_norm(rhs - matvec(z)) / (rhs_norm if rhs_norm > 0 else 1.0)
        if info < 0:
            raise SolverError(f"Conjugate gradients broke down (info={info})")
        raise ConvergenceError("Conjugate gradients did not reach tolerance", residual=residual, iterations=iterations)
    return z, iterations


class DProx:
    """
    prox_{D,ρf}(v) = argmin_z ½‖z − v‖²_D + ρf(z).

    D = I gives the ordinary proximal map used by PnP-ADMM.
    """

    def __init__(self, loss: LossSpec, D: DiagonalWeights, rho: float, cg_cfg: CGConfig = CGConfig()):
        if rho < 0:
            raise ConfigError(f"rho must be nonnegative, got {rho}")
        if D.n != loss.model.n:
            raise DimensionMismatchError('DProx weights', loss.model.n, D.n)
        self.loss = loss
        self.D = D
        self.rho = float(rho)
        self.cg_cfg = cg_cfg
        self.Atb = loss.A.adjoint_apply(loss.b)
        self.total_cg_iters = 0

    def _normal_matvec(self, z: np.ndarray) -> np.ndarray:
        A = self.loss.A
        return self.D.d * z + self.rho * A.adjoint_apply(A.apply(z))

    def solve(self, v: Vector, x0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, int]:
        v = as_vector(v)
        if v.size != self.D.n:
            raise DimensionMismatchError('DProx input', self.D.n, v.size)
        if self.rho == 0.0:
            return v.copy(), 0
        rhs = self.D.d * v + self.rho * self.Atb
        z, iterations = solve_spd(self._normal_matvec, rhs, self.cg_cfg, x0=x0 if x0 is not None else v)
        self.total_cg_iters += iterations
        return z, iterations

    def __call__(self, v: Vector, x0: Optional[np.ndarray] = None) -> np.ndarray:
        return self.solve(v, x0)[0]


def d_prox_f(loss: LossSpec, D: DiagonalWeights, rho: float, v: Vector, cg_cfg: CGConfig = CGConfig()) -> np.ndarray:
    return DProx(loss, D, rho, cg_cfg)(v)


@dataclass
class IterationRecord:
    k: int
    residual: float
    psnr: Optional[float] = None
    cg_iters: int = 0
    u_residual: Optional[float] = None


@dataclass
class Trajectory:
    algorithm: Algorithm
    norm: str
    records: List[IterationRecord] = field(default_factory=list)
    final: Optional[np.ndarray] = None
    termination: str = 'max_iters'
    wall_time: float = 0.0

    CSV_COLUMNS = ('k', 'residual', 'psnr', 'cumulative_cg_iters')

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def converged(self) -> bool:
        return self.termination == 'converged'

    def residuals(self) -> np.ndarray:
        return np.array([r.residual for r in self.records])

    def u_residuals(self) -> np.ndarray:
        return np.array([r.u_residual for r in self.records if r.u_residual is not None])

    def ratios(self) -> np.ndarray:
        """Successive ratios residual_k / residual_{k−1}, where the denominator is positive."""
        res = self.residuals()
        if res.size < 2:
            return np.array([])
        prev, cur = res[:-1], res[1:]
        keep = prev > 0
        return cur[keep] / prev[keep]

    def geometric_rate(self, skip: int = 0) -> Optional[float]:
        """exp of the least-squares slope of log residual against k."""
        ks = np.array([r.k for r in self.records[skip:]], dtype=np.float64)
        res = self.residuals()[skip:]
        keep = res > 0
        if keep.sum() < 2:
            return None
        slope, _ = np.polyfit(ks[keep], np.log(res[keep]), 1)
        return float(math.exp(slope))

    def csv_rows(self) -> List[dict]:
        rows = []
        cumulative = 0
        for record in self.records:
            cumulative += record.cg_iters
            rows.append({
                'k': record.k,
                'residual': record.residual,
                'psnr': '' if record.psnr is None else record.psnr,
                'cumulative_cg_iters': cumulative,
            })
        return rows

    def final_image(self, width: int, height: int) -> VecImage:
        return VecImage(self.final, width, height)


def initial_iterate(loss: LossSpec, init) -> np.ndarray:
    model = loss.model
    if init is None or init is InitRule.GUIDE:
        return make_guide(model, loss.b).data.copy()
    if init is InitRule.ZERO:
        return np.zeros(model.n)
    if init is InitRule.ADJOINT:
        return loss.A.adjoint_apply(loss.b)
    x0 = np.array(as_vector(init), dtype=np.float64)
    if x0.size != model.n:
        raise DimensionMismatchError('initial iterate', model.n, x0.size)
    return x0


def _check_pair(loss: LossSpec, den: KernelDenoiser):
    if den.n != loss.model.n:
        raise DimensionMismatchError('denoiser vs forward model', loss.model.n, den.n)


def _expect(cfg: SolverConfig, *allowed: Algorithm):
    if cfg.algorithm not in allowed:
        raise ConfigError(f"Solver config is for {cfg.algorithm.value}, expected {allowed[0].value}")


class _Monitor:
    """Residual bookkeeping and the relative-change stopping rule."""

    def __init__(self, algorithm: Algorithm, cfg: SolverConfig, norm: Callable[[np.ndarray], float],
                 norm_name: str, reference: Optional[Vector]):
        self.cfg = cfg
        self.norm = norm
        self.reference = None if reference is None else as_vector(reference)
        self.trajectory = Trajectory(algorithm=algorithm, norm=norm_name)
        self.started = time.perf_counter()

    def step(self, k: int, new: np.ndarray, old: np.ndarray, cg_iters: int = 0,
             u_residual: Optional[float] = None) -> bool:
        residual = self.norm(new - old)
        if not math.isfinite(residual):
            raise SolverError(f"{self.trajectory.algorithm.value} diverged at iteration {k}")
        quality = psnr(new, self.reference) if self.reference is not None else None
        self.trajectory.records.append(
            IterationRecord(k=k, residual=residual, psnr=quality, cg_iters=cg_iters, u_residual=u_residual)
        )
        logger.debug("%s k=%d residual=%.3e", self.trajectory.algorithm.value, k, residual)
        scale = self.norm(old)
        relative = residual / scale if scale > 0 else residual
        return residual == 0.0 or relative < self.cfg.stop_tol

    def finish(self, final: np.ndarray, converged: bool) -> Trajectory:
        t = self.trajectory
        t.final = final
        t.termination = 'converged' if converged else 'max_iters'
        t.wall_time = time.perf_counter() - self.started
        logger.info(
            "%s stopped after %d iterations (%s), last residual %.3e",
            t.algorithm.value, t.iterations, t.termination,
            t.records[-1].residual if t.records else float('nan'),
        )
        return t


def _run_ista(loss: LossSpec, den: KernelDenoiser, cfg: SolverConfig, scaled: bool,
              reference: Optional[Vector]) -> Trajectory:
    _check_pair(loss, den)
    W = den.as_linear_map()
    D = den.D if scaled else DiagonalWeights.identity(den.n)
    if scaled:
        norm, norm_name = (lambda v: d_norm(v, D)), 'D'
    else:
        norm, norm_name = euclidean_norm, 'euclidean'
    monitor = _Monitor(cfg.algorithm, cfg, norm, norm_name, reference)
    logger.info("Starting %s (gamma=%g, n=%d)", cfg.algorithm.value, cfg.gamma, den.n)

    x = initial_iterate(loss, cfg.init)
    converged = False
    for k in range(1, cfg.max_iters + 1):
        g = grad_f(loss, x)
        if scaled:
            g = g / D.d
        x_new = W.apply(x - cfg.gamma * g)
        converged = monitor.step(k, x_new, x)
        x = x_new
        if converged:
            break
    return monitor.finish(x, converged)


def pnp_ista_run(loss: LossSpec, den: KernelDenoiser, cfg: SolverConfig,
                 reference: Optional[Vector] = None) -> Trajectory:
    """x_{k+1} = W(x_k − γ∇f(x_k)), residuals in the Euclidean norm."""
    _expect(cfg, Algorithm.PNP_ISTA)
    return _run_ista(loss, den, cfg, scaled=False, reference=reference)


def sc_pnp_ista_run(loss: LossSpec, den: KernelDenoiser, cfg: SolverConfig,
                    reference: Optional[Vector] = None) -> Trajectory:
    """x_{k+1} = W(x_k − γD⁻¹∇f(x_k)), residuals in the D-norm."""
    _expect(cfg, Algorithm.SC_PNP_ISTA)
    if not den.is_plain:
        raise ConfigError("Scaled PnP-ISTA needs a plain kernel denoiser")
    return _run_ista(loss, den, cfg, scaled=True, reference=reference)


def _run_admm(loss: LossSpec, den: KernelDenoiser, cfg: SolverConfig, scaled: bool,
              reference: Optional[Vector]) -> Trajectory:
    _check_pair(loss, den)
    W = den.as_linear_map()
    D = den.D if scaled else DiagonalWeights.identity(den.n)
    if scaled:
        norm, norm_name = (lambda v: d_norm(v, D)), 'D'
    else:
        norm, norm_name = euclidean_norm, 'euclidean'
    prox = DProx(loss, D, cfg.rho, cfg.cg)
    monitor = _Monitor(cfg.algorithm, cfg, norm, norm_name, reference)
    logger.info("Starting %s (rho=%g, n=%d)", cfg.algorithm.value, cfg.rho, den.n)

    y = initial_iterate(loss, cfg.init)
    z = np.zeros_like(y)
    x = y.copy()
    u_prev = None
    converged = False
    for k in range(1, cfg.max_iters + 1):
        x, cg_iters = prox.solve(y - z, x0=x)
        u = x + z
        y_new = W.apply(u)
        z = z + x - y_new
        u_residual = None if u_prev is None else norm(u - u_prev)
        converged = monitor.step(k, y_new, y, cg_iters=cg_iters, u_residual=u_residual)
        y, u_prev = y_new, u
        if converged:
            break
    return monitor.finish(y, converged)


def pnp_admm_run(loss: LossSpec, den: KernelDenoiser, cfg: SolverConfig,
                 reference: Optional[Vector] = None) -> Trajectory:
    """x ← prox_{ρf}(y − z); y ← W(x + z); z ← z + x − y."""
    _expect(cfg, Algorithm.PNP_ADMM)
    return _run_admm(loss, den, cfg, scaled=False, reference=reference)


def sc_pnp_admm_run(loss: LossSpec, den: KernelDenoiser, cfg: SolverConfig,
                    reference: Optional[Vector] = None) -> Trajectory:
    """As pnp_admm_run with the D-weighted prox; residuals in the D-norm."""
    _expect(cfg, Algorithm.SC_PNP_ADMM)
    if not den.is_plain:
        raise ConfigError("Scaled PnP-ADMM needs a plain kernel denoiser")
    return _run_admm(loss, den, cfg, scaled=True, reference=reference)


RUNNERS = {
    Algorithm.PNP_ISTA: pnp_ista_run,
    Algorithm.SC_PNP_ISTA: sc_pnp_ista_run,
    Algorithm.PNP_ADMM: pnp_admm_run,
    Algorithm.SC_PNP_ADMM: sc_pnp_admm_run,
}


def run(loss: LossSpec, den: KernelDenoiser, cfg: SolverConfig,
        reference: Optional[Vector] = None) -> Trajectory:
    return RUNNERS[cfg.algorithm](loss, den, cfg, reference=reference)
