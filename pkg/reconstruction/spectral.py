"""
Power-method estimates of operator norms and deflated eigenvalues, plus the
factory that assembles the PnP update operators as matrix-free maps.
"""
import enum
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from django.conf import settings

from .bounds import (
    BoundInputs,
    BoundReport,
    bound_admm_scaled_inpaint,
    bound_admm_scaled_smooth,
    bound_admm_sym,
    bound_ista_kernel_inpaint,
    bound_ista_plain,
    bound_ista_scaled,
    fe_closed_form,
    theta_from_weights,
)
from .denoiser import KernelDenoiser
from .exceptions import ConfigError, VerificationError
from .forward import ForwardKind, ForwardModel, gram_map
from .linop import (
    DiagonalWeights,
    LinearMap,
    compose,
    euclidean_norm,
    linear_combination,
    similarity_in_d_norm,
)
from .solver import Algorithm, CGConfig, LossSpec, solve_spd

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-13
CONTRACTION_SLACK = 1e-6
FE_TOL = 1e-9
RESOLVENT_CG = CGConfig(tol=1e-12, max_iters=1000)


@dataclass(frozen=True)
class PowerConfig:
    tol: float = 1e-8
    max_iters: int = 5000
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0 or self.max_iters < 1:
            raise ConfigError(f"Power method needs tol > 0 and max_iters >= 1, got {self.tol}, {self.max_iters}")

    @classmethod
    def from_settings(cls, seed: int = 0) -> 'PowerConfig':
        return cls(
            tol=getattr(settings, 'PNP_POWER_TOL', cls.tol),
            max_iters=getattr(settings, 'PNP_POWER_MAX_ITERS', cls.max_iters),
            seed=seed,
        )


@dataclass
class SpectralReport:
    value: float
    iterations: int
    converged: bool
    residual: float = 0.0

    def as_dict(self) -> dict:
        return {
            'value': self.value,
            'iterations': self.iterations,
            'converged': self.converged,
            'residual': self.residual,
        }


class OperatorKind(str, enum.Enum):
    P = 'P'
    P_S = 'P_s'
    R = 'R'
    R_S = 'R_s'
    J = 'J'
    J_S = 'J_s'
    F = 'F'
    F_S = 'F_s'
    V = 'V'
    G = 'G'
    G_S = 'G_s'

    @property
    def is_scaled(self) -> bool:
        return self.value.endswith('_s')

    @property
    def needs_denoiser(self) -> bool:
        return self not in (OperatorKind.F, OperatorKind.F_S, OperatorKind.G, OperatorKind.G_S)


def _resolvent(model: ForwardModel, D: DiagonalWeights, rho: float, cg_cfg: CGConfig) -> LinearMap:
    """(I + ρD⁻¹AᵀA)⁻¹ = (D + ρAᵀA)⁻¹D; its transpose is D(D + ρAᵀA)⁻¹."""
    AtA = gram_map(model)

    def normal(z):
        return D.d * z + rho * AtA.apply(z)

    def apply(v):
        return solve_spd(normal, D.d * v, cg_cfg)[0]

    def adjoint(y):
        return D.d * solve_spd(normal, y, cg_cfg)[0]

    return LinearMap(model.n, model.n, apply, adjoint, name='L')


def make_update_operator(
    kind: Union[OperatorKind, str],
    loss_or_model: Union[LossSpec, ForwardModel],
    den: Optional[KernelDenoiser],
    parameter: float,
    cg_cfg: CGConfig = RESOLVENT_CG,
) -> LinearMap:
    """
    Linear part of a PnP update map. ``parameter`` is γ for G/P kinds and ρ for F/J/R
    kinds; V ignores it. Unscaled kinds use D = I.
    """
    try:
        kind = OperatorKind(kind)
    except ValueError:
        raise ConfigError(f"Unknown operator kind '{kind}'")
    model = loss_or_model.model if isinstance(loss_or_model, LossSpec) else loss_or_model
    n = model.n
    if kind.needs_denoiser:
        if den is None:
            raise ConfigError(f"Operator {kind.value} needs a denoiser")
        if den.n != n:
            raise ConfigError(f"Denoiser size {den.n} does not match model size {n}")
    if kind.is_scaled:
        if den is None:
            raise ConfigError(f"Operator {kind.value} needs the denoiser's D")
        D = den.D
    else:
        D = DiagonalWeights.identity(n)

    I = LinearMap.identity(n)
    if kind in (OperatorKind.G, OperatorKind.G_S, OperatorKind.P, OperatorKind.P_S):
        if not 0.0 < parameter < 2.0 and kind in (OperatorKind.P, OperatorKind.P_S):
            raise ConfigError(f"gamma must lie in (0, 2), got {parameter}")
        scaled_gram = compose(LinearMap.diagonal(1.0 / D.d, name='D⁻¹'), gram_map(model))
        G = linear_combination([(1.0, I), (-parameter, scaled_gram)], name=kind.value.replace('P', 'G'))
        if kind in (OperatorKind.G, OperatorKind.G_S):
            return G
        return compose(den.as_linear_map(), G)

    if kind is OperatorKind.V:
        return linear_combination([(2.0, den.as_linear_map()), (-1.0, I)], name='V')

    if not parameter > 0.0:
        raise ConfigError(f"rho must be positive, got {parameter}")
    F = linear_combination([(2.0, _resolvent(model, D, parameter, cg_cfg)), (-1.0, I)], name='F')
    if kind in (OperatorKind.F, OperatorKind.F_S):
        return F
    V = linear_combination([(2.0, den.as_linear_map()), (-1.0, I)], name='V')
    J = compose(F, V)
    if kind in (OperatorKind.J, OperatorKind.J_S):
        return J
    return linear_combination([(0.5, I), (0.5, J)], name=kind.value)


def _start_vector(dim: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).uniform(size=dim)
    return v / euclidean_norm(v)


def power_sigma(op: LinearMap, cfg: PowerConfig = PowerConfig()) -> SpectralReport:
    """‖op‖₂ from power iteration on opᵀop."""
    v = _start_vector(op.dim_in, cfg.seed)
    prev = None
    estimate = 0.0
    residual = np.inf
    for iteration in range(1, cfg.max_iters + 1):
        Mv = op.apply(v)
        estimate = euclidean_norm(Mv)
        if estimate <= ZERO_NORM:
            return SpectralReport(0.0, iteration, True, 0.0)
        w = op.adjoint_apply(Mv)
        residual = euclidean_norm(w - estimate ** 2 * v) / estimate ** 2
        v = w / euclidean_norm(w)
        if prev is not None and abs(estimate - prev) <= cfg.tol * estimate:
            return SpectralReport(estimate, iteration, True, residual)
        prev = estimate
    logger.warning("Power iteration on %s stopped unconverged after %d iterations", op.name, cfg.max_iters)
    return SpectralReport(estimate, cfg.max_iters, False, residual)


def power_sigma_D(op: LinearMap, D: DiagonalWeights, cfg: PowerConfig = PowerConfig()) -> SpectralReport:
    """‖op‖_D = ‖D^{1/2} op D^{-1/2}‖₂."""
    return power_sigma(similarity_in_d_norm(op, D), cfg)


def dominant_eigenvalue(op: LinearMap, cfg: PowerConfig = PowerConfig()) -> SpectralReport:
    """
    Magnitude of the dominant eigenvalue of a square map with real spectrum.

    The estimate is ‖Bv‖ for unit v. The exit residual ‖B²v − |λ|²v‖/|λ|² also
    accepts ± eigenvalue pairs, and anything larger than √tol marks the run
    unconverged.
    """
    v = _start_vector(op.dim_in, cfg.seed)
    prev = None
    estimate = 0.0
    converged = False
    iterations = cfg.max_iters
    for iteration in range(1, cfg.max_iters + 1):
        w = op.apply(v)
        estimate = euclidean_norm(w)
        if estimate <= ZERO_NORM:
            return SpectralReport(0.0, iteration, True, 0.0)
        v = w / estimate
        if prev is not None and abs(estimate - prev) <= cfg.tol * estimate:
            converged = True
            iterations = iteration
            break
        prev = estimate
    residual = euclidean_norm(op.apply(op.apply(v)) - estimate ** 2 * v) / estimate ** 2
    if converged and residual > max(np.sqrt(cfg.tol), 1e-6):
        logger.warning("Deflated power iteration on %s oscillates (residual %.2e)", op.name, residual)
        converged = False
    elif not converged:
        logger.warning("Deflated power iteration on %s stopped unconverged after %d iterations",
                       op.name, cfg.max_iters)
    return SpectralReport(estimate, iterations, converged, residual)


def _brauer_deflation(M: LinearMap) -> LinearMap:
    """M − (1/n)eeᵀ."""
    return LinearMap(
        M.dim_in, M.dim_out,
        lambda x: M.apply(x) - np.mean(x),
        lambda y: M.adjoint_apply(y) - np.mean(y),
        name=f"{M.name}−ee/n",
    )


def _symmetric_deflation(M: LinearMap, D: DiagonalWeights) -> LinearMap:
    """D^{1/2}MD^{-1/2} − qqᵀ with q = D^{1/2}e / ‖D^{1/2}e‖."""
    S = similarity_in_d_norm(M, D)
    q = np.sqrt(D.d)
    q = q / euclidean_norm(q)
    return LinearMap(
        S.dim_in, S.dim_out,
        lambda x: S.apply(x) - q * float(q @ x),
        lambda y: S.adjoint_apply(y) - q * float(q @ y),
        name=f"{M.name}−qq",
    )


def _deflated_estimate(M: LinearMap, den: KernelDenoiser, cfg: PowerConfig, method: str) -> SpectralReport:
    if method == 'brauer':
        return dominant_eigenvalue(_brauer_deflation(M), cfg)
    if method == 'symmetric':
        return power_sigma(_symmetric_deflation(M, den.D), cfg)
    raise ConfigError(f"Unknown deflation method '{method}'")


def lambda2(den: KernelDenoiser, cfg: PowerConfig = PowerConfig(), method: str = 'brauer') -> SpectralReport:
    """Second eigenvalue of W, as the dominant eigenvalue of W − (1/n)eeᵀ."""
    return _deflated_estimate(den.as_linear_map(), den, cfg, method)


def zeta_star(den: KernelDenoiser, cfg: PowerConfig = PowerConfig(), method: str = 'brauer') -> SpectralReport:
    """max |2λ − 1| over the non-unit eigenvalues λ of W."""
    n = den.n
    V = linear_combination([(2.0, den.as_linear_map()), (-1.0, LinearMap.identity(n))], name='V')
    return _deflated_estimate(V, den, cfg, method)


@dataclass
class ContractionReport:
    algorithm: Algorithm
    task: ForwardKind
    parameter: float
    operator: str
    norm: str
    operator_norm: SpectralReport
    measured: float
    spectral_name: str
    spectral: Optional[SpectralReport]
    bound: Optional[BoundReport]
    theorem_applies: bool
    notes: List[str] = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return not self.failures()

    def failures(self) -> List[str]:
        if not self.theorem_applies:
            return []
        problems = []
        if not self.measured < 1.0:
            problems.append(f"measured factor {self.measured:.10f} is not below 1")
        if self.bound is not None and self.measured > self.bound.bound + CONTRACTION_SLACK:
            problems.append(f"measured factor {self.measured:.10f} exceeds bound {self.bound.bound:.10f}")
        if self.bound is not None and not self.bound.bound < 1.0:
            problems.append(f"bound {self.bound.bound:.10f} is not below 1")
        return problems

    def as_dict(self) -> dict:
        return {
            'algorithm': self.algorithm.value,
            'task': self.task.value,
            'parameter': self.parameter,
            'operator': self.operator,
            'norm': self.norm,
            'operator_norm': self.operator_norm.as_dict(),
            'measured': self.measured,
            'spectral_quantity': self.spectral_name,
            'spectral': self.spectral.as_dict() if self.spectral else None,
            'bound': self.bound.as_dict() if self.bound else None,
            'theorem_applies': self.theorem_applies,
            'holds': self.holds,
            'notes': self.notes,
        }


def contraction_report(
    loss: Union[LossSpec, ForwardModel],
    den: KernelDenoiser,
    algorithm: Union[Algorithm, str],
    parameter: float,
    cfg: PowerConfig = PowerConfig(),
    strict: bool = True,
    deflation: str = 'brauer',
) -> ContractionReport:
    """
    Measure the contraction factor of ``algorithm``'s update map and pair it with
    its closed-form bound. With ``strict`` a violated guarantee raises
    VerificationError carrying both numbers.
    """
    algorithm = Algorithm(algorithm)
    model = loss.model if isinstance(loss, LossSpec) else loss
    task = model.kind
    notes = []
    if algorithm.is_scaled and not den.is_plain:
        raise ConfigError(f"{algorithm.value} needs a plain kernel denoiser")

    if algorithm.is_ista:
        kind = OperatorKind.P_S if algorithm.is_scaled else OperatorKind.P
        op = make_update_operator(kind, model, den, parameter)
        spectral_name = 'lambda2'
    else:
        kind = OperatorKind.R_S if algorithm.is_scaled else OperatorKind.R
        op = make_update_operator(OperatorKind.J_S if algorithm.is_scaled else OperatorKind.J, model, den, parameter)
        spectral_name = 'zeta_star'

    # a diagonal AᵀA commutes with D, so plain W still contracts in the D-norm
    kernel_inpaint = algorithm is Algorithm.PNP_ISTA and den.is_plain and task is ForwardKind.INPAINTING
    if algorithm.is_scaled or kernel_inpaint:
        norm_name = 'D'
        operator_norm = power_sigma_D(op, den.D, cfg)
    else:
        norm_name = 'euclidean'
        operator_norm = power_sigma(op, cfg)
    measured = operator_norm.value if algorithm.is_ista else 0.5 * (1.0 + operator_norm.value)
    if not operator_norm.converged:
        notes.append('operator norm estimate did not converge')

    theorem_applies = algorithm.is_scaled or not den.is_plain or kernel_inpaint
    estimate = lambda2 if algorithm.is_ista else zeta_star
    spectral = estimate(den, cfg, method=deflation)
    if not spectral.converged:
        notes.append(f'{spectral_name} estimate did not converge')
    bound = None
    if theorem_applies:
        value = min(spectral.value, 1.0)
        inputs = BoundInputs(
            lambda2=value if algorithm.is_ista else None,
            zeta_star=value if not algorithm.is_ista else None,
            gamma=parameter if algorithm.is_ista else None,
            rho=parameter if not algorithm.is_ista else None,
            mu=model.mu,
            normD=den.D.norm,
            n=model.n,
            theta=theta_from_weights(den.D, parameter) if not algorithm.is_ista else 0.0,
        )
        if algorithm is Algorithm.SC_PNP_ISTA:
            bound = bound_ista_scaled(inputs)
        elif kernel_inpaint:
            bound = bound_ista_kernel_inpaint(inputs)
        elif algorithm is Algorithm.PNP_ISTA:
            bound = bound_ista_plain(inputs, task)
        elif algorithm is Algorithm.SC_PNP_ADMM:
            if task is ForwardKind.INPAINTING:
                bound = bound_admm_scaled_inpaint(inputs)
            else:
                bound = bound_admm_scaled_smooth(inputs, task)
        elif task is not ForwardKind.SUPERRESOLUTION:
            bound = bound_admm_sym(inputs, task)
        else:
            notes.append('no closed-form bound for this task')
    else:
        notes.append('plain denoiser in the Euclidean norm: contractivity is not guaranteed')

    report = ContractionReport(
        algorithm=algorithm,
        task=task,
        parameter=parameter,
        operator=kind.value,
        norm=norm_name,
        operator_norm=operator_norm,
        measured=measured,
        spectral_name=spectral_name,
        spectral=spectral,
        bound=bound,
        theorem_applies=theorem_applies,
        notes=notes,
    )
    logger.info(
        "%s %s=%g: measured %.8f, bound %s",
        algorithm.value, algorithm.parameter_name, parameter, measured,
        f"{bound.bound:.8f}" if bound else 'n/a',
    )
    if strict and not report.holds:
        raise VerificationError(
            f"{algorithm.value} with {algorithm.parameter_name}={parameter}: " + '; '.join(report.failures()),
            measured=measured, expected=bound.bound if bound else 1.0,
        )
    return report


def check_fe_closed_form(model: ForwardModel, rho: float,
                         cg_cfg: CGConfig = RESOLVENT_CG) -> Tuple[np.ndarray, np.ndarray]:
    """F applied to e against its closed form; returns (measured, expected)."""
    mask = model.mask if model.kind is ForwardKind.INPAINTING else None
    expected = fe_closed_form(model.kind, rho, mask=mask, n=model.n)
    F = make_update_operator(OperatorKind.F, model, None, rho, cg_cfg)
    measured = F.apply(np.ones(model.n))
    gap = float(np.max(np.abs(measured - expected)))
    if gap > FE_TOL:
        raise VerificationError(
            f"Fe for {model.kind.value} at rho={rho} differs from its closed form by {gap:.3e}",
            measured=measured.tolist(), expected=expected.tolist(),
        )
    return measured, expected
