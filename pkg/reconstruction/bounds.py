"""
Closed-form contraction bounds.

Everything here is plain arithmetic on measured spectral quantities (λ₂, ζ*, ‖D‖₂),
so each evaluator can be checked by hand. Reports carry the squared bound and its
square root; comparisons against measured norms use the square root.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ConfigError, VerificationError
from .forward import ForwardKind, InpaintingMask
from .linop import DiagonalWeights

COUNTEREXAMPLE_TOL = 1e-10
COUNTEREXAMPLE_EPSILON = 0.25


@dataclass(frozen=True)
class BoundInputs:
    lambda2: Optional[float] = None
    zeta_star: Optional[float] = None
    gamma: Optional[float] = None
    rho: Optional[float] = None
    mu: float = 1.0
    normD: float = 1.0
    n: int = 1
    theta: float = 0.0

    def __post_init__(self):
        for name in ('lambda2', 'zeta_star'):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 < self.mu <= 1.0:
            raise ConfigError(f"mu must lie in (0, 1], got {self.mu}")
        if self.normD < 1.0:
            raise ConfigError(f"‖D‖₂ is at least 1 for a kernel denoiser, got {self.normD}")
        if self.n < 1:
            raise ConfigError(f"n must be positive, got {self.n}")
        if not 0.0 <= self.theta < 1.0:
            raise ConfigError(f"theta must lie in [0, 1), got {self.theta}")

    @property
    def norm_Ae_sq(self) -> float:
        return self.mu * self.n


@dataclass(frozen=True)
class BoundReport:
    squared_bound: float
    formula_id: str
    averaged: bool = False

    @property
    def bound(self) -> float:
        """Bound on the operator itself; for ADMM this is ½(1 + ‖J‖ bound)."""
        root = math.sqrt(self.squared_bound)
        if self.averaged:
            return 0.5 * (1.0 + root)
        return root

    def as_dict(self) -> dict:
        return {'formula_id': self.formula_id, 'squared_bound': self.squared_bound, 'bound': self.bound}


def _require(inputs: BoundInputs, name: str) -> float:
    value = getattr(inputs, name)
    if value is None:
        raise ConfigError(f"{name} is required for this bound")
    return value


def _check_gamma(gamma: float, allow_two: bool = False):
    upper_ok = gamma <= 2.0 if allow_two else gamma < 2.0
    if not (gamma > 0.0 and upper_ok):
        raise ConfigError(f"gamma must lie in (0, 2), got {gamma}")


def _check_rho(rho: float):
    if not rho > 0.0:
        raise ConfigError(f"rho must be positive, got {rho}")


def lemma2_bound(lambda1: float, lambda2: float, norm_Nq1_sq: float) -> float:
    """(λ₁² − λ₂²)‖Nq₁‖² + λ₂², the bound on ‖MN‖² for self-adjoint M."""
    if abs(lambda1) < abs(lambda2):
        raise ConfigError(f"|lambda1| must dominate |lambda2|, got {lambda1}, {lambda2}")
    if not 0.0 <= norm_Nq1_sq <= 1.0:
        raise ConfigError(f"‖Nq₁‖² must lie in [0, 1], got {norm_Nq1_sq}")
    return (lambda1 ** 2 - lambda2 ** 2) * norm_Nq1_sq + lambda2 ** 2


def prop5_Gs_bound(gamma: float, normD: float, norm_Ae_sq: float, n: int) -> float:
    """Upper bound on ‖G_s q₁‖²_D, q₁ the D-unit constant vector."""
    _check_gamma(gamma, allow_two=True)
    if normD < 1.0 or n < 1 or not 0.0 <= norm_Ae_sq <= n:
        raise ConfigError(f"Invalid inputs normD={normD}, ‖Ae‖²={norm_Ae_sq}, n={n}")
    return 1.0 - (1.0 / normD) * gamma * (2.0 - gamma) * (norm_Ae_sq / n)


def bound_ista_scaled(inputs: BoundInputs) -> BoundReport:
    """Bound on ‖P_s‖_D; deblurring passes mu = 1."""
    gamma = _require(inputs, 'gamma')
    _check_gamma(gamma)
    lambda2 = _require(inputs, 'lambda2')
    squared = lemma2_bound(1.0, lambda2, prop5_Gs_bound(gamma, inputs.normD, inputs.norm_Ae_sq, inputs.n))
    return BoundReport(squared, 'ista_scaled')


def bound_ista_plain(inputs: BoundInputs, task: ForwardKind) -> BoundReport:
    """Bound on ‖P‖₂ for a symmetric denoiser."""
    gamma = _require(inputs, 'gamma')
    _check_gamma(gamma)
    lambda2 = _require(inputs, 'lambda2')
    task = ForwardKind.parse(task)
    if task is ForwardKind.DEBLURRING:
        tail = (1.0 - gamma) ** 2
    else:
        tail = 1.0 - gamma * (2.0 - gamma) * inputs.mu
    return BoundReport(lambda2 ** 2 + (1.0 - lambda2 ** 2) * tail, f'ista_plain_{task.value}')


def bound_ista_kernel_inpaint(inputs: BoundInputs) -> BoundReport:
    """
    Bound on ‖P‖_D for a plain kernel denoiser when AᵀA is a diagonal mask.

    The mask commutes with D, so P is the D-self-adjoint W times a diagonal
    contraction G, and ‖Gq₁‖²_D obeys the same estimate as G_s.
    """
    gamma = _require(inputs, 'gamma')
    _check_gamma(gamma)
    lambda2 = _require(inputs, 'lambda2')
    squared = lemma2_bound(1.0, lambda2, prop5_Gs_bound(gamma, inputs.normD, inputs.norm_Ae_sq, inputs.n))
    return BoundReport(squared, 'ista_kernel_inpainting')


def bound_admm_sym(inputs: BoundInputs, task: ForwardKind) -> BoundReport:
    """Bound on ‖J‖₂ = ‖FV‖₂ for a symmetric denoiser."""
    rho = _require(inputs, 'rho')
    _check_rho(rho)
    zeta = _require(inputs, 'zeta_star')
    task = ForwardKind.parse(task)
    if task is ForwardKind.DEBLURRING:
        tail = ((1.0 - rho) / (1.0 + rho)) ** 2
    elif task is ForwardKind.INPAINTING:
        tail = 1.0 - 4.0 * inputs.mu * rho / (1.0 + rho) ** 2
    else:
        raise ConfigError("No symmetric-denoiser ADMM bound is available for superresolution")
    return BoundReport(zeta ** 2 + (1.0 - zeta ** 2) * tail, f'admm_sym_{task.value}', averaged=True)


def bound_admm_scaled_inpaint(inputs: BoundInputs) -> BoundReport:
    """Bound on ‖J_s‖_D for inpainting; theta comes from theta_from_weights."""
    rho = _require(inputs, 'rho')
    _check_rho(rho)
    zeta = _require(inputs, 'zeta_star')
    tail = 1.0 - (1.0 - inputs.theta ** 2) * inputs.mu / inputs.normD
    return BoundReport(zeta ** 2 + (1.0 - zeta ** 2) * tail, 'admm_scaled_inpainting', averaged=True)


def bound_admm_scaled_smooth(inputs: BoundInputs, task: ForwardKind) -> BoundReport:
    """Bound on ‖J_s‖_D for deblurring and superresolution."""
    rho = _require(inputs, 'rho')
    _check_rho(rho)
    zeta = _require(inputs, 'zeta_star')
    task = ForwardKind.parse(task)
    if task is ForwardKind.INPAINTING:
        raise ConfigError("Use bound_admm_scaled_inpaint for inpainting")
    scale = inputs.mu if task is ForwardKind.SUPERRESOLUTION else 1.0
    tail = 1.0 - (scale / (inputs.n * inputs.normD ** 2)) * 4.0 * rho / (1.0 + rho) ** 2
    return BoundReport(zeta ** 2 + (1.0 - zeta ** 2) * tail, f'admm_scaled_{task.value}', averaged=True)


def theta_from_weights(D: DiagonalWeights, rho: float) -> float:
    """max over i of |1 − ρ/Dᵢᵢ| / (1 + ρ/Dᵢᵢ)."""
    _check_rho(rho)
    ratio = rho / D.d
    return float(np.max(np.abs(1.0 - ratio) / (1.0 + ratio)))


def fe_closed_form(
    task: ForwardKind,
    rho: float,
    mask: Optional[InpaintingMask] = None,
    n: Optional[int] = None,
) -> np.ndarray:
    """F applied to the constant image, for the unscaled (D = I) resolvent."""
    _check_rho(rho)
    task = ForwardKind.parse(task)
    if task is ForwardKind.INPAINTING:
        if mask is None:
            raise ConfigError("Inpainting closed form needs the mask")
        return 1.0 - (2.0 * rho / (1.0 + rho)) * mask.observed.astype(np.float64)
    if task is ForwardKind.DEBLURRING:
        if n is None:
            raise ConfigError("Deblurring closed form needs n")
        return np.full(n, (1.0 - rho) / (1.0 + rho))
    raise ConfigError("Fe has no closed form for superresolution")


def counterexample_closed_form(n: int) -> float:
    return math.sqrt(2 * n * n - 4 * n + 4) / n


def counterexample_matrices(n: int):
    """(A, D₀, K₀) with A = (1/n)eeᵀ and K₀ an all-ones (n−1)-block plus an isolated pixel."""
    if n < 2:
        raise ConfigError(f"Counterexample needs n >= 2, got {n}")
    A = np.full((n, n), 1.0 / n)
    K0 = np.zeros((n, n))
    K0[:n - 1, :n - 1] = 1.0
    K0[n - 1, n - 1] = 1.0
    d0 = K0.sum(axis=1)
    return A, d0, K0


def _dense_d_norm(K: np.ndarray, A: np.ndarray) -> float:
    """‖D⁻¹K(I − AᵀA)‖ in the D-norm, D = diag(Ke), via dense SVD of the D^{1/2} similarity."""
    n = K.shape[0]
    d = K.sum(axis=1)
    M = (K / d[:, None]) @ (np.eye(n) - A.T @ A)
    root = np.sqrt(d)
    return float(np.linalg.norm(root[:, None] * M / root[None, :], 2))


def counterexample_norm(n: int) -> float:
    """‖W₀(I − AᵀA)‖ in the D₀-norm via dense SVD, checked against its closed form."""
    A, _, K0 = counterexample_matrices(n)
    measured = _dense_d_norm(K0, A)
    expected = counterexample_closed_form(n)
    if abs(measured - expected) > COUNTEREXAMPLE_TOL:
        raise VerificationError(
            f"Counterexample norm for n={n} is {measured!r}, closed form gives {expected!r}",
            measured=measured, expected=expected,
        )
    return measured


def counterexample_kernel(n: int, eps: float) -> np.ndarray:
    """K_ε with entries exp(−(xᵢ − xⱼ)²/ε²) on the edge signal x = (0, …, 0, 1); K_ε → K₀ as ε → 0."""
    if n < 2:
        raise ConfigError(f"Counterexample needs n >= 2, got {n}")
    if not eps > 0:
        raise ConfigError(f"Kernel width must be positive, got {eps}")
    x = np.zeros(n)
    x[-1] = 1.0
    return np.exp(-np.subtract.outer(x, x) ** 2 / eps ** 2)


def counterexample_epsilon_norm(n: int, eps: float) -> float:
    """‖W_ε(I − AᵀA)‖ in the D_ε-norm for a genuine, irreducible kernel; tends to the closed form as ε → 0."""
    A, _, _ = counterexample_matrices(n)
    return _dense_d_norm(counterexample_kernel(n, eps), A)


def eigen_deficit_bound(x_norm_sq: float, xi: float, w_inner_x: float) -> float:
    """‖x‖² − (1 − ξ²)⟨w, x⟩², which bounds ‖Hx‖² for self-adjoint H with ‖H‖ ≤ 1 and Hw = ξw, ‖w‖ = 1."""
    if abs(xi) > 1.0:
        raise ConfigError(f"Eigenvalue must satisfy |xi| <= 1, got {xi}")
    return x_norm_sq - (1.0 - xi ** 2) * w_inner_x ** 2
