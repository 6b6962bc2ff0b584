"""
Experiment orchestration behind the management commands and the HTTP API:
reconstruction runs, contraction/bound sweeps, the counterexample table,
plain denoising and the invariant suite.
"""
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from django.conf import settings

from . import bounds
from .denoiser import (
    DenoiserMode,
    KernelDenoiser,
    KernelParams,
    build_kernel,
    make_guide,
    symmetrize,
    verify_assumptions,
)
from .exceptions import ConfigError, VerificationError
from .forward import (
    BlurKernel,
    ForwardKind,
    ForwardModel,
    InpaintingMask,
    check_rnp,
    degrade,
)
from .image_io import (
    load_blur_kernel,
    load_mask_pgm,
    load_or_synthesize,
    psnr,
    write_csv,
    write_pgm,
)
from .linop import VecImage, adjoint_consistency, d_inner, d_norm, dense_oracle_limit
from .solver import Algorithm, LossSpec, SolverConfig, run
from .spectral import (
    OperatorKind,
    PowerConfig,
    check_fe_closed_form,
    contraction_report,
    lambda2,
    make_update_operator,
    power_sigma,
    power_sigma_D,
)

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    'parameter_name', 'parameter_value', 'measured', 'bound', 'converged', 'iterations',
    'task', 'algorithm', 'denoiser_mode', 'mu', 'stride', 'h', 'gamma', 'rho',
    'spectral_quantity', 'spectral_value', 'holds',
]
COUNTEREXAMPLE_COLUMNS = ['n', 'dense_norm', 'closed_form', 'ratio', 'epsilon', 'epsilon_norm']
VERIFY_COLUMNS = ['check', 'passed', 'detail']
SWEEP_MAX_SIZE = 64
PROPERTY_TOL = 1e-10


@dataclass(frozen=True)
class SweepGrid:
    mu: Tuple[float, ...] = ()
    stride: Tuple[int, ...] = ()
    gamma: Tuple[float, ...] = ()
    rho: Tuple[float, ...] = ()
    h: Tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    task: ForwardKind = ForwardKind.DEBLURRING
    image_path: Optional[str] = None
    width: int = 32
    height: int = 32
    max_size: Optional[int] = None
    mu: float = 0.3
    mask_seed: Optional[int] = None
    mask_path: Optional[str] = None
    blur_kind: str = 'gaussian'
    blur_size: Optional[int] = None
    blur_std: float = 1.6
    kernel_path: Optional[str] = None
    stride: int = 2
    sigma: float = 0.0
    kernel: KernelParams = field(default_factory=lambda: KernelParams(bandwidth=0.3))
    denoiser_mode: DenoiserMode = DenoiserMode.PLAIN
    guide: str = 'observed'
    sinkhorn_tol: float = 1e-10
    sinkhorn_max_iter: int = 10000
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(Algorithm.SC_PNP_ISTA))
    power: PowerConfig = field(default_factory=PowerConfig)
    measure_contraction: bool = True
    sweep: SweepGrid = field(default_factory=SweepGrid)
    seed: int = 0
    output_dir: Optional[str] = None
    threads: Optional[int] = None
    n_max: int = 64
    trials: int = 100
    dense_limit: Optional[int] = None

    def with_overrides(self, output_dir=None, seed=None, threads=None) -> 'ExperimentConfig':
        changes = {}
        if output_dir is not None:
            changes['output_dir'] = str(output_dir)
        if seed is not None:
            changes['seed'] = int(seed)
        if threads is not None:
            changes['threads'] = int(threads)
        return replace(self, **changes) if changes else self

    @property
    def out_dir(self) -> Path:
        return Path(self.output_dir or settings.PNP_OUTPUT_DIR)

    @property
    def worker_count(self) -> int:
        return max(1, self.threads or settings.PNP_THREADS)

    @property
    def oracle_limit(self) -> int:
        return self.dense_limit or dense_oracle_limit()

    @property
    def algorithm(self) -> Algorithm:
        return self.solver.algorithm


@dataclass(eq=False)
class Instance:
    image: VecImage
    model: ForwardModel
    b: np.ndarray
    guide: VecImage
    den: KernelDenoiser

    @property
    def loss(self) -> LossSpec:
        return LossSpec(self.model, self.b)


def default_blur(config: ExperimentConfig) -> BlurKernel:
    if config.kernel_path:
        return load_blur_kernel(config.kernel_path)
    if config.task is ForwardKind.SUPERRESOLUTION:
        size = config.blur_size or 9
        kind = config.blur_kind if config.blur_size else 'uniform'
    else:
        size = config.blur_size or 25
        kind = config.blur_kind
    if kind == 'uniform':
        return BlurKernel.uniform(size)
    return BlurKernel.gaussian(size, config.blur_std)


def build_model(config: ExperimentConfig, image: VecImage, mu: Optional[float] = None,
                stride: Optional[int] = None) -> ForwardModel:
    if config.task is ForwardKind.INPAINTING:
        if config.mask_path and mu is None:
            mask = load_mask_pgm(config.mask_path)
            if (mask.width, mask.height) != (image.width, image.height):
                raise ConfigError(
                    f"Mask is {mask.width}x{mask.height} but the image is {image.width}x{image.height}"
                )
        else:
            seed = config.seed if config.mask_seed is None else config.mask_seed
            mask = InpaintingMask.random(image.width, image.height, config.mu if mu is None else mu, seed)
        return ForwardModel.inpainting(mask)
    blur = default_blur(config)
    if config.task is ForwardKind.DEBLURRING:
        return ForwardModel.deblurring(image.width, image.height, blur)
    return ForwardModel.superresolution(image.width, image.height, blur, stride or config.stride)


def build_denoiser(config: ExperimentConfig, guide: VecImage, h: Optional[float] = None) -> KernelDenoiser:
    params = config.kernel if h is None else replace(config.kernel, bandwidth=h)
    den = build_kernel(guide, params)
    if config.denoiser_mode is DenoiserMode.SYMMETRIZED:
        den = symmetrize(den, tol=config.sinkhorn_tol, max_iter=config.sinkhorn_max_iter)
    return den


def build_instance(config: ExperimentConfig, image: VecImage, mu: Optional[float] = None,
                   stride: Optional[int] = None, h: Optional[float] = None) -> Instance:
    model = build_model(config, image, mu=mu, stride=stride)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    b = degrade(model, image, config.sigma, rng)
    guide = image if config.guide == 'clean' else make_guide(model, b)
    return Instance(image=image, model=model, b=b, guide=guide, den=build_denoiser(config, guide, h))


def _finite_or_none(value):
    if value is None or not math.isfinite(value):
        return None
    return value


@dataclass
class RunReport:
    task: str
    algorithm: str
    final_psnr: float
    input_psnr: float
    iterations: int
    termination: str
    measured_factor: Optional[float]
    bound: Optional[float]
    wall_time: float
    outputs: dict = field(default_factory=dict)
    contraction: Optional[dict] = None

    def as_dict(self) -> dict:
        return {
            'task': self.task,
            'algorithm': self.algorithm,
            'final_psnr': _finite_or_none(self.final_psnr),
            'input_psnr': _finite_or_none(self.input_psnr),
            'iterations': self.iterations,
            'termination': self.termination,
            'measured_factor': self.measured_factor,
            'bound': self.bound,
            'wall_time': self.wall_time,
            'outputs': self.outputs,
            'contraction': self.contraction,
        }


def _write_report(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=str))
    return path


def run_reconstruct(config: ExperimentConfig, write_outputs: bool = True) -> Tuple[RunReport, object]:
    """Degrade, build the frozen denoiser, run the configured solver. Returns (report, trajectory)."""
    started = time.perf_counter()
    image = load_or_synthesize(config.image_path, config.width, config.height, config.max_size)
    instance = build_instance(config, image)
    trajectory = run(instance.loss, instance.den, config.solver, reference=image)

    measured = bound = contraction = None
    if config.measure_contraction:
        report = contraction_report(
            instance.loss, instance.den, config.algorithm, config.solver.parameter, config.power, strict=False,
        )
        measured = report.measured
        bound = report.bound.bound if report.bound else None
        contraction = report.as_dict()

    result = RunReport(
        task=config.task.value,
        algorithm=config.algorithm.value,
        final_psnr=psnr(trajectory.final, image),
        input_psnr=psnr(instance.guide, image),
        iterations=trajectory.iterations,
        termination=trajectory.termination,
        measured_factor=measured,
        bound=bound,
        wall_time=time.perf_counter() - started,
        contraction=contraction,
    )
    if write_outputs:
        out = config.out_dir
        reconstruction = VecImage(trajectory.final, image.width, image.height)
        result.outputs = {
            'reconstruction': str(out / 'reconstruction.pgm'),
            'guide': str(out / 'guide.pgm'),
            'trajectory': str(out / 'trajectory.csv'),
            'report': str(out / 'report.json'),
        }
        write_pgm(result.outputs['reconstruction'], reconstruction)
        write_pgm(result.outputs['guide'], instance.guide)
        write_csv(result.outputs['trajectory'], trajectory.CSV_COLUMNS, trajectory.csv_rows())
        _write_report(Path(result.outputs['report']), result.as_dict())
    logger.info(
        "Reconstruction %s/%s: PSNR %.2f dB -> %.2f dB in %d iterations",
        result.task, result.algorithm, result.input_psnr, result.final_psnr, result.iterations,
    )
    return result, trajectory


@dataclass
class SweepResult:
    rows: List[dict]
    path: Optional[Path] = None

    @property
    def failures(self) -> List[dict]:
        return [row for row in self.rows if not row['holds']]


def sweep_points(config: ExperimentConfig) -> List[dict]:
    """Cartesian product of the configured axes, in a fixed order."""
    grid = config.sweep
    param_name = config.algorithm.parameter_name
    axes = [
        ('mu', grid.mu or (config.mu,)) if config.task is ForwardKind.INPAINTING else ('mu', (None,)),
        ('stride', grid.stride or (config.stride,)) if config.task is ForwardKind.SUPERRESOLUTION
        else ('stride', (None,)),
        ('h', grid.h or (config.kernel.bandwidth,)),
        (param_name, getattr(grid, param_name) or (config.solver.parameter,)),
    ]
    varying = [name for name, values in axes if len(values) > 1]
    primary = varying[0] if varying else param_name
    names = [name for name, _ in axes]
    points = []
    for values in itertools.product(*[values for _, values in axes]):
        point = dict(zip(names, values))
        point['parameter_name'] = primary
        point['parameter_value'] = point[primary]
        points.append(point)
    return points


def _sweep_row(config: ExperimentConfig, image: VecImage, point: dict) -> dict:
    instance = build_instance(config, image, mu=point['mu'], stride=point['stride'], h=point['h'])
    param_name = config.algorithm.parameter_name
    report = contraction_report(
        instance.model, instance.den, config.algorithm, point[param_name], config.power, strict=False,
    )
    return {
        'parameter_name': point['parameter_name'],
        'parameter_value': point['parameter_value'],
        'measured': report.measured,
        'bound': report.bound.bound if report.bound else '',
        'converged': report.operator_norm.converged,
        'iterations': report.operator_norm.iterations,
        'task': config.task.value,
        'algorithm': config.algorithm.value,
        'denoiser_mode': config.denoiser_mode.value,
        'mu': instance.model.mu,
        'stride': point['stride'] if point['stride'] is not None else '',
        'h': instance.den.params.bandwidth,
        'gamma': point[param_name] if param_name == 'gamma' else '',
        'rho': point[param_name] if param_name == 'rho' else '',
        'spectral_quantity': report.spectral_name,
        'spectral_value': report.spectral.value if report.spectral else '',
        'holds': report.holds,
    }


def run_sweep(config: ExperimentConfig, write_outputs: bool = True) -> SweepResult:
    image = load_or_synthesize(config.image_path, config.width, config.height,
                               config.max_size or SWEEP_MAX_SIZE)
    points = sweep_points(config)
    logger.info("Sweeping %d grid points on %d worker(s)", len(points), config.worker_count)
    with ThreadPoolExecutor(max_workers=config.worker_count) as pool:
        rows = list(pool.map(lambda point: _sweep_row(config, image, point), points))

    result = SweepResult(rows=rows)
    if write_outputs:
        result.path = write_csv(config.out_dir / 'sweep.csv', SWEEP_COLUMNS, rows)
    if result.failures:
        listing = '; '.join(
            f"{row['parameter_name']}={row['parameter_value']} measured={row['measured']} bound={row['bound']}"
            for row in result.failures
        )
        raise VerificationError(f"{len(result.failures)} sweep point(s) failed: {listing}", rows=result.failures)
    return result


def run_counterexample(
    n_max: int,
    out_dir: Optional[Path] = None,
    eps: float = bounds.COUNTEREXAMPLE_EPSILON,
) -> List[dict]:
    """
    Dense counterexample norms for n = 3 … n_max; every value must exceed 1.

    Each row also carries the same norm for the finite-width kernel K_eps, which
    is irreducible and still expands once eps is small.
    """
    if n_max < 3:
        raise ConfigError(f"n_max must be at least 3, got {n_max}")
    rows = []
    for n in range(3, n_max + 1):
        dense = bounds.counterexample_norm(n)
        closed = bounds.counterexample_closed_form(n)
        if not dense > 1.0:
            raise VerificationError(f"Counterexample norm for n={n} is {dense!r}, not above 1",
                                    measured=dense, expected=closed)
        rows.append({
            'n': n, 'dense_norm': dense, 'closed_form': closed, 'ratio': dense / closed,
            'epsilon': eps, 'epsilon_norm': bounds.counterexample_epsilon_norm(n, eps),
        })
    if out_dir is not None:
        write_csv(Path(out_dir) / 'counterexample.csv', COUNTEREXAMPLE_COLUMNS, rows)
    return rows


@dataclass
class DenoiseReport:
    noisy_psnr: float
    denoised_psnr: float
    mode: str
    outputs: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            'noisy_psnr': _finite_or_none(self.noisy_psnr),
            'denoised_psnr': _finite_or_none(self.denoised_psnr),
            'mode': self.mode,
            'outputs': self.outputs,
        }


def run_denoise(config: ExperimentConfig, write_outputs: bool = True) -> DenoiseReport:
    """Apply the kernel denoiser built from a noisy image to that image."""
    image = load_or_synthesize(config.image_path, config.width, config.height, config.max_size)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    noisy = image.with_data(image.data + config.sigma * rng.standard_normal(image.n))
    den = build_denoiser(config, noisy)
    denoised = image.with_data(den.apply(noisy))
    report = DenoiseReport(
        noisy_psnr=psnr(noisy, image),
        denoised_psnr=psnr(denoised, image),
        mode=config.denoiser_mode.value,
    )
    if write_outputs:
        out = config.out_dir
        report.outputs = {'denoised': str(out / 'denoised.pgm'), 'noisy': str(out / 'noisy.pgm')}
        write_pgm(report.outputs['denoised'], denoised)
        write_pgm(report.outputs['noisy'], noisy)
    return report


@dataclass
class CheckResult:
    check: str
    passed: bool
    detail: str = ''

    def as_dict(self) -> dict:
        return {'check': self.check, 'passed': self.passed, 'detail': self.detail}


def _trial_pairs(rng: np.random.Generator, n: int, trials: int):
    for _ in range(trials):
        yield rng.standard_normal(n), rng.standard_normal(n)


def _eigen_deficit_failures(instance: Instance, rho: float, trials: int,
                            rng: np.random.Generator) -> Tuple[int, float]:
    """Check ‖F_s x‖_D² against the eigen-deficit bound on random x, in the D^{1/2} similarity frame."""
    den = instance.den
    F = make_update_operator(OperatorKind.F_S, instance.model, den, rho).to_dense()
    root = np.sqrt(den.D.d)
    S = root[:, None] * F / root[None, :]
    S = 0.5 * (S + S.T)
    values, vectors = np.linalg.eigh(S)
    xi, w = values[-1], vectors[:, -1]
    failures = 0
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(den.n)
        Sx = S @ x
        lhs = float(Sx @ Sx)
        rhs = bounds.eigen_deficit_bound(float(x @ x), float(np.clip(xi, -1.0, 1.0)), float(w @ x))
        gap = lhs - rhs
        worst = max(worst, gap / float(x @ x))
        if gap > 1e-9 * float(x @ x):
            failures += 1
    return failures, worst


def run_verify(config: ExperimentConfig, write_outputs: bool = True) -> List[CheckResult]:
    """The invariant suite on the configured instance. Raises VerificationError if any check fails."""
    image = load_or_synthesize(config.image_path, config.width, config.height,
                               config.max_size or SWEEP_MAX_SIZE)
    instance = build_instance(config, image)
    den, model = instance.den, instance.model
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    W = den.as_linear_map()
    ones = np.ones(den.n)
    checks: List[CheckResult] = []

    assumptions = verify_assumptions(den, dense_limit=config.oracle_limit)
    checks.append(CheckResult('kernel_assumptions', assumptions.passed,
                              ', '.join(assumptions.failures()) or 'psd, symmetric, unit diagonal, irreducible'))

    fixed = float(np.max(np.abs(W.apply(ones) - ones)))
    checks.append(CheckResult('constants_fixed', fixed <= den.stochastic_tol, f"max |We - e| = {fixed:.3e}"))

    D = den.D
    worst = 0.0
    for x, y in _trial_pairs(rng, den.n, config.trials):
        gap = abs(d_inner(W.apply(x), y, D) - d_inner(x, W.apply(y), D))
        worst = max(worst, gap / (d_norm(x, D) * d_norm(y, D)))
    checks.append(CheckResult('d_self_adjoint', worst <= PROPERTY_TOL, f"worst relative gap {worst:.3e}"))

    w_norm = power_sigma_D(W, D, config.power).value
    checks.append(CheckResult('unit_d_norm', abs(w_norm - 1.0) <= 1e-6, f"‖W‖_D = {w_norm:.10f}"))

    gap_report = lambda2(den, config.power)
    checks.append(CheckResult('spectral_gap', gap_report.value < 1.0 - 1e-9, f"lambda2 = {gap_report.value:.10f}"))

    A = model.as_linear_map()
    a_norm = power_sigma(A, config.power).value
    checks.append(CheckResult('forward_norm', a_norm <= 1.0 + 1e-8, f"‖A‖₂ = {a_norm:.10f}"))
    checks.append(CheckResult('restricted_nullity', check_rnp(model), f"mu = {model.mu:.6f}"))

    gamma = config.solver.gamma if config.algorithm.is_ista else 1.0
    operators = [('A', A, 1.0), ('W', W, 1.0)]
    if den.is_plain:
        operators.append(('P_s', make_update_operator(OperatorKind.P_S, model, den, gamma), 1.0 + gamma))
    for name, op, norm_estimate in operators:
        consistency = adjoint_consistency(op, trials=config.trials, tol=PROPERTY_TOL,
                                          norm_estimate=norm_estimate, rng=rng)
        checks.append(CheckResult(f'adjoint_{name}', consistency.passed, f"worst relative gap {consistency.worst_relative_gap:.3e}"))

    ista = Algorithm.SC_PNP_ISTA if den.is_plain else Algorithm.PNP_ISTA
    admm = Algorithm.SC_PNP_ADMM if den.is_plain else Algorithm.PNP_ADMM
    rho = config.solver.rho if not config.algorithm.is_ista else 1.0
    for algorithm, parameter in ((ista, gamma), (admm, rho)):
        report = contraction_report(model, den, algorithm, parameter, config.power, strict=False)
        detail = f"measured {report.measured:.8f}"
        if report.bound:
            detail += f", bound {report.bound.bound:.8f}"
        checks.append(CheckResult(f'contraction_{algorithm.value}', report.holds,
                                  '; '.join(report.failures()) or detail))

    if model.kind is not ForwardKind.SUPERRESOLUTION:
        try:
            check_fe_closed_form(model, rho)
            checks.append(CheckResult('fe_closed_form', True, f"rho = {rho}"))
        except VerificationError as e:
            checks.append(CheckResult('fe_closed_form', False, str(e)))

    if den.is_plain and den.n <= config.oracle_limit:
        failures, worst_gap = _eigen_deficit_failures(instance, rho, config.trials, rng)
        checks.append(CheckResult('eigen_deficit', failures == 0, f"worst excess {worst_gap:.3e}"))

    if write_outputs:
        write_csv(config.out_dir / 'verify.csv', VERIFY_COLUMNS, [c.as_dict() for c in checks])
    failed = [c for c in checks if not c.passed]
    if failed:
        raise VerificationError(
            f"{len(failed)} invariant check(s) failed: " + ', '.join(c.check for c in failed),
            rows=[c.as_dict() for c in failed],
        )
    return checks


def json_safe(value):
    """Numpy scalars to Python, non-finite floats to None, recursively."""
    if isinstance(value, dict):
        return {key: json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(item) for item in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def execute(kind: str, config: ExperimentConfig) -> Tuple[dict, List[dict]]:
    """Run one experiment kind; returns (report, table rows) in JSON-safe form."""
    report, rows = _execute(kind, config)
    return json_safe(report), json_safe(rows)


def _execute(kind: str, config: ExperimentConfig) -> Tuple[dict, List[dict]]:
    if kind == 'reconstruct':
        report, trajectory = run_reconstruct(config)
        return report.as_dict(), trajectory.csv_rows()
    if kind == 'sweep':
        result = run_sweep(config)
        return {'points': len(result.rows), 'path': str(result.path) if result.path else None}, result.rows
    if kind == 'counterexample':
        rows = run_counterexample(config.n_max, out_dir=config.out_dir)
        return {'n_max': config.n_max, 'rows': len(rows)}, rows
    if kind == 'denoise':
        return run_denoise(config).as_dict(), []
    if kind == 'verify':
        checks = run_verify(config)
        return {'checks': len(checks), 'passed': True}, [c.as_dict() for c in checks]
    raise ConfigError(f"Unknown experiment kind '{kind}'")


EXPERIMENT_KINDS = ('reconstruct', 'sweep', 'counterexample', 'denoise', 'verify')
