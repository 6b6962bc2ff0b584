"""
Measurement operators A for inpainting, deblurring and superresolution.

Blur is circular convolution on the image torus, computed with real FFTs; the
adjoint multiplies by the conjugate transfer function, so it is exact correlation.
Subsampling keeps the top-left pixel of every stride-by-stride block.
"""
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import fft

from .exceptions import ConfigError, DimensionMismatchError, VerificationError
from .linop import LinearMap, VecImage, Vector, as_vector

logger = logging.getLogger(__name__)

CLOSED_FORM_TOL = 1e-9


class ForwardKind(str, enum.Enum):
    INPAINTING = 'inpainting'
    DEBLURRING = 'deblurring'
    SUPERRESOLUTION = 'superresolution'

    @classmethod
    def parse(cls, value) -> 'ForwardKind':
        if isinstance(value, cls):
            return value
        aliases = {'inpaint': cls.INPAINTING, 'deblur': cls.DEBLURRING, 'sr': cls.SUPERRESOLUTION}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ConfigError(f"Unknown task '{value}'")


@dataclass(frozen=True, eq=False)
class InpaintingMask:
    observed: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        observed = np.asarray(self.observed, dtype=bool).ravel().copy()
        if observed.size != self.width * self.height:
            raise DimensionMismatchError('InpaintingMask', self.width * self.height, observed.size)
        if not observed.any():
            raise ConfigError("Inpainting mask must observe at least one pixel")
        observed.setflags(write=False)
        object.__setattr__(self, 'observed', observed)

    @property
    def n(self) -> int:
        return self.observed.size

    @property
    def count(self) -> int:
        return int(self.observed.sum())

    @property
    def mu(self) -> float:
        return self.count / self.n

    @classmethod
    def full(cls, width: int, height: int) -> 'InpaintingMask':
        return cls(np.ones(width * height, dtype=bool), width, height)

    @classmethod
    def random(cls, width: int, height: int, mu: float, seed: int = 0) -> 'InpaintingMask':
        """
        Observe round(mu·n) pixels drawn without replacement.

        The same seed yields nested masks across mu: pixels are taken from one fixed
        random permutation, so a larger mu only adds pixels.
        """
        if not 0.0 < mu <= 1.0:
            raise ConfigError(f"mu must lie in (0, 1], got {mu}")
        n = width * height
        count = max(1, int(round(mu * n)))
        order = np.random.default_rng(seed).permutation(n)
        observed = np.zeros(n, dtype=bool)
        observed[order[:count]] = True
        return cls(observed, width, height)


@dataclass(frozen=True, eq=False)
class BlurKernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64)
        if taps.ndim == 1:
            taps = taps.reshape(1, -1)
        if taps.ndim != 2 or taps.size == 0:
            raise ConfigError(f"Blur taps must be a non-empty 2-D array, got shape {taps.shape}")
        if np.any(taps < 0) or not np.all(np.isfinite(taps)):
            raise ConfigError("Blur taps must be finite and nonnegative")
        total = taps.sum()
        if total <= 0:
            raise ConfigError("Blur taps sum to zero")
        taps = taps / total
        taps.setflags(write=False)
        object.__setattr__(self, 'taps', taps)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.taps.shape

    @property
    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.taps, self.taps[::-1, ::-1]))

    @classmethod
    def gaussian(cls, size: int, std: float) -> 'BlurKernel':
        if size < 1 or std <= 0:
            raise ConfigError(f"Gaussian blur needs size >= 1 and std > 0, got {size}, {std}")
        t = np.arange(size) - (size - 1) / 2.0
        profile = np.exp(-t ** 2 / (2.0 * std ** 2))
        return cls(np.outer(profile, profile))

    @classmethod
    def uniform(cls, size: int) -> 'BlurKernel':
        if size < 1:
            raise ConfigError(f"Uniform blur size must be >= 1, got {size}")
        return cls(np.ones((size, size)))

    def transfer_function(self, height: int, width: int) -> np.ndarray:
        """rfft2 of the taps folded onto a height×width torus, centred at (kh//2, kw//2)."""
        kh, kw = self.taps.shape
        psf = np.zeros((height, width))
        rows = (np.arange(kh) - kh // 2) % height
        cols = (np.arange(kw) - kw // 2) % width
        np.add.at(psf, (rows[:, None], cols[None, :]), self.taps)
        return fft.rfft2(psf)


@dataclass(frozen=True, eq=False)
class Subsampler:
    stride: int

    def __post_init__(self):
        if int(self.stride) != self.stride or self.stride < 1:
            raise ConfigError(f"Subsampling stride must be a positive integer, got {self.stride}")

    def output_shape(self, height: int, width: int) -> Tuple[int, int]:
        return math.ceil(height / self.stride), math.ceil(width / self.stride)

    def decimate(self, grid: np.ndarray) -> np.ndarray:
        return grid[::self.stride, ::self.stride]

    def zero_fill(self, small: np.ndarray, height: int, width: int) -> np.ndarray:
        grid = np.zeros((height, width))
        grid[::self.stride, ::self.stride] = small
        return grid


@dataclass(frozen=True, eq=False)
class ForwardModel:
    kind: ForwardKind
    width: int
    height: int
    mask: Optional[InpaintingMask] = None
    blur: Optional[BlurKernel] = None
    subsampler: Optional[Subsampler] = None
    _transfer: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind is ForwardKind.INPAINTING:
            if self.mask is None:
                raise ConfigError("Inpainting model needs a mask")
            if (self.mask.width, self.mask.height) != (self.width, self.height):
                raise DimensionMismatchError('inpainting mask', self.n, self.mask.n)
        else:
            if self.blur is None:
                raise ConfigError(f"{self.kind.value} model needs a blur kernel")
            if self.kind is ForwardKind.SUPERRESOLUTION and self.subsampler is None:
                raise ConfigError("Superresolution model needs a subsampler")
            object.__setattr__(self, '_transfer', self.blur.transfer_function(self.height, self.width))

    @classmethod
    def inpainting(cls, mask: InpaintingMask) -> 'ForwardModel':
        return cls(ForwardKind.INPAINTING, mask.width, mask.height, mask=mask)

    @classmethod
    def deblurring(cls, width: int, height: int, blur: BlurKernel) -> 'ForwardModel':
        return cls(ForwardKind.DEBLURRING, width, height, blur=blur)

    @classmethod
    def superresolution(cls, width: int, height: int, blur: BlurKernel, stride: int) -> 'ForwardModel':
        return cls(ForwardKind.SUPERRESOLUTION, width, height, blur=blur, subsampler=Subsampler(stride))

    @property
    def n(self) -> int:
        return self.width * self.height

    @property
    def dim_in(self) -> int:
        return self.n

    @property
    def output_shape(self) -> Tuple[int, int]:
        if self.kind is ForwardKind.SUPERRESOLUTION:
            return self.subsampler.output_shape(self.height, self.width)
        return self.height, self.width

    @property
    def dim_out(self) -> int:
        rows, cols = self.output_shape
        return rows * cols

    @property
    def mu(self) -> float:
        """Fraction of observed pixels, or m/n for superresolution; 1 for deblurring."""
        if self.kind is ForwardKind.INPAINTING:
            return self.mask.mu
        return self.dim_out / self.n

    def _convolve(self, grid: np.ndarray) -> np.ndarray:
        return fft.irfft2(fft.rfft2(grid) * self._transfer, s=grid.shape)

    def _correlate(self, grid: np.ndarray) -> np.ndarray:
        return fft.irfft2(fft.rfft2(grid) * np.conj(self._transfer), s=grid.shape)

    def _apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind is ForwardKind.INPAINTING:
            return np.where(self.mask.observed, x, 0.0)
        blurred = self._convolve(x.reshape(self.height, self.width))
        if self.kind is ForwardKind.SUPERRESOLUTION:
            blurred = self.subsampler.decimate(blurred)
        return blurred.ravel()

    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        if self.kind is ForwardKind.INPAINTING:
            return np.where(self.mask.observed, y, 0.0)
        if self.kind is ForwardKind.SUPERRESOLUTION:
            grid = self.subsampler.zero_fill(y.reshape(self.output_shape), self.height, self.width)
        else:
            grid = y.reshape(self.height, self.width)
        return self._correlate(grid).ravel()

    def as_linear_map(self) -> LinearMap:
        return LinearMap(self.n, self.dim_out, self._apply, self._adjoint, name='A')

    def measurement_image(self, y: Vector) -> VecImage:
        rows, cols = self.output_shape
        return VecImage(as_vector(y), width=cols, height=rows)


def apply_forward(model: ForwardModel, x: Vector) -> np.ndarray:
    return model.as_linear_map().apply(x)


def apply_adjoint(model: ForwardModel, y: Vector) -> np.ndarray:
    return model.as_linear_map().adjoint_apply(y)


def gram_map(model: ForwardModel) -> LinearMap:
    """AᵀA as a square map on image space."""
    A = model.as_linear_map()
    return LinearMap(
        model.n, model.n,
        lambda x: A.adjoint_apply(A.apply(x)),
        lambda x: A.adjoint_apply(A.apply(x)),
        name='AᵀA',
    )


def closed_form_Ae_squared(model: ForwardModel) -> float:
    if model.kind is ForwardKind.INPAINTING:
        return float(model.mask.count)
    if model.kind is ForwardKind.DEBLURRING:
        return float(model.n)
    return float(model.dim_out)


def norm_Ae_squared(model: ForwardModel) -> float:
    """‖Ae‖₂², measured by applying A to the constant image and checked against μn."""
    Ae = apply_forward(model, np.ones(model.n))
    measured = float(Ae @ Ae)
    expected = closed_form_Ae_squared(model)
    if abs(measured - expected) > CLOSED_FORM_TOL * max(1.0, expected):
        raise VerificationError(
            f"‖Ae‖² for {model.kind.value} is {measured!r}, closed form gives {expected!r}",
            measured=measured, expected=expected,
        )
    return measured


def check_rnp(model: ForwardModel) -> bool:
    """Ae ≠ 0, which gives N(A) ∩ span(e) = {0}."""
    return norm_Ae_squared(model) > 0.0


def add_noise(b: Vector, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian noise with std ``sigma`` on the [0,1] intensity scale."""
    b = as_vector(b)
    if sigma < 0:
        raise ConfigError(f"Noise level must be nonnegative, got {sigma}")
    if sigma == 0:
        return b.copy()
    return b + sigma * rng.standard_normal(b.size)


def degrade(model: ForwardModel, x: Vector, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """b = Ax + ε. Unobserved inpainting entries stay zero."""
    b = add_noise(apply_forward(model, x), sigma, rng)
    if model.kind is ForwardKind.INPAINTING:
        b[~model.mask.observed] = 0.0
    return b
