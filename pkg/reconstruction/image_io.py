"""
Grayscale PGM images, blur-kernel text files, PSNR and CSV tables.

Intensities live on [0, 1]; 8-bit files map through /255.
"""
import csv
import logging
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from skimage.metrics import mean_squared_error, peak_signal_noise_ratio

from .exceptions import DimensionMismatchError, ImageIOError
from .forward import BlurKernel, InpaintingMask
from .linop import VecImage, Vector, as_vector

logger = logging.getLogger(__name__)

WHITESPACE = b' \t\r\n'


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise ImageIOError(f"Cannot read {path}: {e}") from e


def _next_token(data: bytes, idx: int) -> Tuple[bytes, int]:
    size = len(data)
    while idx < size:
        if data[idx] == ord('#'):
            while idx < size and data[idx] not in b'\r\n':
                idx += 1
        elif data[idx] in WHITESPACE:
            idx += 1
        else:
            break
    start = idx
    while idx < size and data[idx] not in WHITESPACE:
        idx += 1
    if start == idx:
        raise ImageIOError("Truncated PGM header")
    return data[start:idx], idx


def read_pgm(path) -> VecImage:
    """Read a P5 (binary) or P2 (ASCII) graymap."""
    data = _read_bytes(path)
    magic, idx = _next_token(data, 0)
    if magic not in (b'P5', b'P2'):
        raise ImageIOError(f"{path} is not a PGM file (magic {magic!r})")
    try:
        width_tok, idx = _next_token(data, idx)
        height_tok, idx = _next_token(data, idx)
        maxval_tok, idx = _next_token(data, idx)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except ValueError as e:
        raise ImageIOError(f"Malformed PGM header in {path}: {e}") from e
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageIOError(f"Invalid PGM dimensions {width}x{height} / maxval {maxval} in {path}")
    n = width * height

    if magic == b'P5':
        # exactly one whitespace byte separates the header from the raster
        payload = data[idx + 1:]
        dtype = np.dtype('u1') if maxval < 256 else np.dtype('>u2')
        if len(payload) < n * dtype.itemsize:
            raise ImageIOError(f"PGM raster in {path} is truncated ({len(payload)} bytes for {n} pixels)")
        values = np.frombuffer(payload, dtype=dtype, count=n).astype(np.float64)
    else:
        tokens = data[idx:].split()
        if len(tokens) < n:
            raise ImageIOError(f"PGM raster in {path} has {len(tokens)} samples, expected {n}")
        try:
            values = np.array([int(t) for t in tokens[:n]], dtype=np.float64)
        except ValueError as e:
            raise ImageIOError(f"Non-integer sample in {path}: {e}") from e

    if values.max(initial=0) > maxval:
        raise ImageIOError(f"Sample exceeds maxval {maxval} in {path}")
    logger.debug("Read %s (%dx%d, maxval %d)", path, width, height, maxval)
    return VecImage(values / maxval, width=width, height=height)


def to_bytes(image: VecImage) -> np.ndarray:
    """Clip to [0, 1] and quantize to 8 bits."""
    return np.round(np.clip(image.data, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image: VecImage):
    path = Path(path)
    header = f"P5\n{image.width} {image.height}\n255\n".encode('ascii')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + to_bytes(image).tobytes())
    except OSError as e:
        raise ImageIOError(f"Cannot write {path}: {e}") from e


def load_blur_kernel(path) -> BlurKernel:
    """Plain-text kernel: first line "h w", then h·w weights. Renormalized to sum 1."""
    tokens = _read_bytes(path).split()
    try:
        kh, kw = int(tokens[0]), int(tokens[1])
        weights = np.array([float(t) for t in tokens[2:]])
    except (IndexError, ValueError) as e:
        raise ImageIOError(f"Malformed kernel file {path}: {e}") from e
    if kh <= 0 or kw <= 0 or weights.size != kh * kw:
        raise ImageIOError(f"Kernel file {path} declares {kh}x{kw} but holds {weights.size} weights")
    return BlurKernel(weights.reshape(kh, kw))


def load_mask_pgm(path) -> InpaintingMask:
    """Nonzero pixels are observed."""
    image = read_pgm(path)
    return InpaintingMask(image.data > 0, image.width, image.height)


def psnr(x: Vector, ref: Vector) -> float:
    """PSNR on the [0, 1] scale; identical images give +inf."""
    x, ref = as_vector(x), as_vector(ref)
    if x.size != ref.size:
        raise DimensionMismatchError('psnr', ref.size, x.size)
    if mean_squared_error(ref, x) == 0.0:
        return math.inf
    return float(peak_signal_noise_ratio(ref, x, data_range=1.0))


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=list(columns), extrasaction='ignore')
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    except OSError as e:
        raise ImageIOError(f"Cannot write {path}: {e}") from e
    return path


def synthetic_image(width: int = 32, height: int = 32) -> VecImage:
    """A deterministic piecewise-smooth test scene: a ramp, a bright disk and a dark square."""
    yy, xx = np.mgrid[0:height, 0:width]
    u = xx / max(width - 1, 1)
    v = yy / max(height - 1, 1)
    grid = 0.2 + 0.5 * u * (1.0 - 0.4 * v)
    disk = (u - 0.35) ** 2 + (v - 0.4) ** 2 < 0.04
    grid[disk] = 0.9
    square = (u > 0.6) & (u < 0.85) & (v > 0.55) & (v < 0.85)
    grid[square] = 0.1
    return VecImage.from_grid(grid)


def center_crop(image: VecImage, max_size: int) -> VecImage:
    if image.width <= max_size and image.height <= max_size:
        return image
    h = min(image.height, max_size)
    w = min(image.width, max_size)
    top = (image.height - h) // 2
    left = (image.width - w) // 2
    return VecImage.from_grid(image.grid[top:top + h, left:left + w])


def load_or_synthesize(path: Optional[str], width: int = 32, height: int = 32,
                       max_size: Optional[int] = None) -> VecImage:
    image = read_pgm(path) if path else synthetic_image(width, height)
    if max_size:
        image = center_crop(image, max_size)
    return image

