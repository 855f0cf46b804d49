"""Image arrays, noise simulation, SNR metrics and file I/O.

Images are float64 numpy arrays of shape ``(channels, height, width)`` holding
intensities on the nominal [0, 255] scale.  Measurement vectors are plain
arrays as well (real for spatial-domain models, complex for Fourier ones).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

PathLike = Union[str, Path]

#: SNR reported when the test image equals the reference exactly.
SNR_CAP_DB = 300.0

IMGF64_MAGIC = b"IMF8"
_IMGF64_HEADER = struct.Struct("<4sIII")


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported image files."""


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def as_image(x, copy: bool = False) -> np.ndarray:
    """Validate ``x`` and return it as a ``(C, H, W)`` float64 array.

    2-D input is treated as a single channel.
    """
    arr = np.array(x, dtype=np.float64, copy=copy) if copy else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3:
        raise ValueError(f"image must be 2-D or 3-D (C, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"image dimensions must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite samples")
    return arr


def snr_db(reference, test) -> float:
    """SNR of ``test`` against ``reference`` in dB, ``20 log10(|r| / |r - t|)``.

    No mean subtraction is applied.  Identical inputs give ``SNR_CAP_DB``.
    """
    reference = np.asarray(reference)
    test = np.asarray(test)
    if reference.shape != test.shape:
        raise ValueError(f"dimension mismatch: {reference.shape} vs {test.shape}")
    ref_norm = np.linalg.norm(reference.ravel())
    if ref_norm == 0:
        raise ValueError("reference is all zero")
    err_norm = np.linalg.norm((reference - test).ravel())
    if err_norm == 0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 20.0 * math.log10(ref_norm / err_norm))


def add_awgn(x, noise: NoiseSpec | float, seed: int | None = None) -> np.ndarray:
    """Return ``x`` plus i.i.d. Gaussian noise of standard deviation ``sigma``.

    ``noise`` is a :class:`NoiseSpec` or a bare sigma (then ``seed`` is used).
    Complex inputs get independent noise of std ``sigma / sqrt(2)`` on the real
    and imaginary parts so the total per-sample variance is ``sigma**2``.
    """
    if not isinstance(noise, NoiseSpec):
        noise = NoiseSpec(float(noise), 0 if seed is None else seed)
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite samples")
    if noise.sigma == 0:
        return x.copy()
    rng = np.random.default_rng(noise.seed)
    if np.iscomplexobj(x):
        s = noise.sigma / math.sqrt(2.0)
        n = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
        return x + s * n
    return x + noise.sigma * rng.standard_normal(x.shape)


def sigma_for_input_snr(x, target_snr: float) -> float:
    """Noise std that gives ``target_snr`` dB on ``x`` in expectation."""
    x = np.asarray(x)
    norm = np.linalg.norm(x.ravel())
    if norm == 0:
        raise ValueError("signal is all zero")
    if math.isinf(target_snr) and target_snr > 0:
        return 0.0
    return float(norm / (math.sqrt(x.size) * 10.0 ** (target_snr / 20.0)))


# -- PGM --------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    # Header tokens separated by whitespace; '#' comments run to end of line.
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ImageFormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after PGM header")
    return tokens, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise ImageFormatError("not a binary PGM (magic P5)")
    tokens, offset = _pgm_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"malformed PGM header: {tokens!r}") from exc
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad PGM dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    payload = data[offset:offset + width * height]
    if len(payload) < width * height:
        raise ImageFormatError(
            f"truncated PGM payload: expected {width * height} bytes, got {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(1, height, width)
    return pixels.astype(np.float64)


def encode_pgm(image) -> bytes:
    image = as_image(image)
    if image.shape[0] != 1:
        raise ValueError(f"PGM holds one channel, image has {image.shape[0]}")
    _, height, width = image.shape
    # clamp, then round half away from zero (values are non-negative here)
    pixels = np.floor(np.clip(image[0], 0.0, 255.0) + 0.5).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (width, height) + pixels.tobytes()


def read_pgm(path: PathLike) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(image, path: PathLike) -> None:
    Path(path).write_bytes(encode_pgm(image))


# -- IMGF64 -----------------------------------------------------------------

def encode_imgf64(image) -> bytes:
    """Serialize a ``(C, H, W)`` array to IMGF64 bytes."""
    image = as_image(image)
    channels, height, width = image.shape
    header = _IMGF64_HEADER.pack(IMGF64_MAGIC, width, height, channels)
    return header + np.ascontiguousarray(image, dtype="<f8").tobytes()


def decode_imgf64(data: bytes) -> np.ndarray:
    if len(data) < _IMGF64_HEADER.size:
        raise ImageFormatError(f"IMGF64 header needs {_IMGF64_HEADER.size} bytes, got {len(data)}")
    magic, width, height, channels = _IMGF64_HEADER.unpack_from(data)
    if magic != IMGF64_MAGIC:
        raise ImageFormatError(f"bad IMGF64 magic {magic!r}")
    if min(width, height, channels) < 1:
        raise ImageFormatError(f"bad IMGF64 dimensions {width}x{height}x{channels}")
    expected = 8 * width * height * channels
    payload = data[_IMGF64_HEADER.size:]
    if len(payload) != expected:
        raise ImageFormatError(
            f"IMGF64 size mismatch: header declares {width}x{height}x{channels} "
            f"({expected} bytes), payload has {len(payload)} bytes"
        )
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(channels, height, width)


def read_imgf64_stream(stream: BinaryIO) -> np.ndarray:
    """Read exactly one IMGF64 image from a binary stream."""
    header = stream.read(_IMGF64_HEADER.size)
    if len(header) < _IMGF64_HEADER.size:
        raise ImageFormatError("truncated IMGF64 header")
    magic, width, height, channels = _IMGF64_HEADER.unpack(header)
    if magic != IMGF64_MAGIC:
        raise ImageFormatError(f"bad IMGF64 magic {magic!r}")
    payload = stream.read(8 * width * height * channels)
    return decode_imgf64(header + payload)


def read_imgf64(path: PathLike) -> np.ndarray:
    return decode_imgf64(Path(path).read_bytes())


def write_imgf64(image, path: PathLike) -> None:
    Path(path).write_bytes(encode_imgf64(image))


def read_image(path: PathLike) -> np.ndarray:
    """Read PGM or IMGF64, chosen by the file's magic bytes."""
    data = Path(path).read_bytes()
    if data[:4] == IMGF64_MAGIC:
        return decode_imgf64(data)
    if data[:2] == b"P5":
        return decode_pgm(data)
    raise ImageFormatError(f"{path}: unrecognized image format")


def write_image(image, path: PathLike) -> None:
    """Write by extension: ``.pgm`` as PGM, anything else as IMGF64."""
    if str(path).lower().endswith(".pgm"):
        write_pgm(image, path)
    else:
        write_imgf64(image, path)
