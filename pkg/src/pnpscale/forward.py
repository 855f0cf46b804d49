"""Forward operators H and the quadratic data fidelity g(x) = 0.5 ||y - Hx||^2.

Three models are provided:

* :class:`IdentityModel` for denoising,
* :class:`MaskedFourier` for subsampled unitary 2-D DFT measurements,
* :class:`BlurDownsample` for circular blur followed by decimation.

All models map ``(C, H, W)`` float64 images to measurement arrays and expose
``apply``, ``adjoint``, ``grad_g`` and ``prox_g``.  Instances are immutable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np



class ConvergenceError(RuntimeError):
    """Raised when an inner iterative solve does not reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool


def conjugate_gradient(apply_a, b, x0=None, tol=1e-8, max_iter=500):
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Stops when ``||b - A x|| <= tol * ||b||``.  Returns ``(x, CGInfo)``.
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=b.dtype)
    r = b - apply_a(x)
    b_norm = np.linalg.norm(b.ravel())
    if b_norm == 0:
        return np.zeros_like(b), CGInfo(0, 0.0, True)
    target = tol * b_norm
    rr = np.vdot(r, r).real
    p = r.copy()
    it = 0
    while math.sqrt(rr) > target and it < max_iter:
        ap = apply_a(p)
        alpha = rr / np.vdot(p, ap).real
        x += alpha * p
        r -= alpha * ap
        rr_new = np.vdot(r, r).real
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    rel = math.sqrt(rr) / b_norm
    return x, CGInfo(it, rel, rel <= tol)


class ForwardModel:
    """Base class: linear H with the quadratic data term built on top."""

    kind = "abstract"
    domain = "spatial"
    input_shape: tuple[int, int, int]

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, v):
        raise NotImplementedError

    @property
    def output_size(self) -> int:
        raise NotImplementedError

    @property
    def lipschitz(self) -> float:
        """``||H||_2^2``, the Lipschitz constant of ``grad_g``."""
        raise NotImplementedError

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[np.newaxis]
        if x.shape != self.input_shape:
            raise ValueError(f"expected image of shape {self.input_shape}, got {x.shape}")
        return x

    def g(self, x, y) -> float:
        r = np.asarray(y) - self.apply(x)
        return 0.5 * float(np.vdot(r, r).real)

    def grad_g(self, x, y):
        """Gradient of the data fidelity, ``H^T (H x - y)``."""
        return self.adjoint(self.apply(x) - y)

    def prox_g(self, z, gamma, y, x0=None):
        """``argmin_x 0.5 ||x - z||^2 + gamma * g(x)``."""
        raise NotImplementedError

    def normal_apply(self, x, gamma):
        """``(I + gamma H^T H) x``; the system solved by ``prox_g``."""
        return x + gamma * self.adjoint(self.apply(x))


@dataclass(frozen=True, eq=False)
class IdentityModel(ForwardModel):
    input_shape: tuple

    kind = "identity"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", _shape3(self.input_shape))

    @property
    def output_size(self):
        return math.prod(self.input_shape)

    @property
    def lipschitz(self):
        return 1.0

    def apply(self, x):
        return self._check_input(x).copy()

    def adjoint(self, v):
        return self._check_input(v).copy()

    def prox_g(self, z, gamma, y, x0=None):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        z = self._check_input(z)
        return (z + gamma * np.asarray(y)) / (1.0 + gamma)


# -- radial Fourier mask ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class RadialMask:
    """Boolean grid over 2-D DFT frequencies in unshifted (``np.fft``) order."""

    kept: np.ndarray
    line_count: int
    requested_rate: float | None = None

    @property
    def height(self):
        return self.kept.shape[0]

    @property
    def width(self):
        return self.kept.shape[1]

    @property
    def rate(self) -> float:
        return float(self.kept.mean())

    @property
    def includes_dc(self) -> bool:
        return bool(self.kept[0, 0])

    def metadata(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "line_count": self.line_count,
            "requested_rate": self.requested_rate,
            "kept_fraction": self.rate,
            "includes_dc": self.includes_dc,
        }


def conjugate_symmetrize(mask):
    """OR the mask with its image under ``k -> -k (mod N)``."""
    mask = np.asarray(mask, dtype=bool)
    mirrored = np.roll(mask[::-1, ::-1], 1, axis=(0, 1))
    return mask | mirrored


def _radial_lines(height, width, line_count):
    centered = np.zeros((height, width), dtype=bool)
    cy, cx = height // 2, width // 2
    reach = max(height, width)
    t = np.arange(-reach, reach + 1)
    for j in range(line_count):
        theta = math.pi * j / line_count
        dy, dx = math.sin(theta), math.cos(theta)
        # step one pixel along the major axis, round the minor one
        if abs(dx) >= abs(dy):
            cols = cx + t
            rows = cy + np.rint(t * dy / dx).astype(int)
        else:
            rows = cy + t
            cols = cx + np.rint(t * dx / dy).astype(int)
        ok = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
        centered[rows[ok], cols[ok]] = True
    return conjugate_symmetrize(np.fft.ifftshift(centered))


def radial_mask(height: int, width: int, rate: float, tol: float = 0.02) -> RadialMask:
    """Radial line sampling pattern with kept fraction within ``tol`` of ``rate``.

    Lines are equally spaced in angle and all pass through DC.  The line count
    is found by bisection on the kept fraction.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"sampling rate must lie in (0, 1], got {rate}")

    def frac(n):
        return _radial_lines(height, width, n).mean()

    lo, hi = 1, 4 * max(height, width)
    if frac(hi) < rate:
        hi_mask = _radial_lines(height, width, hi)
        if abs(hi_mask.mean() - rate) > tol:
            raise ValueError(f"rate {rate} not reachable with radial lines")
        return RadialMask(hi_mask, hi, rate)
    while lo < hi:
        mid = (lo + hi) // 2
        if frac(mid) < rate:
            lo = mid + 1
        else:
            hi = mid
    candidates = [n for n in range(max(1, lo - 3), lo + 4)]
    best = min(candidates, key=lambda n: (abs(frac(n) - rate), n))
    kept = _radial_lines(height, width, best)
    if abs(kept.mean() - rate) > tol:
        raise ValueError(
            f"closest radial mask has rate {kept.mean():.4f}, requested {rate} +/- {tol}"
        )
    return RadialMask(kept, best, rate)


@dataclass(frozen=True, eq=False)
class MaskedFourier(ForwardModel):
    """Unitary 2-D DFT per channel, restricted to the kept frequencies.

    Measurements have shape ``(C, m)`` and are complex.
    """

    mask: np.ndarray
    channels: int = 1

    kind = "masked-fourier"
    domain = "frequency"

    def __post_init__(self):
        mask = np.asarray(getattr(self.mask, "kept", self.mask), dtype=bool)
        if mask.ndim != 2:
            raise ValueError("mask must be a 2-D grid")
        if not np.array_equal(mask, conjugate_symmetrize(mask)):
            raise ValueError("mask must be conjugate symmetric")
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)

    @property
    def input_shape(self):
        return (self.channels,) + self.mask.shape

    @property
    def output_size(self):
        return self.channels * int(self.mask.sum())

    @property
    def lipschitz(self):
        return 1.0

    def apply(self, x):
        x = self._check_input(x)
        return np.fft.fft2(x, norm="ortho")[:, self.mask]

    def _zero_fill(self, v):
        v = np.asarray(v)
        m = int(self.mask.sum())
        if v.shape != (self.channels, m):
            raise ValueError(f"expected measurements of shape {(self.channels, m)}, got {v.shape}")
        full = np.zeros(self.input_shape, dtype=np.complex128)
        full[:, self.mask] = v
        return full

    def adjoint(self, v):
        # adjoint w.r.t. the real inner product Re<a, b> on C^m
        return np.fft.ifft2(self._zero_fill(v), norm="ortho").real

    def prox_g(self, z, gamma, y, x0=None):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        z = self._check_input(z)
        rhs_hat = np.fft.fft2(z, norm="ortho") + gamma * np.fft.fft2(self.adjoint(y), norm="ortho")
        return np.fft.ifft2(rhs_hat / (1.0 + gamma * self.mask), norm="ortho").real


# -- blur + downsample ------------------------------------------------------

def gaussian_kernel(size: int = 19, std: float = 1.6) -> np.ndarray:
    """Separable truncated Gaussian, normalized to unit sum."""
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be odd and positive")
    ax = np.arange(size) - size // 2
    g = np.exp(-0.5 * (ax / std) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def validate_kernel(taps) -> np.ndarray:
    taps = np.asarray(taps, dtype=np.float64)
    if taps.ndim == 3 and taps.shape[0] == 1:
        taps = taps[0]
    if taps.ndim != 2 or taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-D with odd dimensions, got {taps.shape}")
    if not np.all(np.isfinite(taps)):
        raise ValueError("kernel has non-finite taps")
    total = taps.sum()
    if total == 0:
        raise ValueError("kernel taps sum to zero")
    if abs(total - 1.0) > 1e-12:
        taps = taps / total
    return taps


def kernel_transfer(taps, height, width) -> np.ndarray:
    """DFT of the kernel centred at pixel (0, 0) and wrapped onto the grid."""
    kh, kw = taps.shape
    rows = (np.arange(kh) - kh // 2) % height
    cols = (np.arange(kw) - kw // 2) % width
    psf = np.zeros((height, width))
    np.add.at(psf, (rows[:, None], cols[None, :]), taps)
    return np.fft.fft2(psf)


@dataclass(frozen=True, eq=False)
class BlurDownsample(ForwardModel):
    """Circular convolution with ``kernel`` then keep every ``factor``-th sample.

    Decimation keeps indices congruent to 0 modulo ``factor`` on both axes.
    ``prox_g`` solves the normal equations by conjugate gradients.
    """

    kernel: np.ndarray
    factor: int
    input_shape: tuple
    cg_tol: float = 1e-8
    cg_max_iter: int = 500
    _transfer: np.ndarray = field(init=False, repr=False)

    kind = "blur-downsample"

    def __post_init__(self):
        shape = _shape3(self.input_shape)
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "kernel", validate_kernel(self.kernel))
        if int(self.factor) < 1:
            raise ValueError("decimation factor must be >= 1")
        object.__setattr__(self, "factor", int(self.factor))
        object.__setattr__(self, "_transfer", kernel_transfer(self.kernel, *shape[1:]))

    @property
    def output_shape(self):
        c, h, w = self.input_shape
        f = self.factor
        return (c, -(-h // f), -(-w // f))

    @property
    def output_size(self):
        return math.prod(self.output_shape)

    @property
    def lipschitz(self):
        _, h, w = self.input_shape
        f = self.factor
        power = np.abs(self._transfer) ** 2
        if h % f == 0 and w % f == 0:
            # S C C^T S^T is circulant on the coarse grid; its symbol is the
            # alias-summed |K|^2 divided by f^2
            aliased = power.reshape(f, h // f, f, w // f).sum(axis=(0, 2)) / f**2
            return float(aliased.max())
        return float(power.max())

    def _blur(self, x, transfer):
        return np.fft.ifft2(np.fft.fft2(x) * transfer).real

    def apply(self, x):
        x = self._check_input(x)
        f = self.factor
        return self._blur(x, self._transfer)[:, ::f, ::f]

    def adjoint(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.output_shape:
            raise ValueError(f"expected measurements of shape {self.output_shape}, got {v.shape}")
        up = np.zeros(self.input_shape)
        up[:, ::self.factor, ::self.factor] = v
        return self._blur(up, np.conj(self._transfer))

    def prox_g(self, z, gamma, y, x0=None, full_output=False):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        z = self._check_input(z)
        b = z + gamma * self.adjoint(y)
        x, info = conjugate_gradient(
            lambda u: self.normal_apply(u, gamma), b, x0=x0,
            tol=self.cg_tol, max_iter=self.cg_max_iter,
        )
        if not info.converged:
            raise ConvergenceError(
                f"CG did not converge in {info.iterations} iterations "
                f"(relative residual {info.residual:.3e})",
                residual=info.residual, iterations=info.iterations,
            )
        return (x, info) if full_output else x


def _shape3(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        shape = (1,) + shape
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"bad image shape {shape}")
    return shape


def model_metadata(model: ForwardModel) -> dict:
    meta = {"kind": model.kind, "input_shape": list(model.input_shape)}
    if isinstance(model, MaskedFourier):
        meta["kept_fraction"] = float(model.mask.mean())
    elif isinstance(model, BlurDownsample):
        meta["factor"] = model.factor
        meta["kernel_shape"] = list(model.kernel.shape)
    return meta
