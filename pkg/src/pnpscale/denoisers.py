"""Denoisers usable as PnP priors, and the scaling wrapper.

A denoiser is any callable mapping a ``(C, H, W)`` array to an array of the
same shape.  The classes here add parameters and picklability on top of that.

Scaling a denoiser ``D`` by ``mu > 0`` gives ``D_mu(z) = D(mu * z) / mu``.
For proximal denoisers of a 1-homogeneous regularizer such as TV this is the
same as dividing the regularization weight by ``mu``.
"""

from __future__ import annotations

import math
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .image import ImageFormatError, as_image, decode_imgf64, encode_imgf64

Denoiser = Callable[[np.ndarray], np.ndarray]


class DenoiserError(RuntimeError):
    pass


# -- total variation --------------------------------------------------------

def _grad(u):
    # forward differences with replicate (Neumann) boundary
    gy = np.zeros_like(u)
    gx = np.zeros_like(u)
    gy[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    gx[..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    return gy, gx


def _div(py, px):
    # negative adjoint of _grad
    d = np.zeros_like(py)
    d[..., :-1, :] += py[..., :-1, :]
    d[..., 1:, :] -= py[..., :-1, :]
    d[..., :, :-1] += px[..., :, :-1]
    d[..., :, 1:] -= px[..., :, :-1]
    return d


def tv_norm(x) -> float:
    """Isotropic TV, summed over pixels and channels."""
    gy, gx = _grad(np.asarray(x, dtype=np.float64))
    return float(np.sqrt(gy**2 + gx**2).sum())


@dataclass
class TVInfo:
    iterations: int
    dual_change: float
    converged: bool


def tv_prox_denoise(z, tau: float, max_inner: int = 200, inner_tol: float = 1e-9,
                    full_output: bool = False):
    """Proximal operator of ``tau * TV`` by fast dual projected gradient.

    Solves ``argmin_x 0.5 ||x - z||^2 + tau * TV(x)`` channel by channel with
    the accelerated dual scheme of Beck and Teboulle (step 1/8).  Iterates stop
    once the relative change of the dual field drops below ``inner_tol``;
    ``inner_tol=0`` runs exactly ``max_inner`` iterations.

    Returns the denoised image, or ``(image, TVInfo)`` with ``full_output``.
    """
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    z = as_image(z)
    if tau == 0:
        out = z.copy()
        return (out, TVInfo(0, 0.0, True)) if full_output else out

    # the dual iteration depends on z only through z / tau
    w = z / tau
    py = np.zeros_like(z)
    px = np.zeros_like(z)
    ry, rx = py, px
    t = 1.0
    change = math.inf
    k = 0
    for k in range(1, max_inner + 1):
        gy, gx = _grad(w - _div(ry, rx))
        qy = ry - gy / 8.0
        qx = rx - gx / 8.0
        scale = np.maximum(1.0, np.sqrt(qy**2 + qx**2))
        qy /= scale
        qx /= scale
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        dy = qy - py
        dx = qx - px
        num = math.sqrt(float(np.vdot(dy, dy) + np.vdot(dx, dx)))
        den = math.sqrt(float(np.vdot(qy, qy) + np.vdot(qx, qx)))
        change = num / den if den > 0 else 0.0
        ry = qy + beta * dy
        rx = qx + beta * dx
        py, px, t = qy, qx, t_next
        if change < inner_tol:
            break
    out = z - tau * _div(py, px)
    if full_output:
        return out, TVInfo(k, change, change < inner_tol)
    return out


@dataclass(frozen=True)
class TVDenoiser:
    """``prox_{tau TV}`` as a denoiser object."""

    tau: float = 1.0
    max_inner: int = 200
    inner_tol: float = 1e-9

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")

    def __call__(self, z):
        return tv_prox_denoise(z, self.tau, self.max_inner, self.inner_tol)


# -- Gaussian mixture MMSE --------------------------------------------------

@dataclass(frozen=True, eq=False)
class GmmPrior:
    """Scalar Gaussian mixture applied i.i.d. per sample."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        m = np.atleast_1d(np.asarray(self.means, dtype=np.float64))
        v = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if not (w.shape == m.shape == v.shape and w.ndim == 1 and w.size > 0):
            raise ValueError("weights, means and variances must be equal-length 1-D")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(v <= 0) or not np.all(np.isfinite(m)):
            raise ValueError("variances must be positive and means finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("weights", "means", "variances")}


def gmm_mmse_denoise(z, prior: GmmPrior, noise_var: float):
    """Posterior mean of ``x`` given ``z = x + n``, ``n ~ N(0, noise_var)``.

    Works elementwise on arrays of any shape.  Responsibilities are normalized
    in the log domain so far-out inputs never underflow.
    """
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    z = np.asarray(z, dtype=np.float64)
    zz = z[..., np.newaxis]
    total_var = prior.variances + noise_var
    log_r = (np.log(np.where(prior.weights > 0, prior.weights, 1.0))
             - 0.5 * np.log(2 * np.pi * total_var)
             - 0.5 * (zz - prior.means) ** 2 / total_var)
    log_r = np.where(prior.weights > 0, log_r, -np.inf)
    log_r -= log_r.max(axis=-1, keepdims=True)
    r = np.exp(log_r)
    r /= r.sum(axis=-1, keepdims=True)
    component_means = (prior.means * noise_var + zz * prior.variances) / total_var
    return (r * component_means).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class GmmDenoiser:
    prior: GmmPrior
    noise_var: float = 1.0

    def __post_init__(self):
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")

    def __call__(self, z):
        return gmm_mmse_denoise(z, self.prior, self.noise_var)


# -- external process -------------------------------------------------------

def external_denoise(command: Sequence[str], z, timeout: float | None = 60.0):
    """Run ``command`` once with ``z`` as IMGF64 on stdin; read IMGF64 from stdout."""
    z = as_image(z)
    try:
        proc = subprocess.run(
            list(command), input=encode_imgf64(z), capture_output=True, timeout=timeout,
        )
    except subprocess.TimeoutExpired as exc:
        raise DenoiserError(f"external denoiser timed out after {timeout}s: {command!r}") from exc
    except OSError as exc:
        raise DenoiserError(f"cannot start external denoiser {command!r}: {exc}") from exc
    stderr = proc.stderr.decode(errors="replace").strip()
    if proc.returncode != 0:
        raise DenoiserError(
            f"external denoiser exited with status {proc.returncode}: {stderr}"
        )
    try:
        out = decode_imgf64(proc.stdout)
    except ImageFormatError as exc:
        raise DenoiserError(f"malformed output from external denoiser: {exc}") from exc
    if out.shape != z.shape:
        raise DenoiserError(f"external denoiser returned shape {out.shape}, expected {z.shape}")
    return out


@dataclass(frozen=True)
class ExternalDenoiser:
    """Stateless subprocess denoiser; one process per call.

    ``sigma`` is not interpreted here; it is only recorded with the run.
    """

    command: tuple
    timeout: float | None = 60.0
    sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))
        if not self.command:
            raise ValueError("empty external denoiser command")

    def __call__(self, z):
        return external_denoise(self.command, z, self.timeout)


# -- scaling ----------------------------------------------------------------

@dataclass(frozen=True)
class ScaledDenoiser:
    """``z -> inner(mu * z) / mu``."""

    inner: Denoiser
    mu: float = field(default=1.0)

    def __post_init__(self):
        if not self.mu > 0 or not math.isfinite(self.mu):
            raise ValueError(f"mu must be positive and finite, got {self.mu}")

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        return self.inner(self.mu * z) / self.mu


def scale_denoiser(inner: Denoiser, mu: float) -> ScaledDenoiser:
    """Wrap ``inner`` as ``D_mu``; nested scalings collapse to the product."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if isinstance(inner, ScaledDenoiser):
        return ScaledDenoiser(inner.inner, inner.mu * mu)
    return ScaledDenoiser(inner, mu)


def describe(denoiser) -> dict:
    """JSON-friendly description used in provenance records."""
    if isinstance(denoiser, ScaledDenoiser):
        return {"kind": "scaled", "mu": denoiser.mu, "inner": describe(denoiser.inner)}
    if isinstance(denoiser, TVDenoiser):
        return {"kind": "tv", "tau": denoiser.tau, "max_inner": denoiser.max_inner,
                "inner_tol": denoiser.inner_tol}
    if isinstance(denoiser, GmmDenoiser):
        return {"kind": "gmm", "noise_var": denoiser.noise_var, "prior": denoiser.prior.to_dict()}
    if isinstance(denoiser, ExternalDenoiser):
        return {"kind": "external", "command": list(denoiser.command),
                "timeout": denoiser.timeout, "sigma": denoiser.sigma}
    return {"kind": "callable", "repr": repr(denoiser)}
