"""Independent reference computations used to check the main code paths.

Nothing here imports the denoiser or solver implementations; the only shared
piece is the :class:`~pnpscale.denoisers.GmmPrior` container.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class QuadratureSpec:
    lo: float
    hi: float
    nodes: int = 4001

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("quadrature range must satisfy hi > lo")
        if self.nodes < 101 or self.nodes % 2 == 0:
            raise ValueError("node count must be odd and >= 101")

    def doubled(self) -> "QuadratureSpec":
        return QuadratureSpec(self.lo, self.hi, 2 * self.nodes - 1)


def simpson(values, h):
    """Composite Simpson rule on an odd number of equispaced samples."""
    values = np.asarray(values)
    n = values.shape[-1]
    if n % 2 == 0 or n < 3:
        raise ValueError("Simpson needs an odd number of nodes >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return (values * w).sum(axis=-1) * h / 3.0


def mixture_log_density(prior, x):
    """Log pdf of a scalar Gaussian mixture, written out independently."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    w = np.asarray(prior.weights)
    m = np.asarray(prior.means)
    v = np.asarray(prior.variances)
    with np.errstate(divide="ignore"):
        terms = np.log(w) - 0.5 * np.log(2 * math.pi * v) - (x - m) ** 2 / (2 * v)
    top = terms.max(axis=-1, keepdims=True)
    return (top + np.log(np.exp(terms - top).sum(axis=-1, keepdims=True)))[..., 0]


def default_quadrature(prior, noise_var, z) -> QuadratureSpec:
    spread = 8.0 * math.sqrt(float(np.max(prior.variances)) + noise_var)
    lo = min(float(np.min(prior.means)), float(np.min(z))) - spread
    hi = max(float(np.max(prior.means)), float(np.max(z))) + spread
    return QuadratureSpec(lo, hi)


def quadrature_mmse(prior, noise_var: float, z, spec: QuadratureSpec | None = None,
                    log_density: Callable | None = None):
    """Posterior mean E[x | z] for ``z = x + n``, ``n ~ N(0, noise_var)``, by quadrature.

    Evaluates the ratio of integrals of ``x * phi(x - z) * p(x)`` and
    ``phi(x - z) * p(x)`` with composite Simpson (error O(h^4)).  The prior is
    given either as a mixture (``prior``) or as a log density callable; the
    latter needs an explicit ``spec``.  ``z`` may be a scalar or a 1-D array.
    """
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    z_arr = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if log_density is None:
        def log_density(x):
            return mixture_log_density(prior, x)
        if spec is None:
            spec = default_quadrature(prior, noise_var, z_arr)
    elif spec is None:
        raise ValueError("a quadrature spec is required with a custom density")
    x = np.linspace(spec.lo, spec.hi, spec.nodes)
    h = (spec.hi - spec.lo) / (spec.nodes - 1)
    log_p = log_density(x)
    # log of phi_nu(x - z) p(x); shift per z before exponentiating
    log_f = log_p[None, :] - (x[None, :] - z_arr[:, None]) ** 2 / (2 * noise_var)
    log_f -= log_f.max(axis=1, keepdims=True)
    f = np.exp(log_f)
    den = simpson(f, h)
    if np.any(den <= 0) or not np.all(np.isfinite(den)):
        raise FloatingPointError("quadrature denominator underflow; check the range")
    out = simpson(f * x[None, :], h) / den
    return float(out[0]) if np.ndim(z) == 0 else out.reshape(np.shape(z))


# -- total variation references ---------------------------------------------

def _fwd_diff(u):
    d0 = np.zeros_like(u)
    d1 = np.zeros_like(u)
    d0[..., :-1, :] = np.diff(u, axis=-2)
    d1[..., :, :-1] = np.diff(u, axis=-1)
    return np.stack([d0, d1])


def _fwd_diff_adjoint(p):
    out = np.zeros_like(p[0])
    out[..., 1:, :] += p[0][..., :-1, :]
    out[..., :-1, :] -= p[0][..., :-1, :]
    out[..., :, 1:] += p[1][..., :, :-1]
    out[..., :, :-1] -= p[1][..., :, :-1]
    return out


def isotropic_tv(x) -> float:
    d = _fwd_diff(np.asarray(x, dtype=np.float64))
    return float(np.sqrt((d**2).sum(axis=0)).sum())


def tv_prox_reference(z, tau: float, tol: float = 1e-12, max_iter: int = 100_000,
                      restart: int = 500):
    """High-precision ``prox_{tau TV}(z)`` by accelerated primal-dual iterations.

    Uses the strongly convex variant of Chambolle-Pock, resetting the step
    sizes every ``restart`` iterations (the accelerated steps otherwise shrink
    until progress stalls), and stops on the relative duality gap.
    Returns ``(x, gap)``.
    """
    z = np.asarray(z, dtype=np.float64)
    if tau == 0:
        return z.copy(), 0.0
    L = math.sqrt(8.0)
    x = z.copy()
    x_bar = x.copy()
    p = np.zeros((2,) + z.shape)
    gap = math.inf
    for it in range(max_iter):
        if it % restart == 0:
            sigma = step = 1.0 / L
            x_bar = x.copy()
        p = p + sigma * _fwd_diff(x_bar)
        p /= np.maximum(1.0, np.sqrt((p**2).sum(axis=0)) / tau)
        x_new = (x - step * _fwd_diff_adjoint(p) + step * z) / (1.0 + step)
        theta = 1.0 / math.sqrt(1.0 + 2.0 * step)
        step *= theta
        sigma /= theta
        x_bar = x_new + theta * (x_new - x)
        x = x_new
        if it % 50 == 0 or it == max_iter - 1:
            # p is feasible (|p_i| <= tau); its dual value is a lower bound
            xp = z - _fwd_diff_adjoint(p)
            primal = 0.5 * float(((xp - z) ** 2).sum()) + tau * isotropic_tv(xp)
            dual = 0.5 * float((z**2).sum()) - 0.5 * float((xp**2).sum())
            gap = (primal - dual) / (1.0 + abs(primal))
            if gap < tol:
                return xp, gap
    return z - _fwd_diff_adjoint(p), gap


def tv_inverse_reference(model, y, lam: float, iters: int = 5000, x0=None):
    """Minimize ``0.5 ||y - Hx||^2 + lam * TV(x)`` with Chambolle-Pock.

    The data term enters through ``model.prox_g`` and TV through its dual, so
    no denoiser from the package is involved.  Returns ``x``.
    """
    x = np.zeros(model.input_shape) if x0 is None else np.array(x0, dtype=np.float64)
    x_bar = x.copy()
    p = np.zeros((2,) + x.shape)
    L = math.sqrt(8.0)
    sigma = step = 0.99 / L
    for _ in range(iters):
        p = p + sigma * _fwd_diff(x_bar)
        p /= np.maximum(1.0, np.sqrt((p**2).sum(axis=0)) / lam)
        x_new = model.prox_g(x - step * _fwd_diff_adjoint(p), step, y)
        x_bar = 2 * x_new - x
        x = x_new
    return x


# -- optimality and gradient checks -----------------------------------------

def prox_optimality_residual(h: Callable, z, x, tau: float, grad_h: Callable | None = None,
                             n_perturb: int = 100, seed: int = 0) -> float:
    """How far ``x`` is from ``prox_{tau h}(z)``.

    With ``grad_h`` (smooth ``h``) this is ``||x - z + tau grad_h(x)|| / (1 + ||z||)``.
    Otherwise ``x`` is compared with random perturbations of decreasing radius
    on the prox objective; the result is the largest relative improvement any
    perturbation achieves (0 when none beats ``x``).
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if grad_h is not None:
        r = x - z + tau * np.asarray(grad_h(x))
        return float(np.linalg.norm(r.ravel()) / (1.0 + np.linalg.norm(z.ravel())))

    def objective(u):
        return 0.5 * float(((u - z) ** 2).sum()) + tau * h(u)

    rng = np.random.default_rng(seed)
    base = objective(x)
    scale = max(1.0, float(np.abs(z).max()))
    radii = scale * np.logspace(-1, -7, n_perturb)
    worst = 0.0
    for i, r in enumerate(radii):
        if i % 2 == 0:
            d = rng.standard_normal(x.shape)
            d *= r / np.linalg.norm(d.ravel())
        else:
            # single-sample perturbations probe the kinks of nonsmooth terms
            d = np.zeros_like(x)
            d.flat[rng.integers(x.size)] = r * rng.choice([-1.0, 1.0])
        worst = max(worst, base - objective(x + d))
    return worst / (1.0 + abs(base))


def fd_gradient_check(f: Callable, point, direction, grad, steps=(1e-4, 1e-5, 1e-6)) -> float:
    """Max relative deviation of central differences from ``<grad, direction>``.

    ``grad`` is either the gradient array at ``point`` or a callable returning it.
    Steps are relative: each is multiplied by ``max(1, |point|_inf / |direction|_inf)``
    so that large-valued images do not drown the difference in rounding error.
    A zero direction returns 0.
    """
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if not np.any(direction):
        return 0.0
    g = grad(point) if callable(grad) else grad
    analytic = float(np.vdot(np.asarray(g), direction).real)
    scale = max(1.0, float(np.abs(point).max() / np.abs(direction).max()))
    worst = 0.0
    for h in steps:
        h = h * scale
        fd = (f(point + h * direction) - f(point - h * direction)) / (2 * h)
        dev = abs(fd - analytic) / max(abs(analytic), np.finfo(float).tiny)
        worst = max(worst, dev)
    return worst
