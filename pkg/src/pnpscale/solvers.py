"""PnP-ADMM, PnP-ISTA/FISTA and the consensus-equilibrium check.

Both solvers take a forward model, measurements ``y`` and a denoiser.  The
denoiser scaling ``mu`` from the config is applied with
:func:`~pnpscale.denoisers.scale_denoiser`; nothing else touches it.
"""

from __future__ import annotations

import csv
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

from .denoisers import scale_denoiser
from .forward import ForwardModel, IdentityModel
from .image import as_image, snr_db

DIVERGENCE_LIMIT = 1e6


class SolverError(RuntimeError):
    """Failure inside a solver run; ``trace`` holds the records up to the failure."""

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.trace = []


class DivergenceError(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Parameters shared by the PnP solvers.

    ``x0`` is ``"zeros"``, ``"adjoint"``, an image array, or ``None`` for the
    default (``y`` for identity models, ``H^T y`` otherwise).  ``schedule`` is
    only read by :func:`pnp_ista`.
    """

    gamma: float = 1.0
    mu: float = 1.0
    max_iters: int = 200
    fp_tol: float = 1e-6
    schedule: str = "fista"
    x0: Any = None
    allow_large_step: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.fp_tol < 0:
            raise ValueError("fp_tol must be >= 0")
        if self.schedule not in ("ista", "fista"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if isinstance(self.x0, str) and self.x0 not in ("zeros", "adjoint"):
            raise ValueError(f"unknown x0 policy {self.x0!r}")


@dataclass
class TraceRecord:
    iteration: int
    rel_change: float
    snr_db: Optional[float]
    elapsed_ms: float


@dataclass
class SolverResult:
    x: np.ndarray
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    s: Optional[np.ndarray] = None
    algorithm: str = ""

    @property
    def rel_changes(self):
        return np.array([r.rel_change for r in self.trace])


@dataclass
class CeReport:
    r_prior: float
    r_fidelity: float
    s_tilde: np.ndarray
    relative: bool = True

    def to_dict(self):
        return {"r_prior": self.r_prior, "r_fidelity": self.r_fidelity, "relative": self.relative}


def fista_q(k: int) -> float:
    """Momentum sequence value ``q_k`` with ``q_0 = 1``."""
    q = 1.0
    for _ in range(k):
        q = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * q * q))
    return q


def initial_image(model: ForwardModel, y, x0=None):
    if x0 is None:
        x0 = "identity" if isinstance(model, IdentityModel) else "adjoint"
    if isinstance(x0, str):
        if x0 == "zeros":
            return np.zeros(model.input_shape)
        if x0 == "identity":
            return np.array(y, dtype=np.float64)
        return model.adjoint(y)
    x0 = as_image(x0, copy=True)
    if x0.shape != model.input_shape:
        raise ValueError(f"x0 has shape {x0.shape}, model expects {model.input_shape}")
    return x0


def _rel_change(new, old):
    num = np.linalg.norm((new - old).ravel())
    den = np.linalg.norm(old.ravel())
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return float(num / den)


class _Tracker:
    def __init__(self, reference):
        self.reference = reference
        self.trace = []
        self.start = time.perf_counter()

    def record(self, k, x, change):
        snr = snr_db(self.reference, x) if self.reference is not None else None
        self.trace.append(TraceRecord(k, change, snr, 1e3 * (time.perf_counter() - self.start)))
        # change is inf only when the previous iterate was exactly zero
        if not np.all(np.isfinite(x)):
            raise DivergenceError("iterate has non-finite samples", k)
        if math.isfinite(change) and change > DIVERGENCE_LIMIT:
            raise DivergenceError(f"relative change {change:.3e} exceeds limit", k)


@contextmanager
def _keep_trace(tracker):
    try:
        yield
    except SolverError as exc:
        exc.trace = tracker.trace
        raise


def _wrap(denoiser, config):
    return denoiser if config.mu == 1 else scale_denoiser(denoiser, config.mu)


def _call(fn, k, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SolverError:
        raise
    except Exception as exc:
        raise SolverError(f"{type(exc).__name__}: {exc}", k) from exc


def pnp_admm(model: ForwardModel, y, denoiser, config: SolverConfig = SolverConfig(),
             reference=None) -> SolverResult:
    """PnP-ADMM.

    For ``k = 1, 2, ...``::

        z = prox_{gamma g}(x + s)
        x = D_mu(z - s)
        s = s + x - z

    with ``s = 0`` initially.  Stops when ``||x_k - x_{k-1}|| / ||x_{k-1}||``
    drops below ``fp_tol`` or after ``max_iters`` iterations.
    """
    denoise = _wrap(denoiser, config)
    x = initial_image(model, y, config.x0)
    s = np.zeros_like(x)
    z = None
    tracker = _Tracker(reference)
    converged = False
    k = 0
    with _keep_trace(tracker):
        for k in range(1, config.max_iters + 1):
            z = _call(model.prox_g, k, x + s, config.gamma, y, x0=z)
            x_new = np.asarray(_call(denoise, k, z - s), dtype=np.float64)
            s = s + (x_new - z)
            change = _rel_change(x_new, x)
            x = x_new
            tracker.record(k, x, change)
            if change < config.fp_tol:
                converged = True
                break
    return SolverResult(x, k, converged, tracker.trace, s, "admm")


def pnp_ista(model: ForwardModel, y, denoiser, config: SolverConfig = SolverConfig(),
             reference=None) -> SolverResult:
    """PnP-ISTA (``schedule="ista"``) or PnP-FISTA (``schedule="fista"``).

    For ``k = 1, 2, ...``::

        z = s - gamma * grad_g(s)
        x = D_mu(z)
        s = x + ((q_{k-1} - 1) / q_k) (x - x_prev)

    where ``q_k = 1`` for ISTA and ``q_k = (1 + sqrt(1 + 4 q_{k-1}^2)) / 2``
    for FISTA, starting from ``q_0 = 1`` and ``s_0 = x_0``.
    """
    if not config.allow_large_step and config.gamma * model.lipschitz > 1.0 + 1e-12:
        raise ValueError(
            f"gamma={config.gamma} exceeds the step bound 1/L = {1.0 / model.lipschitz:.6g}; "
            "set allow_large_step to override"
        )
    denoise = _wrap(denoiser, config)
    x = initial_image(model, y, config.x0)
    s = x.copy()
    q = 1.0
    tracker = _Tracker(reference)
    converged = False
    k = 0
    with _keep_trace(tracker):
        for k in range(1, config.max_iters + 1):
            z = s - config.gamma * _call(model.grad_g, k, s, y)
            x_new = np.asarray(_call(denoise, k, z), dtype=np.float64)
            if config.schedule == "fista":
                q_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * q * q))
            else:
                q_next = 1.0
            s = x_new + ((q - 1.0) / q_next) * (x_new - x)
            q = q_next
            change = _rel_change(x_new, x)
            x = x_new
            tracker.record(k, x, change)
            if change < config.fp_tol:
                converged = True
                break
    return SolverResult(x, k, converged, tracker.trace, s, config.schedule)


def run_solver(algorithm: str, model, y, denoiser, config: SolverConfig, reference=None):
    """Dispatch on ``"admm"``, ``"ista"`` or ``"fista"``."""
    if algorithm == "admm":
        return pnp_admm(model, y, denoiser, config, reference)
    if algorithm in ("ista", "fista"):
        if config.schedule != algorithm:
            config = replace(config, schedule=algorithm)
        return pnp_ista(model, y, denoiser, config, reference)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def verify_ce(model: ForwardModel, y, denoiser, gamma: float, mu: float, x_star) -> CeReport:
    """Residuals of the scaled consensus-equilibrium pair at ``x_star``.

    With ``s = gamma * mu * grad_g(x)`` a fixed point of PnP with the scaled
    denoiser satisfies ``mu x = D(mu x - s)`` and ``x = prox_{gamma g}(x + s / mu)``.
    ``denoiser`` is the unscaled ``D``.  Residuals are relative to ``||mu x||``
    and ``||x||``, or absolute when ``x_star`` is zero.
    """
    x = as_image(x_star)
    s_tilde = gamma * mu * model.grad_g(x, y)
    mx = mu * x
    prior_gap = np.linalg.norm((mx - np.asarray(denoiser(mx - s_tilde))).ravel())
    fid_gap = np.linalg.norm((x - model.prox_g(x + s_tilde / mu, gamma, y)).ravel())
    norm_x = np.linalg.norm(x.ravel())
    if norm_x == 0:
        return CeReport(float(prior_gap), float(fid_gap), s_tilde, relative=False)
    return CeReport(float(prior_gap / (mu * norm_x)), float(fid_gap / norm_x), s_tilde)


def write_trace_csv(result: SolverResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "rel_change", "snr_db", "elapsed_ms"])
        for r in result.trace:
            w.writerow([r.iteration, repr(r.rel_change),
                        "" if r.snr_db is None else repr(r.snr_db), f"{r.elapsed_ms:.3f}"])
