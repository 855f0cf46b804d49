"""Problem simulation and grid sweeps over mu, lambda or gamma."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .denoisers import TVDenoiser, scale_denoiser, tv_prox_denoise
from .image import add_awgn, sigma_for_input_snr, snr_db
from .solvers import SolverConfig, run_solver

#: default mu grid: 40 log-spaced points in [10^-1.5, 10^0.5]
DEFAULT_MU_GRID = tuple(np.logspace(-1.5, 0.5, 40))


def simulate_problem(truth, model, input_snr: float, seed: int = 0):
    """Noisy measurements ``y = H truth + e`` at the requested input SNR.

    The noise level is set from ``||H truth||`` so that ``snr_db(H truth, y)``
    matches ``input_snr`` in expectation.  Returns ``(y, sigma)``.
    """
    clean = model.apply(truth)
    if not np.any(clean):
        raise ValueError("noiseless measurements are all zero")
    sigma = sigma_for_input_snr(clean, input_snr)
    return add_awgn(clean, sigma, seed), sigma


def log_grid(lo: float, hi: float, count: int) -> list[float]:
    """``count`` log-spaced values from ``lo`` to ``hi`` inclusive."""
    if count < 1 or not (0 < lo <= hi):
        raise ValueError("log grid needs 0 < lo <= hi and count >= 1")
    if count == 1:
        return [float(lo)]
    return [float(v) for v in np.logspace(math.log10(lo), math.log10(hi), count)]


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    grid: tuple
    config: SolverConfig = SolverConfig()
    algorithm: str = "fista"

    def __post_init__(self):
        if self.parameter not in ("mu", "lambda", "gamma"):
            raise ValueError(f"cannot sweep {self.parameter!r}")
        grid = tuple(float(v) for v in self.grid)
        if not grid:
            raise ValueError("sweep grid is empty")
        if any(not (v > 0 and math.isfinite(v)) for v in grid):
            raise ValueError("sweep grid values must be positive and finite")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("sweep grid must be sorted ascending without repeats")
        object.__setattr__(self, "grid", grid)


@dataclass
class SweepPoint:
    value: float
    snr_db: float
    iterations: int
    converged: bool
    error: Optional[str] = None


@dataclass
class SweepCurve:
    parameter: str
    points: list
    best: Optional[int]
    best_image: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def best_point(self) -> Optional[SweepPoint]:
        return None if self.best is None else self.points[self.best]

    @property
    def values(self):
        return np.array([p.value for p in self.points])

    @property
    def snrs(self):
        return np.array([p.snr_db for p in self.points])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "snr_db", "iters", "converged"])
            for p in self.points:
                w.writerow([repr(p.value), repr(p.snr_db), p.iterations, int(p.converged)])


def best_index(points: Sequence[SweepPoint]) -> Optional[int]:
    """Argmax SNR over converged points; ties go to the smaller parameter.

    Falls back to all finite points when none converged.
    """
    for pool in (lambda p: p.converged, lambda p: True):
        cand = [i for i, p in enumerate(points) if pool(p) and math.isfinite(p.snr_db)]
        if cand:
            return max(cand, key=lambda i: (points[i].snr_db, -points[i].value))
    return None


def point_setup(parameter, value, denoiser, config: SolverConfig):
    """Denoiser and config for one grid point."""
    if parameter == "mu":
        return denoiser, replace(config, mu=value)
    if parameter == "gamma":
        return denoiser, replace(config, gamma=value)
    if not isinstance(denoiser, TVDenoiser):
        raise ValueError("a lambda sweep needs a TV denoiser (tau = gamma * lambda)")
    return replace(denoiser, tau=config.gamma * value), config


def _run_point(args):
    model, y, truth, denoiser, parameter, value, config, algorithm = args
    try:
        d, cfg = point_setup(parameter, value, denoiser, config)
        res = run_solver(algorithm, model, y, d, cfg)
    except Exception as exc:  # recorded per point; the sweep carries on
        return SweepPoint(value, math.nan, 0, False, f"{type(exc).__name__}: {exc}"), None
    return SweepPoint(value, snr_db(truth, res.x), res.iterations, res.converged), res.x


def sweep(model, y, truth, denoiser, spec: SweepSpec, jobs: int = 1) -> SweepCurve:
    """Run the solver once per grid value and score the final iterate by SNR.

    Points are independent; with ``jobs > 1`` they run in worker processes and
    results are still ordered by grid index.
    """
    tasks = [(model, y, truth, denoiser, spec.parameter, v, spec.config, spec.algorithm)
             for v in spec.grid]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            outputs = list(pool.map(_run_point, tasks))
    else:
        outputs = [_run_point(t) for t in tasks]
    points = [p for p, _ in outputs]
    best = best_index(points)
    return SweepCurve(spec.parameter, points, best, None if best is None else outputs[best][1])


@dataclass
class EquivalenceRow:
    lam: float
    mu: float
    image_discrepancy: float
    snr_direct: float
    snr_scaled: float


@dataclass
class EquivalenceReport:
    rows: list

    @property
    def max_image_discrepancy(self) -> float:
        return max(r.image_discrepancy for r in self.rows)

    @property
    def max_snr_discrepancy(self) -> float:
        return max(abs(r.snr_direct - r.snr_scaled) for r in self.rows)


def equivalence_tv(truth, noisy, lambda_grid, mu_grid=None, gamma: float = 1.0,
                   max_inner: int = 200, inner_tol: float = 1e-9) -> EquivalenceReport:
    """Compare TV with weight ``lambda`` against TV with weight 1 scaled by ``1/lambda``.

    For each pair this runs ``tv_prox(tau = lambda * gamma)`` directly and the
    scaled denoiser built on ``tv_prox(tau = gamma)`` with ``mu = 1/lambda``.
    """
    lambda_grid = [float(v) for v in lambda_grid]
    if mu_grid is None:
        mu_grid = [1.0 / v for v in lambda_grid]
    mu_grid = [float(v) for v in mu_grid]
    if len(mu_grid) != len(lambda_grid) or any(
        not math.isclose(m * lam, 1.0, rel_tol=1e-12) for m, lam in zip(mu_grid, lambda_grid)
    ):
        raise ValueError("mu_grid must hold 1/lambda for each lambda")
    noisy = np.asarray(noisy, dtype=np.float64)
    base = TVDenoiser(gamma, max_inner, inner_tol)
    rows = []
    for lam, mu in zip(lambda_grid, mu_grid):
        direct = tv_prox_denoise(noisy, lam * gamma, max_inner, inner_tol)
        scaled = base(noisy) if mu == 1.0 else scale_denoiser(base, mu)(noisy)
        disc = float(np.linalg.norm((direct - scaled).ravel()) / np.linalg.norm(direct.ravel()))
        rows.append(EquivalenceRow(lam, mu, disc, snr_db(truth, direct), snr_db(truth, scaled)))
    return EquivalenceReport(rows)
