import csv
import math

import numpy as np
import pytest

from pnpscale.denoisers import TVDenoiser, scale_denoiser, tv_norm
from pnpscale.forward import IdentityModel, MaskedFourier, radial_mask
from pnpscale.image import snr_db
from pnpscale.oracles import tv_inverse_reference, tv_prox_reference
from pnpscale.solvers import (
    DivergenceError, SolverConfig, SolverError, fista_q, pnp_admm, pnp_ista, run_solver,
    verify_ce, write_trace_csv,
)
from pnpscale.tuning import simulate_problem

ALGORITHMS = ["admm", "ista", "fista"]


@pytest.fixture(scope="module")
def fourier_problem():
    from conftest import camera_crop
    truth = camera_crop(200, 220, 32)
    model = MaskedFourier(radial_mask(32, 32, 1 / 3))
    y, _ = simulate_problem(truth, model, 30.0, seed=1)
    return truth, model, y


def test_q_sequence():
    assert fista_q(0) == 1.0
    assert abs(fista_q(1) - (1 + math.sqrt(5)) / 2) <= 1e-12
    # 1 + 4 q1^2 = 7 + 2 sqrt(5)
    assert abs(fista_q(2) - (1 + math.sqrt(7 + 2 * math.sqrt(5))) / 2) <= 1e-12


@pytest.mark.parametrize("algorithm", ALGORITHMS)
@pytest.mark.parametrize("kind", ["identity", "fourier"])
def test_identity_denoiser_keeps_consistent_truth(algorithm, kind, rng):
    x_bar = rng.uniform(0, 255, (1, 24, 24))
    model = IdentityModel(x_bar.shape) if kind == "identity" else MaskedFourier(radial_mask(24, 24, 0.4))
    y = model.apply(x_bar)
    res = run_solver(algorithm, model, y, lambda z: np.array(z),
                     SolverConfig(max_iters=10, fp_tol=0, x0=x_bar))
    assert np.linalg.norm(res.x - x_bar) <= 1e-12 * np.linalg.norm(x_bar)


@pytest.fixture(scope="module")
def tv_denoise_problem():
    from conftest import camera_crop
    truth = camera_crop(200, 220, 32)
    y = truth + 10 * np.random.default_rng(5).standard_normal(truth.shape)
    lam = 12.0
    ref, _ = tv_prox_reference(y, lam, tol=1e-14)
    return y, lam, ref


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_identity_model_tv_matches_explicit_minimizer(algorithm, tv_denoise_problem):
    y, lam, ref = tv_denoise_problem
    gamma = 1.0
    res = run_solver(algorithm, IdentityModel(y.shape), y, TVDenoiser(gamma * lam, 2000, 1e-12),
                     SolverConfig(gamma=gamma, max_iters=500, fp_tol=1e-10))
    assert np.linalg.norm(res.x - ref) <= 1e-5 * np.linalg.norm(ref)


def test_fourier_tv_matches_explicit_minimizer(fourier_problem):
    truth, model, y = fourier_problem
    lam = 4.0
    ref = tv_inverse_reference(model, y, lam, iters=20000)
    res = pnp_admm(model, y, TVDenoiser(lam, 1000, 1e-12), SolverConfig(max_iters=2000, fp_tol=1e-10))
    assert res.converged
    assert np.linalg.norm(res.x - ref) <= 1e-5 * np.linalg.norm(ref)


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_trace_invariants(algorithm, fourier_problem):
    truth, model, y = fourier_problem
    res = run_solver(algorithm, model, y, TVDenoiser(5.0, 30, 0.0),
                     SolverConfig(max_iters=40, fp_tol=1e-4), reference=truth)
    assert len(res.trace) == res.iterations
    assert [r.iteration for r in res.trace] == list(range(1, res.iterations + 1))
    assert all(r.rel_change >= 0 for r in res.trace)
    assert res.trace[-1].snr_db == pytest.approx(snr_db(truth, res.x))


def test_nonconvergence_reported(fourier_problem):
    truth, model, y = fourier_problem
    res = pnp_ista(model, y, TVDenoiser(5.0, 30, 0.0), SolverConfig(max_iters=3, fp_tol=1e-12))
    assert not res.converged and res.iterations == 3


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_mu_config_equals_prewrapped(algorithm, fourier_problem):
    truth, model, y = fourier_problem
    d = TVDenoiser(5.0, 40, 0.0)
    a = run_solver(algorithm, model, y, d, SolverConfig(mu=0.4, max_iters=25, fp_tol=0))
    b = run_solver(algorithm, model, y, scale_denoiser(d, 0.4), SolverConfig(max_iters=25, fp_tol=0))
    assert a.x.tobytes() == b.x.tobytes()
    assert [r.rel_change for r in a.trace] == [r.rel_change for r in b.trace]


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_deterministic(algorithm, fourier_problem):
    truth, model, y = fourier_problem
    runs = [run_solver(algorithm, model, y, TVDenoiser(5.0), SolverConfig(max_iters=15),
                       reference=truth) for _ in range(2)]
    assert runs[0].x.tobytes() == runs[1].x.tobytes()
    assert ([(r.rel_change, r.snr_db) for r in runs[0].trace]
            == [(r.rel_change, r.snr_db) for r in runs[1].trace])


def test_fista_reaches_objective_tolerance_first():
    from conftest import camera_crop
    truth = camera_crop(200, 220, 24)
    model = MaskedFourier(radial_mask(24, 24, 1 / 3))
    y, _ = simulate_problem(truth, model, 30.0, seed=1)
    lam = 3.0
    d = TVDenoiser(lam, 1000, 1e-12)
    objective = lambda x: model.g(x, y) + lam * tv_norm(x)
    f_star = objective(tv_inverse_reference(model, y, lam, iters=20000))

    def iterations_to_tol(schedule):
        values = []

        def recording(z):
            x = d(z)
            values.append(objective(x))
            return x
        pnp_ista(model, y, recording, SolverConfig(max_iters=80, fp_tol=0, schedule=schedule))
        return next(k + 1 for k, v in enumerate(values) if v <= f_star * (1 + 1e-6))

    assert iterations_to_tol("fista") <= iterations_to_tol("ista")


def test_step_bound_enforced(fourier_problem):
    truth, model, y = fourier_problem
    with pytest.raises(ValueError, match="step bound"):
        pnp_ista(model, y, TVDenoiser(1.0), SolverConfig(gamma=1.5))
    pnp_ista(model, y, TVDenoiser(1.0), SolverConfig(gamma=1.5, max_iters=2, allow_large_step=True))


def test_divergence_aborts_with_trace(fourier_problem):
    truth, model, y = fourier_problem
    with pytest.raises(DivergenceError) as err:
        pnp_ista(model, y, lambda z: 1e7 * z, SolverConfig(max_iters=50))
    assert err.value.iteration == len(err.value.trace) >= 1


def test_denoiser_failure_wrapped(fourier_problem):
    truth, model, y = fourier_problem
    calls = []

    def flaky(z):
        calls.append(1)
        if len(calls) == 3:
            raise RuntimeError("device lost")
        return z
    with pytest.raises(SolverError, match="iteration 3: RuntimeError: device lost") as err:
        pnp_admm(model, y, flaky, SolverConfig(max_iters=10, fp_tol=0))
    assert len(err.value.trace) == 2


def test_x0_policies(fourier_problem, rng):
    truth, model, y = fourier_problem
    with pytest.raises(ValueError):
        SolverConfig(x0="random")
    with pytest.raises(ValueError):
        pnp_admm(model, y, TVDenoiser(1.0), SolverConfig(x0=np.zeros((1, 3, 3))))
    res = pnp_ista(model, y, lambda z: z, SolverConfig(x0="zeros", max_iters=1))
    # from zero, one gradient step with gamma 1 gives the adjoint
    assert np.allclose(res.x, model.adjoint(y), atol=1e-12)


def test_write_trace_csv(tmp_path, fourier_problem):
    truth, model, y = fourier_problem
    res = pnp_ista(model, y, TVDenoiser(5.0), SolverConfig(max_iters=5))
    write_trace_csv(res, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iter", "rel_change", "snr_db", "elapsed_ms"]
    assert len(rows) == 6 and rows[1][2] == ""
    assert float(rows[2][1]) == res.trace[1].rel_change


# -- consensus equilibrium --------------------------------------------------

@pytest.mark.parametrize("alpha,gamma", [(0.5, 1.0), (0.9, 0.3), (0.2, 2.0)])
@pytest.mark.parametrize("mu", [0.5, 1.0, 2.0])
def test_ce_scalar_linear_fixed_point(alpha, gamma, mu, rng):
    y = rng.uniform(0, 255, (1, 8, 8))
    x_star = alpha * gamma * y / (1 - alpha + alpha * gamma)
    model = IdentityModel(y.shape)
    # a linear denoiser is unaffected by scaling, so x_star is a fixed point for any mu
    rep = verify_ce(model, y, lambda z: alpha * z, gamma, mu, x_star)
    assert rep.r_prior <= 1e-10 and rep.r_fidelity <= 1e-10


def test_ce_detects_non_fixed_point(rng):
    y = rng.uniform(0, 255, (1, 8, 8))
    rep = verify_ce(IdentityModel(y.shape), y, lambda z: 0.5 * z, 1.0, 1.0, y)
    assert rep.r_prior > 0.1


@pytest.mark.parametrize("algorithm", ["admm", "ista"])
def test_ce_after_converged_run(algorithm, fourier_problem):
    truth, model, y = fourier_problem
    d = TVDenoiser(5.0, 50, 0.0)
    cfg = SolverConfig(max_iters=3000, fp_tol=1e-8)
    res = run_solver(algorithm, model, y, d, cfg)
    assert res.converged
    rep = verify_ce(model, y, d, cfg.gamma, cfg.mu, res.x)
    assert rep.r_prior <= 10 * cfg.fp_tol and rep.r_fidelity <= 10 * cfg.fp_tol
