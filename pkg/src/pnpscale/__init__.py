"""Plug-and-play image reconstruction with denoiser scaling."""

__version__ = "0.1.0"

from .denoisers import (
    ExternalDenoiser, GmmDenoiser, GmmPrior, ScaledDenoiser, TVDenoiser, external_denoise,
    gmm_mmse_denoise, scale_denoiser, tv_prox_denoise,
)
from .forward import BlurDownsample, IdentityModel, MaskedFourier, gaussian_kernel, radial_mask
from .image import (
    NoiseSpec, add_awgn, read_imgf64, read_pgm, sigma_for_input_snr, snr_db, write_imgf64,
    write_pgm,
)
from .solvers import SolverConfig, SolverResult, pnp_admm, pnp_ista, verify_ce
from .tuning import SweepSpec, equivalence_tv, simulate_problem, sweep

__all__ = [
    "BlurDownsample", "ExternalDenoiser", "GmmDenoiser", "GmmPrior", "IdentityModel",
    "MaskedFourier", "NoiseSpec", "ScaledDenoiser", "SolverConfig", "SolverResult", "SweepSpec",
    "TVDenoiser", "add_awgn", "equivalence_tv", "external_denoise", "gaussian_kernel",
    "gmm_mmse_denoise", "pnp_admm", "pnp_ista", "radial_mask", "read_imgf64", "read_pgm",
    "scale_denoiser", "sigma_for_input_snr", "simulate_problem", "snr_db", "sweep",
    "tv_prox_denoise", "verify_ce", "write_imgf64", "write_pgm",
]
