"""Image restoration by half-quadratic splitting over a latent diffusion prior.

The package solves linear inverse problems b = A x + noise (denoising,
deblurring, super-resolution) by alternating an exact FFT data subproblem
with a gradient step on the latent input of a conditioned reverse-diffusion
generative map.
"""

from .diffusion import (
    LatentState,
    NoiseSchedule,
    build_schedule,
    ddim_reverse_step,
    ddpm_reverse_step,
    forward_marginal,
    forward_step,
    reverse_diffusion,
    reverse_diffusion_trajectory,
)
from .image import awgn_corrupt, clip01, load_image, make_phantom, psnr, save_image
from .linop import (
    Compose,
    Decimate,
    Identity,
    LinearOperator,
    PeriodicConv,
    default_psf_size,
    gaussian_psf,
    load_kernel,
    save_kernel,
    transfer_function,
)
from .prior import (
    BlockDCTCodec,
    GaussianPriorPredictor,
    IdentityCodec,
    MLPPredictor,
    TrainingDivergedError,
    ZeroPredictor,
    analytic_eps,
    generative_map,
    generative_map_vjp,
    make_denoising_dataset,
    train_predictor,
)
from .prox import (
    CGResult,
    ProxProblem,
    UnsupportedOperatorError,
    optimality_residual,
    prox_cg,
    prox_deblur_fft,
    prox_sr_fft,
)
from .solver import (
    PriorBundle,
    SolverConfig,
    SolverDivergedError,
    SolverTrace,
    TraceRecord,
    grad_step,
    objective,
    penalty_at,
    reld_solve,
    solve_data_subproblem,
    warm_start,
)

__version__ = "0.1.0"
