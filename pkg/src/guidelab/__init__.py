"""Desk-scale laboratory for gradient-guided diffusion sampling.

Subpackages and modules:

* ``schedule`` -- discrete noise schedules and their per-step coefficients.
* ``score_models`` -- analytic Gaussian-mixture epsilon predictors, Tweedie
  denoising, and a linear latent codec.
* ``epsnet`` -- a small trainable epsilon-prediction MLP with hand-rolled
  reverse-mode gradients.
* ``guidance`` -- loss functions, a from-scratch Adam, and the guided-update
  strategies (manifold-constrained gradient, epsilon perturbation, inner
  optimization, and the asymmetric hybrid).
* ``sampler`` -- DDIM forward inversion with caching, the guided reverse
  loop, plain DDPM sampling, and the latent-mode wrapper.
* ``metrics`` -- Frechet-distance and feature-distance sample metrics.
* ``harness`` -- experiment configs, the sweep runner, and the CLI.
"""

from guidelab.schedule import NoiseSchedule, make_schedule, sigma_t
from guidelab.score_models import (
    GmmModel,
    GmmScore,
    LatentCodec,
    ZeroScore,
    gmm_eps,
    gmm_eps_vjp,
    tweedie_denoise,
)
from guidelab.epsnet import EpsNet, NetScore, eps_forward, eps_vjp, train_dsm
from guidelab.guidance import (
    GuidanceConfig,
    GuidedUpdate,
    StandInEmbedder,
    adam_minimize,
    agg_update,
    dds_refine,
    loss_grad_wrt_xt,
    perturb_eps,
)
from guidelab.sampler import (
    EditSchedule,
    TrajectoryCache,
    ddim_forward_invert,
    ddpm_sample,
    reverse_step,
    translate,
    translate_latent,
)
from guidelab.metrics import (
    SampleSet,
    classwise_frechet,
    frechet_distance,
    frechet_gaussian,
    structure_distance,
)

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "sigma_t",
    "GmmModel",
    "GmmScore",
    "LatentCodec",
    "ZeroScore",
    "gmm_eps",
    "gmm_eps_vjp",
    "tweedie_denoise",
    "EpsNet",
    "NetScore",
    "eps_forward",
    "eps_vjp",
    "train_dsm",
    "GuidanceConfig",
    "GuidedUpdate",
    "StandInEmbedder",
    "adam_minimize",
    "agg_update",
    "dds_refine",
    "loss_grad_wrt_xt",
    "perturb_eps",
    "EditSchedule",
    "TrajectoryCache",
    "ddim_forward_invert",
    "ddpm_sample",
    "reverse_step",
    "translate",
    "translate_latent",
    "SampleSet",
    "classwise_frechet",
    "frechet_distance",
    "frechet_gaussian",
    "structure_distance",
]

__version__ = "0.1.0"
