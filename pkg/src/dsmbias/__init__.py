"""Numerical checks that denoising score matching is biased toward high score
norm once anything other than the score network's own parameters is optimised.
"""
from dsmbias.analytic import (
    DiagGaussian,
    GaussianMixture,
    NoiseSchedule,
    NoisyEncoderModel,
    c2_closed_form,
    c3_closed_form,
    conditional_score,
    marginal_log_density,
    marginal_score,
    perturb,
    posterior_moments,
    quadrature_expectation,
)
from dsmbias.errors import DivergenceError, InvalidArgument, Unsupported
from dsmbias.kernels import BACKEND

__version__ = "0.1.0"
