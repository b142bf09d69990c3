"""Likelihood-score approximations and their adaptive-moment stabilizer.

Two approximations of grad_{x_t} log p(y | x_t) are provided: the DPS form
evaluates the observation loss at the Tweedie estimate and differentiates
through it (here with the exact analytic Jacobian), and the CG form
differentiates the exact time-aware class posterior directly at the noisy
state. Both emit a raw guidance vector g; the adaptive moment estimator
turns a stream of such vectors into a bias-corrected, variance-normalized
update, exactly mirroring the Adam recurrences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError
from .mixtures import ScoreModel
from .operators import GAUSSIAN_NLL, Condition, ObservationModel, loss_and_gradient


@dataclass(frozen=True)
class GuidanceTerm:
    """A guidance vector together with the loss value that produced it."""

    g: np.ndarray
    loss: Union[float, np.ndarray]


@dataclass(frozen=True)
class AdamConfig:
    """Decay rates, stability constant, and guidance strength rho."""

    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8
    rho: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"beta2 must lie in [0, 1), got {self.beta2}")
        if self.delta <= 0.0:
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.rho < 0.0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")


@dataclass(frozen=True)
class NoiseInjectorConfig:
    """Controlled corruption of guidance terms: magnitude zeta, own RNG stream."""

    zeta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.zeta) or self.zeta < 0.0:
            raise ConfigError(f"zeta must be finite and >= 0, got {self.zeta}")


@dataclass(frozen=True)
class MomentState:
    """Adam state: first/second moment EMAs and the step counter k."""

    m: Union[float, np.ndarray] = 0.0
    v: Union[float, np.ndarray] = 0.0
    k: int = 0


def reset_moments() -> MomentState:
    """Fresh state: m = 0, v = 0, k = 0."""
    return MomentState()


def adaptive_moment_estimate(
    g: np.ndarray, state: MomentState, config: AdamConfig
) -> tuple[np.ndarray, MomentState]:
    """One Adam update: EMAs, bias correction, and the stabilized direction.

    k <- k+1;  m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    g_hat = (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + delta)

    Everything is elementwise, so g may carry any shape (including a batch
    of chains); the returned state has matching shape.
    """
    g = np.asarray(g, dtype=float)
    k = state.k + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1**k)
    v_hat = v / (1.0 - config.beta2**k)
    g_hat = m_hat / (np.sqrt(v_hat) + config.delta)
    return g_hat, MomentState(m=m, v=v, k=k)


def inject_noise(term: GuidanceTerm, zeta: float, eps: np.ndarray) -> GuidanceTerm:
    """Perturb g by zeta * |g| * eps / sqrt(d): RMS-calibrated Gaussian noise.

    ``eps`` is the caller's standard-normal draw, so the result is a pure
    function of its inputs. The loss value is untouched. With zeta = 0 the
    term is returned unchanged.
    """
    if zeta < 0.0:
        raise ConfigError(f"zeta must be >= 0, got {zeta}")
    if zeta == 0.0:
        return term
    g = np.asarray(term.g, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != g.shape:
        raise ConfigError(f"eps shape {eps.shape} must match g shape {g.shape}")
    d = g.shape[-1]
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return GuidanceTerm(g=g + zeta * norm * eps / np.sqrt(d), loss=term.loss)


def dps_likelihood_score(
    model: ScoreModel,
    observation: "ObservationModel | None",
    cond: Condition,
    x_t: np.ndarray,
    t: int,
    frozen_jacobian: bool = False,
) -> GuidanceTerm:
    """DPS approximation: g = -d/dx_t L(f(x_{0|t}), y), via the exact chain rule.

    For measurement conditions the loss is the Gaussian NLL of y at the
    Tweedie estimate; for class conditions it is the cross entropy of the
    clean-data class posterior. The Tweedie Jacobian carries the gradient
    back to x_t; ``frozen_jacobian`` replaces it with the identity (the
    common large-scale shortcut) for ablations.
    """
    x0 = model.tweedie_denoise(x_t, t)
    if cond.is_class:
        logp, grad_logp = model.at_sigma(0.0).class_log_prob_and_grad(x0, cond.class_index)
        loss, grad0 = -logp, -grad_logp
    else:
        if observation is None or observation.loss_kind != GAUSSIAN_NLL:
            raise ConfigError("measurement conditions need a gaussian-nll observation model")
        loss, grad0 = loss_and_gradient(observation, x0, cond)
    if frozen_jacobian:
        g = -grad0
    else:
        J = model.tweedie_jacobian(x_t, t)
        if grad0.ndim == 1:
            g = -J.T @ grad0
        else:
            g = -np.einsum("nji,nj->ni", J, grad0)
    return GuidanceTerm(g=g, loss=loss)


def cg_likelihood_score(model: ScoreModel, label: int, x_t: np.ndarray, t: int) -> GuidanceTerm:
    """CG term: gradient of the exact time-aware class log posterior at x_t."""
    if model.prior.num_components < 2:
        raise ValueError("classifier guidance needs a multi-component prior")
    logp, grad = model.noised(t).class_log_prob_and_grad(x_t, label)
    return GuidanceTerm(g=grad, loss=-logp)
