"""Reverse-diffusion samplers: unconditional, guided, and moment-stabilized.

One vectorized engine drives every mode. Per transition t -> s it computes
the Tweedie estimate, evaluates the configured guidance term, optionally
corrupts it (zeta-noise) and stabilizes it (adaptive moments), then applies
the mode's update rule:

  dps / adam-dps   x_s = Sample(x0, x_t, t, s) + rho * g        (post-draw add)
  cg  / adam-cg    x_s = Sample(x0 + rho * g * sigma_t^2, ...)  (clean-shift)
  exact            like cg but with the exact likelihood score; rho = 1
                   makes the chain the true posterior-score sampler

where Sample draws the ancestral transition (or the deterministic DDIM map)
around the posterior mean. The clean-shift and post-draw conventions are
deliberately different; they mirror the two classical algorithms.

RNG contract: chain i consumes exactly one (L, d) standard-normal slab from
``default_rng(seed + i)`` (row 0 scaled to sigma_T initializes, row j drives
transition j); guidance noise draws come from an independent stream keyed by
(injector.seed, seed + i). Guided runs with rho = 0 therefore reproduce the
unconditional chain exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteSampleError
from .guidance import (
    AdamConfig,
    GuidanceTerm,
    NoiseInjectorConfig,
    adaptive_moment_estimate,
    inject_noise,
    reset_moments,
)
from .mixtures import ScoreModel, exact_likelihood_score
from .operators import GAUSSIAN_NLL, Condition, ObservationModel, loss_and_gradient
from .schedule import TimestepGrid

DDPM = "ddpm-ancestral"
DDIM = "ddim-deterministic"
STEP_RULES = (DDPM, DDIM)

MODE_NONE = "none"
MODE_DPS = "dps"
MODE_ADAM_DPS = "adam-dps"
MODE_CG = "cg"
MODE_ADAM_CG = "adam-cg"
MODE_EXACT = "exact"
GUIDANCE_MODES = (MODE_NONE, MODE_DPS, MODE_ADAM_DPS, MODE_CG, MODE_ADAM_CG, MODE_EXACT)

RHO_CONSTANT = "constant"
RHO_SNR = "snr-scaled"
RHO_SCHEDULES = (RHO_CONSTANT, RHO_SNR)


@dataclass(frozen=True)
class SamplerConfig:
    grid: TimestepGrid
    step_rule: str = DDPM
    guidance_mode: str = MODE_NONE
    adam: AdamConfig = field(default_factory=AdamConfig)
    injector: NoiseInjectorConfig = field(default_factory=NoiseInjectorConfig)
    seed: int = 0
    rho_schedule: str = RHO_CONSTANT
    frozen_jacobian: bool = False

    def __post_init__(self):
        if self.step_rule not in STEP_RULES:
            raise ConfigError(f"step_rule: unknown {self.step_rule!r}, expected one of {STEP_RULES}")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ConfigError(
                f"guidance_mode: unknown {self.guidance_mode!r}, expected one of {GUIDANCE_MODES}"
            )
        if self.rho_schedule not in RHO_SCHEDULES:
            raise ConfigError(f"rho_schedule: unknown {self.rho_schedule!r}")


@dataclass(frozen=True)
class Trajectory:
    """Per-chain record: one row per grid timestep, final state in the last row.

    ``gs`` holds the raw (possibly noise-injected) guidance term, ``g_hats``
    the direction the update actually used (Adam output for adam modes, the
    raw term otherwise); both are zero in the terminal row and in
    unconditional runs. ``ks`` tracks the moment-step counter.
    """

    chain: int
    guidance_mode: str
    steps: np.ndarray
    sigmas: np.ndarray
    xs: np.ndarray
    x0s: np.ndarray
    gs: np.ndarray
    g_hats: np.ndarray
    losses: np.ndarray
    ks: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.xs[-1]

    def __len__(self) -> int:
        return self.steps.size


# ---------------------------------------------------------------------------
# single-step rules
# ---------------------------------------------------------------------------


def _posterior_mean(x0_arg, X, sig_t, sig_s):
    return x0_arg + (sig_s / sig_t) ** 2 * (X - x0_arg)


def _ancestral(x0_arg, X, sig_t, sig_s, eps):
    mean = _posterior_mean(x0_arg, X, sig_t, sig_s)
    std = sig_s * np.sqrt(sig_t**2 - sig_s**2) / sig_t
    return mean + std * eps


def _ddim(x0_arg, X, sig_t, sig_s):
    return x0_arg + (sig_s / sig_t) * (X - x0_arg)


def ancestral_step(model: ScoreModel, x_t: np.ndarray, t: int, s: int, eps: np.ndarray) -> np.ndarray:
    """One stochastic reverse step t -> s; ``eps`` is the caller's N(0, I) draw.

    The mean equals the annealed-Langevin drift x_t + (sigma_t^2 - sigma_s^2)
    * score(x_t) rewritten through the Tweedie estimate; a zero draw returns
    exactly that posterior mean.
    """
    if s >= t:
        raise ValueError(f"reverse step requires s < t, got s={s}, t={t}")
    x0 = model.tweedie_denoise(x_t, t)
    return _ancestral(x0, np.asarray(x_t, dtype=float), model.sigma(t), model.sigma(s), np.asarray(eps, dtype=float))


def ddim_step(model: ScoreModel, x_t: np.ndarray, t: int, s: int) -> np.ndarray:
    """Deterministic reverse step: x_s = x0 + (sigma_s / sigma_t)(x_t - x0)."""
    if s >= t:
        raise ValueError(f"reverse step requires s < t, got s={s}, t={t}")
    x0 = model.tweedie_denoise(x_t, t)
    return _ddim(x0, np.asarray(x_t, dtype=float), model.sigma(t), model.sigma(s))


# ---------------------------------------------------------------------------
# guidance plumbing
# ---------------------------------------------------------------------------


def _validate_task(model: ScoreModel, config: SamplerConfig, observation, cond) -> None:
    mode = config.guidance_mode
    if mode == MODE_NONE:
        return
    if cond is None:
        raise ConfigError(f"guidance_mode {mode!r} needs a condition")
    if cond.is_class:
        if model.prior.num_components < 2:
            raise ValueError("class conditions need a multi-component prior")
        if not 0 <= cond.class_index < model.prior.num_components:
            raise ConfigError(
                f"class_index {cond.class_index} outside 0..{model.prior.num_components - 1}"
            )
    else:
        if mode in (MODE_CG, MODE_ADAM_CG):
            raise ConfigError("classifier guidance needs a class condition")
        if observation is None or observation.loss_kind != GAUSSIAN_NLL:
            raise ConfigError("measurement conditions need a gaussian-nll observation model")


def _dps_raw_term(model, observation, cond, X, x0, t, frozen_jacobian):
    # same chain rule as guidance.dps_likelihood_score, reusing the x0 batch
    if cond.is_class:
        logp, grad_logp = model.at_sigma(0.0).class_log_prob_and_grad(x0, cond.class_index)
        loss, grad0 = -logp, -grad_logp
    else:
        loss, grad0 = loss_and_gradient(observation, x0, cond)
    if frozen_jacobian:
        g = -grad0
    else:
        J = model.tweedie_jacobian(X, t)
        g = -np.einsum("nji,nj->ni", J, grad0)
    return GuidanceTerm(g=g, loss=loss)


def _exact_raw_term(model, observation, cond, X, x0, t):
    if cond.is_class:
        logp, grad = model.noised(t).class_log_prob_and_grad(X, cond.class_index)
        return GuidanceTerm(g=grad, loss=-logp)
    g = exact_likelihood_score(model, observation, cond, X, t, method="closed-form")
    loss, _ = loss_and_gradient(observation, x0, cond)  # diagnostic loss, DPS convention
    return GuidanceTerm(g=g, loss=loss)


def _cg_raw_term(model, cond, X, t):
    logp, grad = model.noised(t).class_log_prob_and_grad(X, cond.class_index)
    return GuidanceTerm(g=grad, loss=-logp)


def _terminal_loss(model, config, observation, cond, X, x0, t):
    mode = config.guidance_mode
    n = X.shape[0]
    if mode == MODE_NONE or cond is None:
        return np.zeros(n)
    if mode in (MODE_CG, MODE_ADAM_CG):
        logp, _ = model.noised(t).class_log_prob_and_grad(X, cond.class_index)
        return -np.atleast_1d(logp)
    if cond.is_class:
        logp, _ = model.at_sigma(0.0).class_log_prob_and_grad(x0, cond.class_index)
        return -np.atleast_1d(logp)
    loss, _ = loss_and_gradient(observation, x0, cond)
    return np.atleast_1d(loss)


# ---------------------------------------------------------------------------
# the chain engine
# ---------------------------------------------------------------------------


def _chain_noise(config: SamplerConfig, n_chains: int, L: int, d: int) -> np.ndarray:
    noise = np.empty((n_chains, L, d))
    for i in range(n_chains):
        noise[i] = np.random.default_rng(config.seed + i).standard_normal((L, d))
    return noise


def _injection_noise(config: SamplerConfig, n_chains: int, L: int, d: int) -> np.ndarray:
    inj = np.empty((n_chains, L - 1, d))
    for i in range(n_chains):
        rng = np.random.default_rng([config.injector.seed, config.seed + i])
        inj[i] = rng.standard_normal((L - 1, d))
    return inj


def _run_chains(
    model: ScoreModel,
    config: SamplerConfig,
    n_chains: int,
    observation: "ObservationModel | None" = None,
    cond: "Condition | None" = None,
    record: bool = True,
):
    if n_chains < 1:
        raise ConfigError(f"n_chains must be >= 1, got {n_chains}")
    _validate_task(model, config, observation, cond)
    grid = config.grid
    grid.validate_for(model.schedule)
    steps = grid.steps
    L = len(steps)
    d = model.prior.dimension
    sig = model.schedule.sigmas[steps]
    mode = config.guidance_mode
    guided = mode != MODE_NONE
    adam = mode in (MODE_ADAM_DPS, MODE_ADAM_CG)
    rho = config.adam.rho
    zeta = config.injector.zeta if guided else 0.0

    noise = _chain_noise(config, n_chains, L, d)
    inj = _injection_noise(config, n_chains, L, d) if zeta > 0.0 else None

    X = sig[0] * noise[:, 0, :]
    state = reset_moments()
    zeros = np.zeros((n_chains, d))

    if record:
        XS = np.empty((L, n_chains, d))
        X0S = np.empty((L, n_chains, d))
        GS = np.zeros((L, n_chains, d))
        GHATS = np.zeros((L, n_chains, d))
        LOSSES = np.zeros((L, n_chains))
        KS = np.zeros(L, dtype=int)

    for j in range(L - 1):
        t = int(steps[j])
        s = int(steps[j + 1])
        sig_t, sig_s = sig[j], sig[j + 1]
        x0 = model.tweedie_denoise(X, t)

        g = g_hat = zeros
        loss = np.zeros(n_chains)
        if guided:
            if mode in (MODE_DPS, MODE_ADAM_DPS):
                term = _dps_raw_term(model, observation, cond, X, x0, t, config.frozen_jacobian)
            elif mode in (MODE_CG, MODE_ADAM_CG):
                term = _cg_raw_term(model, cond, X, t)
            else:
                term = _exact_raw_term(model, observation, cond, X, x0, t)
            if zeta > 0.0:
                term = inject_noise(term, zeta, inj[:, j, :])
            g, loss = term.g, np.atleast_1d(term.loss)
            if adam:
                g_hat, state = adaptive_moment_estimate(g, state, config.adam)
            else:
                g_hat = g

        if mode in (MODE_CG, MODE_ADAM_CG, MODE_EXACT):
            # clean-shift convention; rho = 1 makes the exact mode the true
            # posterior-score sampler
            x0_arg = x0 + rho * g_hat * sig_t**2
        else:
            x0_arg = x0

        if config.step_rule == DDPM:
            x_next = _ancestral(x0_arg, X, sig_t, sig_s, noise[:, j + 1, :])
        else:
            x_next = _ddim(x0_arg, X, sig_t, sig_s)

        if mode in (MODE_DPS, MODE_ADAM_DPS):
            scale = rho if config.rho_schedule == RHO_CONSTANT else rho * (sig_t**2 - sig_s**2) / sig_t**2
            x_next = x_next + scale * g_hat

        bad = ~np.isfinite(x_next).all(axis=1)
        if guided:
            bad |= ~np.isfinite(g_hat).all(axis=1)
        if bad.any():
            raise NonFiniteSampleError(
                f"non-finite state after transition {j + 1}/{L - 1} (t={t} -> s={s}) "
                f"in {int(bad.sum())} of {n_chains} chains",
                step=j + 1,
                t=t,
                chains=np.where(bad)[0].tolist(),
            )

        if record:
            XS[j], X0S[j], GS[j], GHATS[j], LOSSES[j] = X, x0, g, g_hat, loss
            KS[j] = state.k
        X = x_next

    t0 = int(steps[-1])
    x0_final = model.tweedie_denoise(X, t0)
    if not record:
        return X
    XS[-1], X0S[-1] = X, x0_final
    LOSSES[-1] = _terminal_loss(model, config, observation, cond, X, x0_final, t0)
    KS[-1] = state.k
    for arr in (XS, X0S, GS, GHATS, LOSSES):
        arr.setflags(write=False)
    sig.setflags(write=False)
    return [
        Trajectory(
            chain=i,
            guidance_mode=mode,
            steps=steps,
            sigmas=sig,
            xs=XS[:, i],
            x0s=X0S[:, i],
            gs=GS[:, i],
            g_hats=GHATS[:, i],
            losses=LOSSES[:, i],
            ks=KS,
        )
        for i in range(n_chains)
    ]


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def run_batch(
    model: ScoreModel,
    config: SamplerConfig,
    n_chains: int,
    observation: "ObservationModel | None" = None,
    cond: "Condition | None" = None,
) -> list[Trajectory]:
    """Run ``n_chains`` independent chains (chain i seeded as seed + i)."""
    return _run_chains(model, config, n_chains, observation, cond, record=True)


def run_final_samples(
    model: ScoreModel,
    config: SamplerConfig,
    n_chains: int,
    observation: "ObservationModel | None" = None,
    cond: "Condition | None" = None,
) -> np.ndarray:
    """Like run_batch but keeps only the final samples (n_chains, d)."""
    return _run_chains(model, config, n_chains, observation, cond, record=False)


def unconditional_chain(model: ScoreModel, config: SamplerConfig) -> Trajectory:
    if config.guidance_mode != MODE_NONE:
        raise ConfigError("unconditional_chain requires guidance_mode 'none'")
    return run_batch(model, config, 1)[0]


def dps_guided_chain(
    model: ScoreModel, observation: "ObservationModel | None", cond: Condition, config: SamplerConfig
) -> Trajectory:
    if config.guidance_mode not in (MODE_DPS, MODE_ADAM_DPS):
        raise ConfigError("dps_guided_chain requires guidance_mode 'dps' or 'adam-dps'")
    return run_batch(model, config, 1, observation, cond)[0]


def cg_guided_chain(model: ScoreModel, label: int, config: SamplerConfig) -> Trajectory:
    if config.guidance_mode not in (MODE_CG, MODE_ADAM_CG):
        raise ConfigError("cg_guided_chain requires guidance_mode 'cg' or 'adam-cg'")
    return run_batch(model, config, 1, None, Condition.class_label(label))[0]


def exact_guided_chain(
    model: ScoreModel, observation: "ObservationModel | None", cond: Condition, config: SamplerConfig
) -> Trajectory:
    """Posterior-score sampling: the exact likelihood score inside the drift."""
    if config.guidance_mode != MODE_EXACT:
        raise ConfigError("exact_guided_chain requires guidance_mode 'exact'")
    return run_batch(model, config, 1, observation, cond)[0]
