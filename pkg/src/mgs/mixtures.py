"""Gaussian-mixture priors with closed-form scores, denoisers, and posteriors.

A mixture convolved with isotropic Gaussian noise stays a mixture, so every
quantity a diffusion sampler needs at noise level ``sigma`` is available in
closed form: the log density and its gradient (the score), the posterior
mean of the clean signal (Tweedie), its Jacobian, the component
responsibilities (an exact time-aware classifier), and - for linear-Gaussian
observations - the exact likelihood score and posterior. A brute-force
quadrature path cross-checks the likelihood score for arbitrary losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .errors import (
    ConfigError,
    DegenerateLikelihoodError,
    DimensionError,
    OraclePrecisionError,
    UnsupportedOracleError,
)
from .operators import (
    CROSS_ENTROPY,
    GAUSSIAN_NLL,
    Condition,
    ObservationModel,
    _as_batch,
    loss_and_gradient,
)
from .schedule import NoiseSchedule

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianComponent:
    """One mixture component: weight in (0, 1], SPD covariance."""

    weight: float
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        if not 0.0 < self.weight <= 1.0:
            raise ConfigError(f"component weight must lie in (0, 1], got {self.weight}")
        if cov.shape != (mean.size, mean.size):
            raise ConfigError(f"covariance shape {cov.shape} incompatible with mean of size {mean.size}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
            raise ConfigError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("covariance must be positive definite") from exc
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "cholesky", chol)

    @property
    def dimension(self) -> int:
        return self.mean.size


class GmmPrior:
    """Weighted Gaussian mixture defining the clean-data distribution."""

    def __init__(self, components):
        components = tuple(components)
        if not components:
            raise ConfigError("mixture needs at least one component")
        d = components[0].dimension
        if any(c.dimension != d for c in components):
            raise ConfigError("all components must share one dimension")
        weights = np.array([c.weight for c in components])
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"component weights must sum to 1, got {weights.sum()!r}")
        self.components = components
        self.dimension = d
        self.weights = weights
        self.means = np.stack([c.mean for c in components])
        self.covariances = np.stack([c.covariance for c in components])
        self._chols = np.stack([c.cholesky for c in components])
        self.weights.setflags(write=False)
        self.means.setflags(write=False)
        self.covariances.setflags(write=False)

    @property
    def num_components(self) -> int:
        return len(self.components)

    def noised(self, sigma: float) -> "NoisedMixture":
        return NoisedMixture(self, sigma)

    def log_density(self, x) -> np.ndarray:
        return self.noised(0.0).log_density(x)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n clean samples; deterministic given the generator state."""
        cs = rng.choice(self.num_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dimension))
        return self.means[cs] + np.einsum("nij,nj->ni", self._chols[cs], z)

    def max_std(self) -> float:
        """Largest per-component standard deviation (sqrt of max eigenvalue)."""
        eig = [np.linalg.eigvalsh(c)[-1] for c in self.covariances]
        return float(np.sqrt(max(eig)))

    def mean_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-axis envelope of the component means."""
        return self.means.min(axis=0), self.means.max(axis=0)


class NoisedMixture:
    """The prior convolved with N(0, sigma^2 I): densities, scores, Hessians."""

    def __init__(self, prior: GmmPrior, sigma: float):
        if sigma < 0.0:
            raise ConfigError(f"sigma must be >= 0, got {sigma}")
        self.prior = prior
        self.sigma = float(sigma)
        d = prior.dimension
        covs = prior.covariances + sigma**2 * np.eye(d)[None]
        self._chols = np.linalg.cholesky(covs)
        self._logdets = 2.0 * np.log(np.diagonal(self._chols, axis1=1, axis2=2)).sum(axis=1)
        eye = np.eye(d)
        self._invs = np.stack(
            [cho_solve((L, True), eye) for L in self._chols]
        )
        self._logw = np.log(prior.weights)

    @property
    def dimension(self) -> int:
        return self.prior.dimension

    def _diffs(self, X: np.ndarray) -> np.ndarray:
        return X[:, None, :] - self.prior.means[None, :, :]

    def component_log_pdfs(self, X: np.ndarray) -> np.ndarray:
        # quadratic form via the precomputed inverse: einsum's fixed loop order
        # keeps results bit-identical across batch widths (LAPACK trsm is not)
        d = self.dimension
        diffs = self._diffs(X)
        quad = np.einsum("nki,kij,nkj->nk", diffs, self._invs, diffs)
        return -0.5 * quad - 0.5 * self._logdets[None, :] - 0.5 * d * LOG_2PI

    def component_scores(self, X: np.ndarray) -> np.ndarray:
        """Per-component Gaussian scores -(Sigma_i + sigma^2 I)^{-1} (x - mu_i)."""
        diffs = self._diffs(X)
        return -np.einsum("kij,nkj->nki", self._invs, diffs)

    def log_density(self, x) -> np.ndarray:
        X, single = _as_batch(x, self.dimension)
        vals = logsumexp(self.component_log_pdfs(X) + self._logw[None, :], axis=1)
        return float(vals[0]) if single else vals

    def responsibilities(self, x) -> np.ndarray:
        X, single = _as_batch(x, self.dimension)
        logits = self.component_log_pdfs(X) + self._logw[None, :]
        logits -= logits.max(axis=1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(axis=1, keepdims=True)
        return r[0] if single else r

    def score(self, x) -> np.ndarray:
        X, single = _as_batch(x, self.dimension)
        r = self.responsibilities(X)
        s = np.einsum("nk,nki->ni", r, self.component_scores(X))
        return s[0] if single else s

    def hessian_log_density(self, x) -> np.ndarray:
        """d^2/dx^2 log p(x); symmetric (n, d, d)."""
        X, single = _as_batch(x, self.dimension)
        logits = self.component_log_pdfs(X) + self._logw[None, :]
        logits -= logits.max(axis=1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(axis=1, keepdims=True)
        s = self.component_scores(X)
        mix = np.einsum("nk,nki->ni", r, s)
        H = np.einsum("nk,nki,nkj->nij", r, s, s)
        H -= np.einsum("nk,kij->nij", r, self._invs)
        H -= np.einsum("ni,nj->nij", mix, mix)
        return H[0] if single else H

    def class_log_prob_and_grad(self, x, label: int) -> tuple[np.ndarray, np.ndarray]:
        """log r_label(x) and its gradient s_label(x) - score(x)."""
        k = self.prior.num_components
        if not 0 <= label < k:
            raise ConfigError(f"class index {label} outside 0..{k - 1}")
        X, single = _as_batch(x, self.dimension)
        logits = self.component_log_pdfs(X) + self._logw[None, :]
        logp = logits[:, label] - logsumexp(logits, axis=1)
        logits -= logits.max(axis=1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(axis=1, keepdims=True)
        s = self.component_scores(X)
        grad = s[:, label, :] - np.einsum("nk,nki->ni", r, s)
        if single:
            return float(logp[0]), grad[0]
        return logp, grad


class ScoreModel:
    """Closed-form stand-in for a trained noise predictor over a GMM prior."""

    def __init__(self, prior: GmmPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule
        self._by_t: dict[int, NoisedMixture] = {}
        self._by_sigma: dict[float, NoisedMixture] = {}

    def noised(self, t: int) -> NoisedMixture:
        mix = self._by_t.get(t)
        if mix is None:
            mix = NoisedMixture(self.prior, self.schedule.sigma(t))
            self._by_t[t] = mix
        return mix

    def at_sigma(self, sigma: float) -> NoisedMixture:
        mix = self._by_sigma.get(sigma)
        if mix is None:
            mix = NoisedMixture(self.prior, sigma)
            self._by_sigma[sigma] = mix
        return mix

    def sigma(self, t: int) -> float:
        return self.schedule.sigma(t)

    def noised_log_density(self, x, t: int) -> np.ndarray:
        """log p(x_t) for the prior convolved with N(0, sigma_t^2 I)."""
        return self.noised(t).log_density(x)

    def prior_score(self, x, t: int) -> np.ndarray:
        """Gradient of the noised log density at x."""
        return self.noised(t).score(x)

    def tweedie_denoise(self, x, t: int) -> np.ndarray:
        """Posterior mean E[x_0 | x_t] = x_t + sigma_t^2 * score(x_t)."""
        x = np.asarray(x, dtype=float)
        return x + self.sigma(t) ** 2 * self.noised(t).score(x)

    def tweedie_jacobian(self, x, t: int) -> np.ndarray:
        """d x_{0|t} / d x_t = I + sigma_t^2 * hessian(log p)(x_t)."""
        H = self.noised(t).hessian_log_density(x)
        eye = np.eye(self.prior.dimension)
        return eye + self.sigma(t) ** 2 * H

    def class_posterior(self, x, t: int) -> np.ndarray:
        """Exact time-aware classifier: component responsibilities at sigma_t."""
        if self.prior.num_components < 2:
            raise ValueError("class posterior undefined for a single-component prior")
        return self.noised(t).responsibilities(x)


def epsilon_from_score(score: np.ndarray, sigma_t: float) -> np.ndarray:
    """Noise-prediction parameterization: eps = -sigma_t * score."""
    if sigma_t <= 0.0:
        raise ValueError(f"sigma_t must be positive, got {sigma_t}")
    return -sigma_t * np.asarray(score, dtype=float)


def default_prior() -> GmmPrior:
    """Three moderately separated 2-D modes; the lab's standard synthetic prior."""
    return GmmPrior(
        [
            GaussianComponent(0.40, [-4.0, -2.0], 0.8 * np.eye(2)),
            GaussianComponent(0.35, [0.0, 3.0], [[1.0, 0.3], [0.3, 0.6]]),
            GaussianComponent(0.25, [4.0, -1.0], 0.5 * np.eye(2)),
        ]
    )


def suggested_sigma_max(prior: GmmPrior, factor: float = 3.0) -> float:
    """Noise level making x_T effectively pure noise: factor x the mean spread."""
    means = prior.means
    dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    spread = float(dists.max())
    return factor * max(spread, prior.max_std())


# ---------------------------------------------------------------------------
# Exact likelihood score (closed form + quadrature fallback)
# ---------------------------------------------------------------------------


def _require_linear_gaussian(observation: ObservationModel) -> None:
    if observation.loss_kind != GAUSSIAN_NLL:
        raise UnsupportedOracleError(
            f"exact oracle requires a linear-Gaussian observation, got {observation.loss_kind}"
        )


def _joint_mixture(prior: GmmPrior, observation: ObservationModel, sigma_t: float) -> GmmPrior:
    """Joint law of (x_t, y) for a linear-Gaussian observation; again a GMM."""
    A = observation.operator.as_matrix()
    m, d = A.shape
    sig_y2 = observation.noise_std**2
    comps = []
    for c in prior.components:
        cov_xt = c.covariance + sigma_t**2 * np.eye(d)
        cross = c.covariance @ A.T
        cov_y = A @ c.covariance @ A.T + sig_y2 * np.eye(m)
        joint_cov = np.block([[cov_xt, cross], [cross.T, cov_y]])
        joint_cov = 0.5 * (joint_cov + joint_cov.T)
        joint_mean = np.concatenate([c.mean, A @ c.mean])
        comps.append(GaussianComponent(c.weight, joint_mean, joint_cov))
    return GmmPrior(comps)


def exact_likelihood_score(
    model: ScoreModel,
    observation: ObservationModel,
    cond: Condition,
    x_t: np.ndarray,
    t: int,
    method: str = "closed-form",
    quad_cells: int = 400,
    quad_tol: float = 1e-3,
) -> np.ndarray:
    """Exact grad_{x_t} log p(y | x_t), marginalizing the clean signal.

    The closed form treats (x_t, y) as a joint Gaussian mixture (measurement
    conditions) or uses the noised responsibilities (class conditions). The
    quadrature path integrates the observation likelihood against the
    denoising posterior on a grid and works for any loss; it raises
    OraclePrecisionError when grid refinement shifts the answer by more
    than ``quad_tol`` (relative).
    """
    sigma_t = model.sigma(t)
    if cond.is_class:
        if method == "closed-form":
            # tower property: responsibilities under the noised mixture are exact
            _, grad = model.noised(t).class_log_prob_and_grad(x_t, cond.class_index)
            return grad
        loss = _class_loss_fn(model.prior, cond.class_index)
        return _quadrature_likelihood_score(model, loss, x_t, sigma_t, quad_cells, quad_tol)
    _require_linear_gaussian(observation)
    if method == "closed-form":
        if observation.noise_std == 0.0:
            raise DegenerateLikelihoodError("closed form needs noise_std > 0")
        joint = _joint_mixture(model.prior, observation, sigma_t)
        x_t = np.asarray(x_t, dtype=float)
        single = x_t.ndim == 1
        X, _ = _as_batch(x_t, model.prior.dimension, name="x_t")
        Y = np.broadcast_to(cond.y, (X.shape[0], cond.y.size))
        Z = np.concatenate([X, Y], axis=1)
        joint_score = joint.noised(0.0).score(Z)[:, : model.prior.dimension]
        grad = joint_score - model.noised(t).score(X)
        return grad[0] if single else grad
    if method != "quadrature":
        raise ConfigError(f"method: expected 'closed-form' or 'quadrature', got {method!r}")

    def loss(X0):
        res = observation.operator._apply(X0) - cond.y[None, :]
        return 0.5 * np.einsum("nm,nm->n", res, res) / observation.noise_std**2

    return _quadrature_likelihood_score(model, loss, x_t, sigma_t, quad_cells, quad_tol)


def _class_loss_fn(prior: GmmPrior, label: int):
    clean = NoisedMixture(prior, 0.0)

    def loss(X0):
        logp, _ = clean.class_log_prob_and_grad(X0, label)
        return -np.atleast_1d(logp)

    return loss


def _grid(prior: GmmPrior, cells: int, pad: float = 6.0) -> tuple[np.ndarray, float]:
    d = prior.dimension
    if d > 2:
        raise UnsupportedOracleError("quadrature oracle only supports d <= 2")
    lo, hi = prior.mean_box()
    lo = lo - pad * prior.max_std()
    hi = hi + pad * prior.max_std()
    axes = [np.linspace(a, b, cells + 1) for a, b in zip(lo, hi)]
    centers = [0.5 * (ax[1:] + ax[:-1]) for ax in axes]
    mesh = np.meshgrid(*centers, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts, float(np.prod((hi - lo) / cells))


def _quadrature_likelihood_score(model, loss_fn, x_t, sigma_t, cells, tol):
    if sigma_t <= 0.0:
        raise ConfigError("quadrature path needs sigma_t > 0")
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim != 1:
        raise DimensionError("quadrature path evaluates one point at a time")

    def estimate(n_cells):
        pts, _ = _grid(model.prior, n_cells)
        log_prior = model.prior.log_density(pts)
        sq = np.einsum("nd,nd->n", pts - x_t[None, :], pts - x_t[None, :])
        log_trans = -0.5 * sq / sigma_t**2
        log_post = log_prior + log_trans
        posterior_mean = _weighted_mean(pts, log_post)
        tilted_mean = _weighted_mean(pts, log_post - loss_fn(pts))
        return (tilted_mean - posterior_mean) / sigma_t**2

    fine = estimate(cells)
    coarse = estimate(cells // 2)
    err = np.linalg.norm(fine - coarse) / max(np.linalg.norm(fine), 1e-12)
    if err > tol:
        raise OraclePrecisionError(
            f"quadrature refinement moved the score by {err:.2e} (> {tol:.0e}); grid too coarse"
        )
    return fine


def _weighted_mean(pts, logw):
    logw = logw - logw.max()
    w = np.exp(logw)
    return (w @ pts) / w.sum()


# ---------------------------------------------------------------------------
# Exact posterior for linear-Gaussian observations
# ---------------------------------------------------------------------------


def exact_posterior(model, observation: ObservationModel, cond: Condition) -> GmmPrior:
    """p(x_0 | y) for a GMM prior and linear-Gaussian observation: again a GMM.

    Each component posterior is a conjugate Gaussian update; component weights
    are reweighted by the marginal evidence N(y; A mu_i, A Sigma_i A^T + sig_y^2 I).
    """
    prior = model.prior if isinstance(model, ScoreModel) else model
    if cond.is_class:
        raise UnsupportedOracleError("exact posterior requires a measurement condition")
    _require_linear_gaussian(observation)
    A = observation.operator.as_matrix()
    m, d = A.shape
    y = cond.y
    if y.shape != (m,):
        raise DimensionError(f"y: expected shape ({m},), got {y.shape}")
    if m == 0:
        return prior
    sig_y2 = observation.noise_std**2
    log_evidence = np.empty(prior.num_components)
    comps = []
    for i, c in enumerate(prior.components):
        S = A @ c.covariance @ A.T + sig_y2 * np.eye(m)
        try:
            Ls = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise UnsupportedOracleError(
                "evidence covariance not positive definite (noise-free rank-deficient operator)"
            ) from exc
        resid = y - A @ c.mean
        z = solve_triangular(Ls, resid, lower=True)
        logdet = 2.0 * np.log(np.diag(Ls)).sum()
        log_evidence[i] = -0.5 * (z @ z) - 0.5 * logdet - 0.5 * m * LOG_2PI
        gain = cho_solve((Ls, True), A @ c.covariance).T  # (d, m)
        mean = c.mean + gain @ resid
        cov = c.covariance - gain @ A @ c.covariance
        cov = 0.5 * (cov + cov.T)
        comps.append((mean, cov))
    logw = np.log(prior.weights) + log_evidence
    logw -= logsumexp(logw)
    w = np.exp(logw)
    w /= w.sum()
    return GmmPrior(
        [GaussianComponent(wi, mean, cov) for wi, (mean, cov) in zip(w, comps)]
    )
