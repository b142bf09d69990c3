"""Evaluation tools: smoothed grid KL, guidance diagnostics, 2-D projections.

The KL estimator bins samples on a fixed 2-D grid, smooths additively, and
integrates the analytic target over the same cells (midpoint rule), which
makes it deterministic and auditable; k-NN estimators are not.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, ProjectionDegenerateError
from .mixtures import GmmPrior
from .samplers import Trajectory

FORWARD = "forward"  # KL(empirical || target)
REVERSE = "reverse"


@dataclass(frozen=True)
class HistogramSpec:
    """Axis-aligned 2-D binning grid with additive smoothing."""

    lo: np.ndarray
    hi: np.ndarray
    bins: int = 80
    smoothing: float = 1.0

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.size != 2 or hi.size != 2:
            raise DimensionError("histogram bounds must be 2-D")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("histogram bounds must be finite with lo < hi")
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.smoothing < 0.0:
            raise ValueError(f"smoothing must be >= 0, got {self.smoothing}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def for_prior(cls, prior: GmmPrior, pad_std: float = 6.0, bins: int = 80,
                  sigma: float = 0.0, smoothing: float = 1.0) -> "HistogramSpec":
        """Bounds: envelope of component means +- pad_std noised standard deviations."""
        lo, hi = prior.mean_box()
        scale = pad_std * np.sqrt(prior.max_std() ** 2 + sigma**2)
        return cls(lo=lo - scale, hi=hi + scale, bins=bins, smoothing=smoothing)

    def centers(self) -> np.ndarray:
        axes = [
            0.5 * (edges[1:] + edges[:-1])
            for edges in (np.linspace(self.lo[i], self.hi[i], self.bins + 1) for i in range(2))
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def cell_area(self) -> float:
        return float(np.prod((self.hi - self.lo) / self.bins))


@dataclass(frozen=True)
class Histogram2D:
    spec: HistogramSpec
    counts: np.ndarray
    n_samples: int
    n_clamped: int


def accumulate_histogram(samples: np.ndarray, spec: HistogramSpec) -> Histogram2D:
    """Bin samples; out-of-bounds points are clamped into the edge cells."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise DimensionError("samples must have shape (n, 2)")
    if samples.shape[0] == 0:
        raise ValueError("empty sample set")
    inside = np.all((samples >= spec.lo) & (samples <= spec.hi), axis=1)
    n_clamped = int(samples.shape[0] - inside.sum())
    clipped = np.clip(samples, spec.lo, spec.hi)
    counts, _, _ = np.histogram2d(
        clipped[:, 0],
        clipped[:, 1],
        bins=spec.bins,
        range=[(spec.lo[0], spec.hi[0]), (spec.lo[1], spec.hi[1])],
    )
    return Histogram2D(spec=spec, counts=counts, n_samples=samples.shape[0], n_clamped=n_clamped)


def merge_histograms(parts: Sequence[Histogram2D]) -> Histogram2D:
    """Associative merge of shard histograms accumulated on one spec."""
    if not parts:
        raise ValueError("nothing to merge")
    spec = parts[0].spec
    if any(p.spec != spec for p in parts[1:]):
        raise ValueError("histograms use different specs")
    return Histogram2D(
        spec=spec,
        counts=sum(p.counts for p in parts),
        n_samples=sum(p.n_samples for p in parts),
        n_clamped=sum(p.n_clamped for p in parts),
    )


def grid_kl(
    samples: np.ndarray,
    target_log_density: Callable[[np.ndarray], np.ndarray],
    spec: HistogramSpec,
    direction: str = FORWARD,
) -> float:
    """KL between binned samples and the target integrated over the same grid.

    Forward direction (the default) is KL(empirical || target) in nats. Cell
    probabilities are smoothed as (n_c + alpha/K) / (N + alpha); the target
    is midpoint-integrated per cell and renormalized over the grid.
    """
    hist = accumulate_histogram(samples, spec)
    if hist.n_clamped:
        warnings.warn(
            f"{hist.n_clamped} of {hist.n_samples} samples fell outside the histogram "
            "bounds and were clamped into edge cells",
            stacklevel=2,
        )
    K = spec.bins * spec.bins
    counts = hist.counts.ravel()
    p_hat = (counts + spec.smoothing / K) / (hist.n_samples + spec.smoothing)
    log_q = np.asarray(target_log_density(spec.centers()), dtype=float)
    norm = logsumexp(log_q)
    if not np.isfinite(norm):
        raise ValueError("target density has zero mass on the histogram grid")
    log_q = log_q - norm
    if direction == FORWARD:
        mask = p_hat > 0.0
        return float(np.sum(p_hat[mask] * (np.log(p_hat[mask]) - log_q[mask])))
    if direction == REVERSE:
        q = np.exp(log_q)
        mask = q > 0.0
        return float(np.sum(q[mask] * (log_q[mask] - np.log(p_hat[mask]))))
    raise ValueError(f"direction: expected 'forward' or 'reverse', got {direction!r}")


# ---------------------------------------------------------------------------
# trajectory diagnostics
# ---------------------------------------------------------------------------


def sequential_cosine(trajectory: Trajectory) -> np.ndarray:
    """Cosine similarity between guidance terms applied at adjacent steps.

    Uses the stabilized term for adam modes and the raw term otherwise (the
    trajectory's ``g_hats`` holds exactly the applied quantity). Pairs with a
    zero vector are undefined and marked NaN; aggregate with nan-aware stats.
    """
    terms = trajectory.g_hats
    a, b = terms[:-1], terms[1:]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.einsum("ld,ld->l", a, b) / (na * nb)
    cos = np.where((na == 0.0) | (nb == 0.0), np.nan, cos)
    return np.clip(cos, -1.0, 1.0)


@dataclass(frozen=True)
class DiagnosticSeries:
    """Per-step quartile band of a named scalar across chains."""

    name: str
    steps: np.ndarray
    p25: np.ndarray
    median: np.ndarray
    p75: np.ndarray

    def __post_init__(self):
        valid = np.isfinite(self.median)
        if not (np.all(self.p25[valid] <= self.median[valid]) and np.all(self.median[valid] <= self.p75[valid])):
            raise ValueError("quartile band must satisfy p25 <= median <= p75")


def percentile_band(name: str, steps: np.ndarray, values: np.ndarray) -> DiagnosticSeries:
    """Quartile band over axis 0 (chains); NaN entries are excluded."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices
        p25, med, p75 = np.nanpercentile(values, [25.0, 50.0, 75.0], axis=0)
    return DiagnosticSeries(name=name, steps=np.asarray(steps), p25=p25, median=med, p75=p75)


def loss_band(trajectories: Sequence[Trajectory]) -> DiagnosticSeries:
    """Per-step 25/50/75 percentiles of the guidance loss across chains."""
    if len(trajectories) < 4:
        raise ValueError(f"need at least 4 chains for a quartile band, got {len(trajectories)}")
    steps = trajectories[0].steps
    if any(not np.array_equal(t.steps, steps) for t in trajectories):
        raise ValueError("trajectories use mismatched timestep grids")
    values = np.stack([t.losses for t in trajectories])
    return percentile_band("guidance-loss", steps, values)


def cosine_band(trajectories: Sequence[Trajectory]) -> DiagnosticSeries:
    """Per-step quartile band of sequential guidance cosines across chains."""
    if len(trajectories) < 4:
        raise ValueError(f"need at least 4 chains for a quartile band, got {len(trajectories)}")
    steps = trajectories[0].steps
    if any(not np.array_equal(t.steps, steps) for t in trajectories):
        raise ValueError("trajectories use mismatched timestep grids")
    values = np.stack([sequential_cosine(t) for t in trajectories])
    return percentile_band("sequential-cosine", steps[:-1], values)


# ---------------------------------------------------------------------------
# 2-D trajectory projection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectedTrajectories:
    """Two trajectories mapped onto the (solution-difference, noise-to-target) plane."""

    points_a: np.ndarray  # (L, 2): (w-coordinate, u-coordinate)
    points_b: np.ndarray
    u: np.ndarray  # unit vector along x_T - target (vertical axis)
    w: np.ndarray  # unit vector along the solution difference, orthogonal to u
    contours: np.ndarray  # (m, 3) rows of (w-coord, u-coord, mse-to-target)


def project_trajectories(
    traj_a: Trajectory, traj_b: Trajectory, target: np.ndarray, contour_grid: int = 41
) -> ProjectedTrajectories:
    """Project paired chains onto the plane spanned by the start-to-target
    direction and the (orthogonalized) difference of the two solutions."""
    target = np.asarray(target, dtype=float)
    if traj_a.xs.shape != traj_b.xs.shape or target.shape != traj_a.xs[0].shape:
        raise DimensionError("trajectories and target must share one dimension")
    if not np.allclose(traj_a.xs[0], traj_b.xs[0]):
        raise ValueError("paired trajectories must share the initial noise")
    d = target.size
    start = traj_a.xs[0] - target
    start_norm = np.linalg.norm(start)
    if start_norm == 0.0:
        raise ProjectionDegenerateError("initial noise coincides with the target")
    u = start / start_norm
    diff = traj_a.final - traj_b.final
    w_raw = diff - (diff @ u) * u
    w_norm = np.linalg.norm(w_raw)
    if w_norm <= 1e-12 * max(np.linalg.norm(diff), 1.0):
        raise ProjectionDegenerateError("solutions coincide along the start axis; no second axis")
    w = w_raw / w_norm

    def proj(xs):
        rel = xs - target[None, :]
        return np.stack([rel @ w, rel @ u], axis=1)

    pts_a, pts_b = proj(traj_a.xs), proj(traj_b.xs)
    both = np.concatenate([pts_a, pts_b])
    lo = both.min(axis=0)
    hi = both.max(axis=0)
    pad = 0.1 * (hi - lo + 1e-12)
    aa, bb = np.meshgrid(
        np.linspace(lo[0] - pad[0], hi[0] + pad[0], contour_grid),
        np.linspace(lo[1] - pad[1], hi[1] + pad[1], contour_grid),
        indexing="ij",
    )
    mse = (aa**2 + bb**2) / d
    contours = np.stack([aa.ravel(), bb.ravel(), mse.ravel()], axis=1)
    return ProjectedTrajectories(points_a=pts_a, points_b=pts_b, u=u, w=w, contours=contours)
