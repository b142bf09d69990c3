import numpy as np
import pytest

from mgs.errors import ProjectionDegenerateError
from mgs.metrics import (
    DiagnosticSeries,
    HistogramSpec,
    accumulate_histogram,
    cosine_band,
    grid_kl,
    loss_band,
    merge_histograms,
    percentile_band,
    project_trajectories,
    sequential_cosine,
)
from mgs.mixtures import GaussianComponent, GmmPrior, default_prior
from mgs.samplers import Trajectory


def make_trajectory(g_hats, losses=None, xs=None, mode="dps"):
    g_hats = np.asarray(g_hats, dtype=float)
    L, d = g_hats.shape
    steps = np.arange(L - 1, -1, -1)
    if xs is None:
        xs = np.zeros((L, d))
    return Trajectory(
        chain=0,
        guidance_mode=mode,
        steps=steps,
        sigmas=np.linspace(10.0, 0.01, L),
        xs=np.asarray(xs, dtype=float),
        x0s=np.zeros((L, d)),
        gs=g_hats,
        g_hats=g_hats,
        losses=np.zeros(L) if losses is None else np.asarray(losses, dtype=float),
        ks=np.zeros(L, dtype=int),
    )


# ---------------------------------------------------------------------------
# grid KL
# ---------------------------------------------------------------------------


def test_self_distance_is_small():
    prior = default_prior()
    rng = np.random.default_rng(0)
    samples = prior.sample(100_000, rng)
    spec = HistogramSpec.for_prior(prior)
    kl = grid_kl(samples, prior.log_density, spec)
    assert 0.0 <= kl < 0.05


def test_known_gaussian_kl():
    # target N(0, I), samples from N((1, 0), I): true KL = 0.5 nats
    rng = np.random.default_rng(1)
    samples = rng.standard_normal((100_000, 2)) + np.array([1.0, 0.0])
    spec = HistogramSpec(lo=[-6.0, -6.0], hi=[7.0, 6.0], bins=80)

    def log_density(pts):
        return -0.5 * np.einsum("nd,nd->n", pts, pts) - np.log(2 * np.pi)

    kl = grid_kl(samples, log_density, spec)
    assert kl == pytest.approx(0.5, abs=0.1)


def test_degenerate_samples_finite():
    prior = default_prior()
    samples = np.tile([[0.5, 0.5]], (5000, 1))
    spec = HistogramSpec.for_prior(prior)
    kl = grid_kl(samples, prior.log_density, spec)
    assert np.isfinite(kl) and kl > 1.0


def test_sample_order_invariance():
    prior = default_prior()
    rng = np.random.default_rng(3)
    samples = prior.sample(20_000, rng)
    spec = HistogramSpec.for_prior(prior)
    a = grid_kl(samples, prior.log_density, spec)
    b = grid_kl(samples[::-1], prior.log_density, spec)
    assert a == b


def test_sharded_accumulation_matches_single_pass():
    prior = default_prior()
    rng = np.random.default_rng(4)
    samples = prior.sample(30_000, rng)
    spec = HistogramSpec.for_prior(prior)
    whole = accumulate_histogram(samples, spec)
    parts = [accumulate_histogram(chunk, spec) for chunk in np.array_split(samples, 7)]
    merged = merge_histograms(parts)
    assert np.array_equal(whole.counts, merged.counts)
    assert merged.n_samples == whole.n_samples


def test_out_of_bounds_clamped_and_warned():
    spec = HistogramSpec(lo=[-1.0, -1.0], hi=[1.0, 1.0], bins=10)
    samples = np.array([[0.0, 0.0], [5.0, 5.0]])
    with pytest.warns(UserWarning, match="clamped"):
        hist = accumulate_histogram(samples, spec)
        kl = grid_kl(samples, lambda p: np.zeros(p.shape[0]), spec)
    assert hist.n_clamped == 1
    assert np.isfinite(kl)


def test_error_conditions():
    spec = HistogramSpec(lo=[-1.0, -1.0], hi=[1.0, 1.0], bins=10)
    with pytest.raises(ValueError):
        grid_kl(np.zeros((0, 2)), lambda p: np.zeros(p.shape[0]), spec)
    with pytest.raises(ValueError):
        grid_kl(np.zeros((10, 2)), lambda p: np.full(p.shape[0], -np.inf), spec)
    with pytest.raises(ValueError):
        HistogramSpec(lo=[1.0, 0.0], hi=[0.0, 1.0])


def test_forward_kl_nonnegative_and_reverse_available():
    prior = default_prior()
    rng = np.random.default_rng(5)
    samples = prior.sample(5_000, rng)
    spec = HistogramSpec.for_prior(prior)
    assert grid_kl(samples, prior.log_density, spec, direction="forward") >= 0.0
    assert grid_kl(samples, prior.log_density, spec, direction="reverse") >= 0.0
    with pytest.raises(ValueError):
        grid_kl(samples, prior.log_density, spec, direction="sideways")


def test_noised_samples_match_noised_density():
    # forward-noising consistency: x0 + sigma * eps against the analytic marginal
    prior = default_prior()
    sigma = 1.0
    rng = np.random.default_rng(6)
    x0 = prior.sample(50_000, rng)
    samples = x0 + sigma * rng.standard_normal(x0.shape)
    spec = HistogramSpec.for_prior(prior, sigma=sigma)
    kl = grid_kl(samples, prior.noised(sigma).log_density, spec)
    assert kl < 0.05


# ---------------------------------------------------------------------------
# cosine series and bands
# ---------------------------------------------------------------------------


def test_sequential_cosine_reference_values():
    traj = make_trajectory([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0], [-1.0, 0.0], [0.0, 0.0]])
    cos = sequential_cosine(traj)
    assert cos[0] == pytest.approx(1.0)  # identical direction
    assert cos[1] == pytest.approx(0.0)  # orthogonal
    assert np.isnan(cos[3])  # zero-vector pair undefined
    traj2 = make_trajectory([[1.0, 0.0], [-2.0, 0.0]])
    assert sequential_cosine(traj2)[0] == pytest.approx(-1.0)


def test_sequential_cosine_respects_bounds():
    rng = np.random.default_rng(7)
    traj = make_trajectory(rng.standard_normal((50, 4)))
    cos = sequential_cosine(traj)
    valid = cos[np.isfinite(cos)]
    assert np.all(valid <= 1.0) and np.all(valid >= -1.0)


def test_loss_band_identical_chains():
    trajs = [make_trajectory(np.ones((6, 2)), losses=np.arange(6.0)) for _ in range(5)]
    band = loss_band(trajs)
    assert np.array_equal(band.p25, band.median)
    assert np.array_equal(band.median, band.p75)
    assert np.array_equal(band.median, np.arange(6.0))


def test_median_midpoint_convention():
    steps = np.arange(3)
    values = np.array([[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]])
    band = percentile_band("loss", steps, values)
    assert np.allclose(band.median, 2.0)


def test_loss_band_rejects_bad_input():
    trajs = [make_trajectory(np.ones((4, 2))) for _ in range(3)]
    with pytest.raises(ValueError):
        loss_band(trajs)
    mixed = [make_trajectory(np.ones((4, 2))) for _ in range(3)] + [make_trajectory(np.ones((5, 2)))]
    with pytest.raises(ValueError):
        loss_band(mixed)


def test_cosine_band_excludes_undefined():
    trajs = [
        make_trajectory([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]) for _ in range(4)
    ]
    band = cosine_band(trajs)
    assert band.median[0] == pytest.approx(1.0)
    assert np.isnan(band.median[1]) and np.isnan(band.median[2])


def test_diagnostic_series_invariant():
    with pytest.raises(ValueError):
        DiagnosticSeries(
            name="x",
            steps=np.arange(2),
            p25=np.array([1.0, 1.0]),
            median=np.array([0.5, 1.0]),
            p75=np.array([2.0, 2.0]),
        )


# ---------------------------------------------------------------------------
# trajectory projection
# ---------------------------------------------------------------------------


def projection_fixture(d=6, L=9, seed=8):
    rng = np.random.default_rng(seed)
    start = rng.standard_normal(d)
    target = rng.standard_normal(d)
    xs_a = np.linspace(0.0, 1.0, L)[:, None] * (rng.standard_normal(d) - start) + start
    xs_b = np.linspace(0.0, 1.0, L)[:, None] * (rng.standard_normal(d) - start) + start
    ta = make_trajectory(np.zeros((L, d)), xs=xs_a)
    tb = make_trajectory(np.zeros((L, d)), xs=xs_b)
    return ta, tb, target


def test_projection_anchors_and_orthogonality():
    ta, tb, target = projection_fixture()
    out = project_trajectories(ta, tb, target)
    assert abs(out.u @ out.w) < 1e-12
    assert np.linalg.norm(out.u) == pytest.approx(1.0)
    assert np.linalg.norm(out.w) == pytest.approx(1.0)
    start_height = np.linalg.norm(ta.xs[0] - target)
    assert out.points_a[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert out.points_a[0, 1] == pytest.approx(start_height)
    assert np.allclose(out.points_a[0], out.points_b[0])


def test_projection_of_target_is_origin():
    ta, tb, target = projection_fixture()
    xs = ta.xs.copy()
    xs[3] = target
    ta2 = make_trajectory(np.zeros_like(xs), xs=xs)
    out = project_trajectories(ta2, tb, target)
    assert np.allclose(out.points_a[3], [0.0, 0.0], atol=1e-12)


def test_projection_contours_are_mse():
    ta, tb, target = projection_fixture(d=4)
    out = project_trajectories(ta, tb, target)
    a, b, mse = out.contours.T
    assert np.allclose(mse, (a**2 + b**2) / 4)


def test_projection_degenerate_cases():
    ta, tb, target = projection_fixture()
    with pytest.raises(ValueError):
        project_trajectories(ta, make_trajectory(np.zeros_like(tb.g_hats), xs=tb.xs + 1.0), target)
    with pytest.raises(ProjectionDegenerateError):
        project_trajectories(ta, ta, target)
