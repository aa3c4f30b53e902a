import numpy as np
import pytest

from depthprior import (
    DegradationSpec,
    Dl1Model,
    Dl2IntModel,
    Dl2Model,
    GaussianModel,
    GmmModel,
    HmmModel,
    IdentityModel,
    bls_gaussian,
    bls_gmm,
    bls_gmm_batch,
    degrade,
    degrade_batch,
    map_dl1,
    map_gmm,
    psnr,
    restore_patches,
)
from depthprior.inference import bls_gaussian_batch, map_dl1_batch, map_gmm_batch


def _spd(rng, n, scale=1.0):
    m = rng.random((n, n)) - 0.5
    return scale * (m @ m.T / n + np.eye(n))


def test_degradation_spec_validation():
    with pytest.raises(ValueError):
        DegradationSpec(np.ones(3), np.ones(4, dtype=bool))
    with pytest.raises(ValueError):
        DegradationSpec(-np.ones(4), np.ones(4, dtype=bool))
    with pytest.raises(ValueError):
        DegradationSpec(np.full(4, np.inf), np.ones(4, dtype=bool))


def test_degradation_spec_constructors():
    d = DegradationSpec.denoising(0.1, 5)
    assert np.allclose(d.noise_var, 0.01)
    assert d.observed.all()

    obs = np.array([True, False, True])
    i = DegradationSpec.inpainting(obs, noise_std=0.2, floor=1e-12)
    assert np.allclose(i.noise_var[obs], 0.04)
    assert i.noise_var[1] == 0.0
    assert not i.observed[1]

    i0 = DegradationSpec.inpainting(obs, floor=1e-12)
    assert np.allclose(i0.noise_var[obs], 1e-12)


def test_degradation_spec_signature_distinguishes_masks():
    a = DegradationSpec.denoising(0.1, 4)
    b = DegradationSpec.denoising(0.1, 4)
    c = DegradationSpec.inpainting(np.array([1, 1, 0, 1], dtype=bool))
    assert a.signature() == b.signature()
    assert a.signature() != c.signature()


def test_degrade_hides_pixels_and_adds_noise():
    spec = DegradationSpec.inpainting(
        np.array([True, False, True, True]), noise_std=0.5)
    rng = np.random.default_rng(0)
    y = degrade(rng, np.full(4, 0.5), spec)
    assert np.isnan(y[1])
    assert np.all(np.isfinite(y[[0, 2, 3]]))

    noiseless = DegradationSpec.denoising(0.0, 4)
    y0 = degrade(np.random.default_rng(1), np.full(4, 0.5), noiseless)
    assert np.array_equal(y0, np.full(4, 0.5))


def test_degrade_batch_is_seed_deterministic():
    spec = DegradationSpec.denoising(0.1, 8)
    xs = np.random.default_rng(2).random((5, 8))
    a = degrade_batch(np.random.default_rng(3), xs, spec)
    b = degrade_batch(np.random.default_rng(3), xs, spec)
    assert np.array_equal(a, b)


def test_psnr_examples():
    x = np.full((10, 64), 0.5)
    assert psnr(x, x) == np.inf
    assert psnr(x, x + 0.1) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_psnr_noise_floor():
    sigma = 15.0 / 255.0
    rng = np.random.default_rng(4)
    xs = rng.random((10_000, 64))
    ys = xs + sigma * rng.standard_normal(xs.shape)
    expected = -20.0 * np.log10(sigma)  # about 24.6 dB
    assert expected == pytest.approx(24.61, abs=0.01)
    assert psnr(xs, ys) == pytest.approx(expected, abs=0.1)


def test_bls_gaussian_noiseless_returns_observation():
    rng = np.random.default_rng(5)
    g = GaussianModel(rng.random(8), _spd(rng, 8))
    y = rng.random(8)
    spec = DegradationSpec.denoising(0.0, 8)
    out = bls_gaussian(g, y, spec)
    assert np.allclose(out.estimate, y, atol=1e-10)
    assert out.method == "bls"


def test_bls_gaussian_infinite_noise_returns_prior_mean():
    rng = np.random.default_rng(6)
    g = GaussianModel(rng.random(8), _spd(rng, 8))
    spec = DegradationSpec.denoising(1e6, 8)
    out = bls_gaussian(g, rng.random(8), spec)
    assert np.allclose(out.estimate, g.mean, atol=1e-9)


def test_bls_gaussian_two_pixel_conditional_oracle():
    mean = np.array([0.3, 0.7])
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    g = GaussianModel(mean, cov)
    spec = DegradationSpec.inpainting(np.array([False, True]))
    y2 = 1.3
    out = bls_gaussian(g, np.array([np.nan, y2]), spec)
    oracle = mean[0] + cov[0, 1] / cov[1, 1] * (y2 - mean[1])
    assert abs(out.estimate[0] - oracle) < 1e-12
    assert abs(out.estimate[1] - y2) < 1e-12


def test_bls_gaussian_no_observations_returns_prior_mean():
    rng = np.random.default_rng(7)
    g = GaussianModel(rng.random(4), _spd(rng, 4))
    spec = DegradationSpec.inpainting(np.zeros(4, dtype=bool))
    out = bls_gaussian(g, np.full(4, np.nan), spec)
    assert np.array_equal(out.estimate, g.mean)


def test_bls_rejects_nan_on_observed_pixels():
    g = GaussianModel(np.zeros(4), np.eye(4))
    spec = DegradationSpec.denoising(0.1, 4)
    with pytest.raises(ValueError):
        bls_gaussian(g, np.array([0.1, np.nan, 0.2, 0.3]), spec)


def test_bls_gmm_single_component_equals_gaussian():
    rng = np.random.default_rng(8)
    mean = rng.random(8)
    cov = _spd(rng, 8)
    gmm = GmmModel(weights=[1.0], mean=mean, covariances=cov[None])
    g = GaussianModel(mean, cov)
    spec = DegradationSpec.denoising(0.2, 8)
    ys = rng.random((6, 8))
    est_mix, resp = bls_gmm_batch(gmm, ys, spec)
    est_one = bls_gaussian_batch(g, ys, spec)
    assert np.array_equal(est_mix, est_one)
    assert np.allclose(resp, 1.0)


def test_bls_gmm_matches_1d_quadrature():
    vars_ = np.array([0.04, 1.0])
    weights = np.array([0.35, 0.65])
    gmm = GmmModel(weights=weights, mean=[0.0],
                   covariances=vars_[:, None, None])
    sigma = 0.5
    spec = DegradationSpec.denoising(sigma, 1)

    grid = np.linspace(-12.0, 12.0, 200_001)
    prior = sum(w * np.exp(-grid**2 / (2 * v)) / np.sqrt(2 * np.pi * v)
                for w, v in zip(weights, vars_))
    for y in (-1.7, 0.25, 2.0):
        lik = np.exp(-(y - grid) ** 2 / (2 * sigma**2))
        post = prior * lik
        oracle = np.trapezoid(grid * post, grid) / np.trapezoid(post, grid)
        out = bls_gmm(gmm, np.array([y]), spec)
        assert abs(out.estimate[0] - oracle) < 1e-6
        assert out.posterior_weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_bls_gmm_identical_components_weights_equal_prior():
    rng = np.random.default_rng(9)
    cov = _spd(rng, 4)
    weights = np.array([0.2, 0.3, 0.5])
    gmm = GmmModel(weights=weights, mean=np.zeros(4),
                   covariances=np.stack([cov] * 3))
    spec = DegradationSpec.denoising(0.1, 4)
    _, resp = bls_gmm_batch(gmm, rng.random((5, 4)), spec)
    assert np.allclose(resp, weights, atol=1e-12)


def test_hmm_uniform_rows_restore_like_plain_gmm():
    rng = np.random.default_rng(10)
    row = np.array([0.3, 0.7])
    covs = np.stack([_spd(rng, 4, s) for s in (0.5, 2.0)])
    disp = GmmModel(weights=[0.5, 0.5], mean=np.zeros(4), covariances=covs)
    int_gmm = GmmModel(weights=[0.5, 0.5], mean=np.zeros(4),
                       covariances=np.stack([_spd(rng, 4), _spd(rng, 4, 3.0)]))
    hmm = HmmModel(int_gmm, disp, np.stack([row, row]))
    gmm_row = GmmModel(weights=row, mean=np.zeros(4), covariances=covs)

    spec = DegradationSpec.denoising(0.2, 4)
    ys = rng.random((7, 4))
    cs = rng.random((7, 4))
    est_hmm, _ = restore_patches(hmm, ys, spec, intensities=cs)
    est_gmm, _ = restore_patches(gmm_row, ys, spec)
    assert np.allclose(est_hmm, est_gmm, atol=1e-12)


def test_map_gmm_single_component_equals_bls():
    rng = np.random.default_rng(11)
    cov = _spd(rng, 8)
    gmm = GmmModel(weights=[1.0], mean=rng.random(8), covariances=cov[None])
    spec = DegradationSpec.denoising(0.15, 8)
    y = rng.random(8)
    assert np.array_equal(map_gmm(gmm, y, spec).estimate,
                          bls_gmm(gmm, y, spec).estimate)


def test_map_gmm_returns_dominant_component_posterior_mean():
    gmm = GmmModel(weights=[0.5, 0.5], mean=[0.0],
                   covariances=np.array([[[1.0]], [[4.0]]]))
    spec = DegradationSpec.denoising(0.1, 1)
    # the marginals cross near |y| = 1.3644; just below, the small-variance
    # component wins by a whisker
    y = np.array([1.36])
    out = map_gmm(gmm, y, spec)
    assert 0.5 < out.posterior_weights[0] < 0.55
    comp0 = bls_gaussian(gmm.component_gaussian(0), y, spec)
    assert np.array_equal(out.estimate, comp0.estimate)
    # just above the crossing the other component takes over
    y = np.array([1.40])
    out = map_gmm(gmm, y, spec)
    assert out.posterior_weights[1] > 0.5
    comp1 = bls_gaussian(gmm.component_gaussian(1), y, spec)
    assert np.array_equal(out.estimate, comp1.estimate)


def test_bls_beats_map_on_model_draws():
    # posterior mean is MSE-optimal, so the gap must clear 3 standard errors
    gmm = GmmModel(weights=[0.5, 0.5], mean=[0.0],
                   covariances=np.array([[[0.04]], [[1.0]]]))
    rng = np.random.default_rng(12)
    xs, _ = gmm.sample(rng, 10_000)
    spec = DegradationSpec.denoising(0.3, 1)
    ys = degrade_batch(rng, xs, spec)
    est_bls, _ = bls_gmm_batch(gmm, ys, spec)
    est_map, _ = map_gmm_batch(gmm, ys, spec)
    d_bls = np.sum((est_bls - xs) ** 2, axis=1)
    d_map = np.sum((est_map - xs) ** 2, axis=1)
    diff = d_map - d_bls
    sem = diff.std(ddof=1) / np.sqrt(diff.size)
    assert diff.mean() > 3.0 * sem


def test_map_dl1_noiseless_observation_is_identity():
    model = Dl1Model(lam=1e-6, eps=0.0)
    rng = np.random.default_rng(13)
    y = rng.random(64)
    spec = DegradationSpec.denoising(0.0, 64)
    out = map_dl1(model, y, spec)
    assert np.array_equal(out.estimate, y)  # exact observations are pinned

    near = DegradationSpec.denoising(1e-3, 64)
    out = map_dl1(model, y, near)
    assert np.abs(out.estimate - y).max() < 1e-4


def test_map_dl1_three_pixel_grid_search_oracle():
    # 1x3 total-variation toy with an outlier; coarse-to-fine exhaustive
    # search over all three coordinates is the oracle
    model = Dl1Model(lam=0.5, eps=0.05, width=3, height=1)
    y = np.array([0.2, 0.25, 0.9])
    sigma = 0.1
    spec = DegradationSpec.denoising(sigma, 3)

    a = model.operator.matrix.toarray()

    def objective(d):
        fit = np.sum((d - y) ** 2, axis=-1) / (2 * sigma**2)
        return (0.5 * np.abs(d @ a.T).sum(axis=-1)
                + 0.05 * np.abs(d).sum(axis=-1) + fit)

    center = y.copy()
    half = 1.0
    for _ in range(5):
        axes = [np.linspace(c - half, c + half, 41) for c in center]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        center = pts[np.argmin(objective(pts))]
        half /= 20.0

    out = map_dl1(model, y, spec)
    assert out.converged
    assert np.abs(out.estimate - center).max() < 1e-3


def test_map_dl1_objective_never_increases():
    model = Dl1Model(lam=5.0, eps=0.1)
    rng = np.random.default_rng(14)
    y = rng.random(64)
    spec = DegradationSpec.denoising(0.05, 64)

    a = model.operator.matrix.toarray()
    delta = 1e-6

    def smooth_objective(d):
        fit = np.sum((d - y) ** 2 / (2 * 0.05**2))
        return (5.0 * np.sqrt((d @ a.T) ** 2 + delta**2).sum()
                + 0.1 * np.sqrt(d * d + delta**2).sum() + fit)

    values = [smooth_objective(y)]
    for iters in range(1, 9):
        est, _, _ = map_dl1_batch(model, y[None], spec, max_iters=iters)
        values.append(smooth_objective(est[0]))
    assert np.all(np.diff(values) <= 1e-10)


def test_map_dl1_reports_convergence_budget():
    model = Dl1Model(lam=5.0, eps=0.1)
    y = np.random.default_rng(15).random(64)
    spec = DegradationSpec.denoising(0.05, 64)
    out = map_dl1(model, y, spec, max_iters=2)
    assert not out.converged
    assert out.iterations == 2


def test_inpainting_equals_huge_noise_denoising():
    rng = np.random.default_rng(16)
    covs = np.stack([_spd(rng, 8, s) for s in (0.5, 2.0)])
    gmm = GmmModel(weights=[0.4, 0.6], mean=rng.random(8), covariances=covs)
    observed = np.array([True, True, False, True, False, True, True, True])
    sigma = 0.1

    spec_inp = DegradationSpec.inpainting(observed, noise_std=sigma)
    ys = rng.random((5, 8))
    ys_masked = ys.copy()
    ys_masked[:, ~observed] = np.nan
    est_inp, _ = bls_gmm_batch(gmm, ys_masked, spec_inp)

    var = np.full(8, sigma**2)
    var[~observed] = 1e12
    spec_noise = DegradationSpec(var, np.ones(8, dtype=bool))
    est_noise, _ = bls_gmm_batch(gmm, ys, spec_noise)
    assert np.abs(est_inp - est_noise).max() < 1e-6


def test_dl2int_restoration_with_flat_intensity_matches_dl2():
    lam, eps = 60.0, 1e-3
    dl2 = Dl2Model(lam=lam, eps=eps)
    dl2int = Dl2IntModel(lam=lam, eps=eps, sigma=0.1)
    rng = np.random.default_rng(17)
    ys = rng.random((4, 64))
    cs = np.full((4, 64), 0.3)
    spec = DegradationSpec.denoising(0.1, 64)
    est_cond, _ = restore_patches(dl2int, ys, spec, intensities=cs)
    est_plain, _ = restore_patches(dl2, ys, spec)
    assert np.allclose(est_cond, est_plain, atol=1e-8)


def test_dl2int_inpainting_pins_exact_observations():
    dl2int = Dl2IntModel(lam=100.0, eps=1e-3, sigma=0.1)
    rng = np.random.default_rng(18)
    y = rng.random(64)
    observed = np.zeros(64, dtype=bool)
    observed[[0, 7, 56, 63]] = True
    spec = DegradationSpec.inpainting(observed)
    ym = y.copy()
    ym[~observed] = np.nan
    est, _ = restore_patches(dl2int, ym[None], spec,
                             intensities=rng.random((1, 64)))
    assert np.array_equal(est[0, observed], y[observed])
    assert np.all(np.isfinite(est))


def test_identity_model_restoration():
    ident = IdentityModel()
    rng = np.random.default_rng(19)
    ys = rng.random((3, 64))
    spec = DegradationSpec.denoising(0.1, 64)
    est, resp = restore_patches(ident, ys, spec)
    assert np.array_equal(est, ys)
    assert resp is None

    observed = np.ones(64, dtype=bool)
    observed[10:20] = False
    hole = DegradationSpec.inpainting(observed)
    ym = ys.copy()
    ym[:, ~observed] = np.nan
    est, _ = restore_patches(ident, ym, hole)
    fill = ym[:, observed].mean(axis=1)
    assert np.allclose(est[:, ~observed], fill[:, None])


def test_restore_patches_dispatch_errors():
    rng = np.random.default_rng(20)
    ys = rng.random((2, 64))
    spec = DegradationSpec.denoising(0.1, 64)
    with pytest.raises(TypeError):
        restore_patches(Dl1Model(lam=1.0, eps=0.1), ys, spec, method="bls")
    with pytest.raises(ValueError):
        restore_patches(Dl2IntModel(lam=1.0, eps=0.1, sigma=0.1), ys, spec)
    with pytest.raises(ValueError):
        restore_patches(IdentityModel(), ys, spec, method="blur")
    with pytest.raises(TypeError):
        restore_patches(object(), ys, spec)


def test_restore_patches_dl2_routes_through_gaussian():
    dl2 = Dl2Model(lam=40.0, eps=1e-3)
    rng = np.random.default_rng(21)
    ys = rng.random((3, 64))
    spec = DegradationSpec.denoising(0.2, 64)
    est, resp = restore_patches(dl2, ys, spec)
    expected = bls_gaussian_batch(dl2.gaussian, ys, spec)
    assert np.array_equal(est, expected)
    assert resp is None
