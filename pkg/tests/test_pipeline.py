"""Two-stage image restoration: hole detection, CG solver, global systems."""

import numpy as np
import pytest
import scipy.sparse as sp

from depthprior.conditional import Dl2IntModel
from depthprior.core import PixelMask
from depthprior.data import SyntheticSpec, generate_synthetic_images
from depthprior.inference import DegradationSpec, bls_gmm, degrade, psnr
from depthprior.models import Dl2Model, GmmModel
from depthprior.operators import build_derivative_operator, build_dl2_precision
from depthprior.pipeline import (
    GlobalSystem,
    RestorationJob,
    conjugate_gradient,
    find_holes,
    global_quadratic,
    hole_system,
    restore_image,
    restore_image_global,
    solve_global,
)


def _spd(rng, n, shift=None):
    m = rng.standard_normal((n, n))
    return m @ m.T + (n if shift is None else shift) * np.eye(n)


class TestFindHoles:
    def test_fully_observed_gives_empty_list(self):
        assert find_holes(PixelMask.fully_observed(12, 12), 2) == []

    def test_single_pixel_is_one_small_component(self):
        flags = np.ones((6, 6), dtype=bool)
        flags[3, 2] = False
        holes = find_holes(PixelMask(flags), 2)
        assert len(holes) == 1
        assert holes[0].area == 1
        assert not holes[0].large
        assert holes[0].pixels.tolist() == [3 * 6 + 2]

    def test_diagonal_pixels_are_two_components(self):
        flags = np.ones((5, 5), dtype=bool)
        flags[1, 1] = False
        flags[2, 2] = False
        holes = find_holes(PixelMask(flags), 1)
        assert len(holes) == 2
        assert [h.area for h in holes] == [1, 1]
        assert all(h.large for h in holes)

    def test_block_area_and_pixel_coordinates(self):
        flags = np.ones((32, 32), dtype=bool)
        flags[10:22, 8:20] = False
        holes = find_holes(PixelMask(flags), 64)
        assert len(holes) == 1
        hole = holes[0]
        assert hole.area == 144 and hole.large
        rows, cols = np.divmod(hole.pixels, 32)
        assert rows.min() == 10 and rows.max() == 21
        assert cols.min() == 8 and cols.max() == 19

    def test_mixed_sizes_flagged_independently(self):
        flags = np.ones((24, 24), dtype=bool)
        flags[2:12, 2:12] = False
        flags[20, 20] = False
        holes = find_holes(flags, 64)
        assert sorted(h.area for h in holes) == [1, 100]
        by_area = {h.area: h.large for h in holes}
        assert by_area[100] and not by_area[1]


class TestConjugateGradient:
    def test_identity_returns_rhs_exactly(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal(10)
        out = conjugate_gradient(sp.identity(10, format="csr"), b)
        assert np.array_equal(out.x, b)
        assert out.converged
        assert out.iterations == 1

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(1)
        a = _spd(rng, 40)
        b = rng.standard_normal(40)
        out = conjugate_gradient(a, b, tol=1e-12)
        ref = np.linalg.solve(a, b)
        assert out.converged
        assert np.linalg.norm(out.x - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_residual_contract_on_return(self):
        rng = np.random.default_rng(2)
        a = _spd(rng, 30)
        b = rng.standard_normal(30)
        tol = 1e-9
        out = conjugate_gradient(a, b, tol=tol)
        rel = np.linalg.norm(b - a @ out.x) / np.linalg.norm(b)
        assert out.converged
        assert rel <= tol
        assert out.relative_residual <= tol

    def test_zero_rhs_short_circuits(self):
        out = conjugate_gradient(np.eye(4), np.zeros(4))
        assert np.array_equal(out.x, np.zeros(4))
        assert out.converged
        assert out.iterations == 0

    def test_callable_operator_agrees(self):
        rng = np.random.default_rng(3)
        a = _spd(rng, 25)
        b = rng.standard_normal(25)
        ref = np.linalg.solve(a, b)
        out = conjugate_gradient(lambda v: a @ v, b, tol=1e-12)
        assert np.linalg.norm(out.x - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_preconditioner_toggle_agrees(self):
        rng = np.random.default_rng(4)
        a = _spd(rng, 20)
        b = rng.standard_normal(20)
        ref = np.linalg.solve(a, b)
        for jacobi in (True, False):
            out = conjugate_gradient(a, b, tol=1e-12, jacobi=jacobi)
            assert np.linalg.norm(out.x - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_budget_exhaustion_flags_and_reports_best(self):
        rng = np.random.default_rng(5)
        a = _spd(rng, 40)
        b = rng.standard_normal(40)
        out = conjugate_gradient(a, b, tol=1e-12, max_iters=2)
        assert not out.converged
        assert out.iterations == 2
        rel = np.linalg.norm(b - a @ out.x) / np.linalg.norm(b)
        assert rel > 1e-12
        assert np.isclose(out.relative_residual, rel, rtol=1e-8, atol=1e-12)

    def test_warm_start_accepted(self):
        rng = np.random.default_rng(6)
        a = _spd(rng, 15)
        b = rng.standard_normal(15)
        ref = np.linalg.solve(a, b)
        out = conjugate_gradient(a, b, tol=1e-12, x0=ref.copy())
        assert out.iterations <= 2
        assert np.linalg.norm(out.x - ref) <= 1e-10 * np.linalg.norm(ref)

    def test_nonpositive_diagonal_rejected_for_jacobi(self):
        a = np.array([[0.0, 1.0], [1.0, 2.0]])
        with pytest.raises(ValueError, match="diagonal"):
            conjugate_gradient(a, np.ones(2))


class TestGlobalSystem:
    def test_rejects_nonsquare_matrix(self):
        m = sp.csr_matrix(np.ones((2, 3)))
        with pytest.raises(ValueError, match="square"):
            GlobalSystem(matrix=m, rhs=np.zeros(2))

    def test_rejects_rhs_length_mismatch(self):
        with pytest.raises(ValueError, match="rhs"):
            GlobalSystem(matrix=sp.identity(3, format="csr"), rhs=np.zeros(4))

    def test_solve_global_identity_returns_rhs(self):
        b = np.arange(1.0, 6.0)
        out = solve_global(GlobalSystem(matrix=sp.identity(5, format="csr"),
                                        rhs=b))
        assert np.array_equal(out.x, b)
        assert out.converged


def _chain_q(intensity_row, lam=1.0, eps=1e-12, sigma=0.1):
    model = Dl2IntModel(lam=lam, eps=eps, sigma=sigma)
    row = np.asarray(intensity_row, dtype=np.float64).reshape(1, -1)
    return global_quadratic(row, model)


class TestGlobalQuadratic:
    def test_flat_intensity_reduces_to_unweighted_penalty(self):
        model = Dl2IntModel(lam=7.0, eps=1e-3, sigma=0.05)
        q = global_quadratic(np.full((6, 6), 0.3), model)
        op = build_derivative_operator(6, 6)
        ref = build_dl2_precision(op, 7.0, 1e-3).dense()
        assert np.allclose(q.toarray(), ref, atol=1e-12)

    def test_result_is_symmetric_positive_definite(self):
        rng = np.random.default_rng(7)
        model = Dl2IntModel(lam=10.0, eps=1e-4, sigma=0.1)
        q = global_quadratic(rng.random((5, 7)), model).toarray()
        assert np.allclose(q, q.T, atol=1e-12)
        assert np.linalg.eigvalsh(q).min() >= 1e-4 * (1 - 1e-8)


class TestChainSystems:
    def test_harmonic_interpolation_between_fixed_ends(self):
        q = _chain_q(np.zeros(5))
        background = np.array([[0.0, 0.0, 0.0, 0.0, 1.0]])
        flags = np.array([[True, False, False, False, True]])
        holes = find_holes(PixelMask(flags), 3)
        assert len(holes) == 1 and holes[0].large
        system = hole_system(q, holes[0], background)
        out = solve_global(system, tol=1e-12)
        assert np.allclose(out.x, [0.25, 0.5, 0.75], atol=1e-8)

    def test_severed_chain_matches_dense_oracle(self):
        intensity = np.array([0.0, 0.0, 0.0, 1.0, 1.0])
        q = _chain_q(intensity, sigma=1e-3)
        dense = q.toarray()
        assert dense[2, 3] == 0.0  # the contrast edge carries zero weight
        background = np.array([[0.0, 0.5, 0.5, 0.5, 1.0]])
        flags = np.array([[True, False, False, False, True]])
        hole = find_holes(flags, 3)[0]
        out = solve_global(hole_system(q, hole, background), tol=1e-12)
        f = hole.pixels
        p = np.setdiff1d(np.arange(5), f)
        ref = np.linalg.solve(dense[np.ix_(f, f)],
                              -dense[np.ix_(f, p)] @ background.reshape(-1)[p])
        assert np.allclose(out.x, ref, atol=1e-8)
        # constant on each side of the cut, up to epsilon leakage
        assert abs(out.x[0]) <= 1e-9
        assert abs(out.x[1]) <= 1e-9
        assert abs(out.x[2] - 1.0) <= 1e-9

    def test_hole_system_agrees_with_dense_conditional_solve(self):
        rng = np.random.default_rng(8)
        model = Dl2IntModel(lam=20.0, eps=1e-3, sigma=0.1)
        intensity = rng.random((10, 10))
        q = global_quadratic(intensity, model)
        flags = np.ones((10, 10), dtype=bool)
        flags[4:7, 3:6] = False
        hole = find_holes(flags, 9)[0]
        background = rng.random(100).reshape(10, 10)
        system = hole_system(q, hole, background)
        assert np.array_equal(system.pixels, hole.pixels)
        out = solve_global(system, tol=1e-12)
        dense = q.toarray()
        f = hole.pixels
        p = np.setdiff1d(np.arange(100), f)
        ref = np.linalg.solve(dense[np.ix_(f, f)],
                              -dense[np.ix_(f, p)] @ background.reshape(-1)[p])
        assert np.allclose(out.x, ref, atol=1e-8)


class TestRestorationJob:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes"):
            RestorationJob(np.zeros((8, 8)), np.zeros((8, 9)),
                           np.ones((8, 8), dtype=bool), 0.0)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError, match="noise_sigma"):
            RestorationJob(np.zeros((8, 8)), np.zeros((8, 8)),
                           np.ones((8, 8), dtype=bool), -0.1)

    def test_plain_arrays_are_coerced(self):
        job = RestorationJob(np.zeros((8, 8)), np.zeros((8, 8)),
                             np.ones((8, 8), dtype=bool), 0.05)
        assert job.disparity.values.shape == (8, 8)
        assert job.mask.flags.all()


def _toy_gmm(seed=9):
    rng = np.random.default_rng(seed)
    smooth = Dl2Model(100.0, 1e-2).gaussian.covariance
    rough = Dl2Model(1.0, 1e-3).gaussian.covariance
    mean = np.full(64, 0.45)
    return GmmModel(np.array([0.3, 0.7]), mean, np.stack([smooth, rough]))


class TestRestoreImage:
    def test_noiseless_no_holes_is_identity(self):
        rng = np.random.default_rng(10)
        image = rng.random((16, 16))
        job = RestorationJob(image, rng.random((16, 16)),
                             np.ones((16, 16), dtype=bool), 0.0)
        result = restore_image(job, Dl2Model(10.0, 1e-3),
                               Dl2IntModel(100.0, 1e-3, 0.1))
        assert np.allclose(result.estimate, image, atol=1e-8)
        assert result.holes == []
        assert result.solves == []

    def test_fully_observed_denoising_gains_two_db(self):
        disp, intens = generate_synthetic_images(1, 64, 64,
                                                 SyntheticSpec(seed=5))
        clean = disp[0]
        rng = np.random.default_rng(11)
        sigma = 15.0 / 255.0
        noisy = clean + sigma * rng.standard_normal(clean.shape)
        job = RestorationJob(noisy, intens[0],
                             np.ones(clean.shape, dtype=bool), sigma)
        result = restore_image(job, Dl2Model(100.0, 1e-2),
                               Dl2IntModel(1000.0, 1e-2, 0.01))
        assert psnr(clean, result.estimate) >= psnr(clean, noisy) + 2.0

    def test_flat_hole_filled_to_surrounding_constant(self):
        level = 0.4
        disparity = np.full((32, 32), level)
        flags = np.ones((32, 32), dtype=bool)
        flags[10:20, 12:22] = False
        job = RestorationJob(np.where(flags, disparity, 0.0),
                             np.full((32, 32), 0.6), flags, 0.0)
        result = restore_image(job, _toy_gmm(), Dl2IntModel(100.0, 1e-4, 0.1))
        assert len(result.holes) == 1 and result.holes[0].large
        assert len(result.solves) == 1 and result.solves[0].converged
        filled = result.estimate[10:20, 12:22]
        assert np.max(np.abs(filled - level)) <= 1e-3
        assert np.allclose(result.estimate[flags], level, atol=1e-8)

    def test_stage2_only_touches_flagged_holes(self):
        rng = np.random.default_rng(12)
        disparity = rng.random((32, 32))
        flags = np.ones((32, 32), dtype=bool)
        flags[5:15, 5:15] = False   # large, re-solved
        flags[25, 25] = False       # small, stage-1 only
        job = RestorationJob(np.where(flags, disparity, 0.0),
                             rng.random((32, 32)), flags, 0.01)
        result = restore_image(job, _toy_gmm(), Dl2IntModel(100.0, 1e-3, 0.1))
        changed = result.estimate != result.stage1
        hole_mask = np.zeros((32, 32), dtype=bool)
        hole_mask[5:15, 5:15] = True
        assert not changed[~hole_mask].any()
        assert len(result.solves) == 1

    def test_isolated_patch_equals_single_patch_posterior(self):
        rng = np.random.default_rng(13)
        model = _toy_gmm()
        clean = rng.random((8, 8))
        flags = np.ones((8, 8), dtype=bool)
        flags[2, 3] = flags[2, 4] = flags[6, 1] = False
        sigma = 0.05
        noisy = clean + sigma * rng.standard_normal((8, 8))
        job = RestorationJob(np.where(flags, noisy, 0.0), rng.random((8, 8)),
                             flags, sigma)
        result = restore_image(job, model, Dl2IntModel(100.0, 1e-3, 0.1))
        spec = DegradationSpec.inpainting(flags.reshape(-1), sigma)
        y = np.where(flags, noisy, np.nan).reshape(-1)
        direct = bls_gmm(model, y, spec)
        assert np.array_equal(result.stage1.reshape(-1), direct.estimate)
        assert np.array_equal(result.estimate, result.stage1)

    def test_end_to_end_deterministic(self):
        rng = np.random.default_rng(14)
        disparity = rng.random((24, 24))
        flags = np.ones((24, 24), dtype=bool)
        flags[8:18, 8:18] = False
        intensity = rng.random((24, 24))
        job = RestorationJob(np.where(flags, disparity, 0.0), intensity,
                             flags, 0.02)
        first = restore_image(job, _toy_gmm(), Dl2IntModel(100.0, 1e-3, 0.1))
        second = restore_image(job, _toy_gmm(), Dl2IntModel(100.0, 1e-3, 0.1))
        assert np.array_equal(first.estimate, second.estimate)
        assert np.array_equal(first.stage1, second.stage1)


class TestGlobalBaseline:
    def test_rejects_nonpositive_sigma(self):
        job = RestorationJob(np.zeros((8, 8)), np.zeros((8, 8)),
                             np.ones((8, 8), dtype=bool), 0.0)
        with pytest.raises(ValueError, match="positive"):
            restore_image_global(job, Dl2IntModel(100.0, 1e-3, 0.1))

    def test_denoises_synthetic_scene(self):
        disp, intens = generate_synthetic_images(1, 32, 32,
                                                 SyntheticSpec(seed=15))
        clean = disp[0]
        rng = np.random.default_rng(16)
        sigma = 15.0 / 255.0
        noisy = clean + sigma * rng.standard_normal(clean.shape)
        job = RestorationJob(noisy, intens[0],
                             np.ones(clean.shape, dtype=bool), sigma)
        result = restore_image_global(job, Dl2IntModel(1000.0, 1e-2, 0.01))
        assert result.solves[0].converged
        assert psnr(clean, result.estimate) > psnr(clean, noisy)

    def test_fills_holes_through_soft_system(self):
        level = 0.7
        flags = np.ones((24, 24), dtype=bool)
        flags[8:16, 8:16] = False
        job = RestorationJob(np.where(flags, level, 0.0),
                             np.full((24, 24), 0.5), flags, 0.01)
        result = restore_image_global(job, Dl2IntModel(100.0, 1e-6, 0.1))
        assert np.max(np.abs(result.estimate[~flags] - level)) <= 1e-2
