import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_nodes, oracle_phi, oracle_project, random_field
from spectral_sls.model import raised_cosine
from spectral_sls.spectral import (
    DEFAULT_QUAD_N,
    Domain2D,
    SpectralField,
    basis_matrix,
    conv_apply,
    conv_blocks,
    conv_matrix,
    conv_scale,
    eval_basis,
    flat_index,
    kappa,
    l2_norm_sq,
    live_mask,
    n_coeffs,
    project,
    project_samples,
    read_coeff_csv,
    shift_coefficients,
    synthesize_grid,
    synthesize_tensor,
    write_coeff_csv,
)


# ---------------------------------------------------------------- domain and layout

class TestDomain:
    def test_square_has_minimal_periods(self, dom):
        assert (dom.lambda1, dom.lambda2) == (8.0, 8.0)
        assert dom.quad_n == DEFAULT_QUAD_N

    def test_period_too_small_rejected(self):
        with pytest.raises(ValueError):
            Domain2D(-2, 2, -2, 2, 7.9, 8, 256)

    def test_domain_outside_cell_rejected(self):
        with pytest.raises(ValueError):
            Domain2D(1, 5, -2, 2, 8, 8, 256)

    def test_quad_n_resolution_check(self):
        d = Domain2D.square(2.0, quad_n=40)
        d.check_k(9)
        with pytest.raises(ValueError):
            d.check_k(10)

    def test_layout(self):
        k = 12
        assert n_coeffs(k) == 676
        assert flat_index(0, 0, 1, k) == 0
        assert flat_index(0, 1, 1, k) == 4
        assert flat_index(1, 0, 1, k) == 4 * 13
        assert flat_index(k, k, 4, k) == 675

    def test_field_rejects_bad_input(self):
        with pytest.raises(ValueError):
            SpectralField(2, np.zeros(35))
        bad = np.zeros(36)
        bad[3] = np.nan
        with pytest.raises(ValueError):
            SpectralField(2, bad)

    def test_field_is_read_only(self):
        f = SpectralField.zeros(2)
        with pytest.raises(ValueError):
            f.coeffs[0, 0, 0] = 1.0


class TestEvalBasis:
    def test_constant_mode(self, dom):
        assert eval_basis((0, 0, 4), (0.3, -1.7), dom) == 1.0

    def test_dead_mode(self, dom):
        assert eval_basis((1, 0, 1), (0.3, -1.7), dom) == 0.0

    @pytest.mark.parametrize("m,n", [(1, 1), (3, 7), (12, 12)])
    def test_origin(self, dom, m, n):
        assert eval_basis((m, n, 4), (0, 0), dom) == 1.0
        for i in (1, 2, 3):
            assert eval_basis((m, n, i), (0, 0), dom) == 0.0

    def test_matrix_matches_written_out_formulas(self, dom, rng):
        pts = rng.uniform(-2, 2, (50, 2))
        P = basis_matrix(pts, 5, dom)
        for m in range(6):
            for n in range(6):
                for i in range(1, 5):
                    ref = oracle_phi(m, n, i, pts[:, 0], pts[:, 1], 8, 8)
                    np.testing.assert_allclose(P[:, flat_index(m, n, i, 5)], ref, atol=1e-14)
                    assert math.isclose(eval_basis((m, n, i), pts[0], dom), ref[0], abs_tol=1e-14)


class TestOrthogonality:
    def test_gram_matrix_k12(self, dom):
        k, n = 12, 64  # products have degree <= 24 < n, so the midpoint rule is exact
        g, h = oracle_nodes(8.0, n)
        Z1, Z2 = np.meshgrid(g, g, indexing="ij")
        P = basis_matrix(np.stack([Z1.ravel(), Z2.ravel()], axis=1), k, dom)
        gram = P.T @ P * h * h
        expected = np.zeros(n_coeffs(k))
        for m in range(k + 1):
            for nn in range(k + 1):
                for i in range(1, 5):
                    if live_mask(k)[m, nn, i - 1]:
                        expected[flat_index(m, nn, i, k)] = 64.0 / kappa(m, nn)
        assert np.max(np.abs(gram - np.diag(expected))) < 1e-8


class TestProject:
    def test_constant(self, dom):
        f = project(lambda z1, z2: np.ones_like(z1 + z2), 12, dom)
        expected = np.zeros((13, 13, 4))
        expected[0, 0, 3] = 1.0
        assert np.max(np.abs(f.coeffs - expected)) < 1e-12

    def test_single_mode(self, dom):
        f = project(lambda z1, z2: oracle_phi(2, 3, 1, z1, z2, 8, 8), 12, dom)
        expected = np.zeros((13, 13, 4))
        expected[2, 3, 0] = 1.0
        assert np.max(np.abs(f.coeffs - expected)) < 1e-10

    def test_matches_one_at_a_time_quadrature(self, dom):
        n = 128
        g, _ = oracle_nodes(8.0, n)
        Z1, Z2 = np.meshgrid(g, g, indexing="ij")
        vals = raised_cosine(Z1 - 0.3, Z2 + 0.2, 1.5)
        fast = project_samples(vals, 6, dom)
        slow = oracle_project(vals, 6, 8.0, 8.0)
        assert np.max(np.abs(fast.coeffs - slow)) < 1e-13

    @pytest.mark.parametrize("r,tol", [(0.5, 1e-8), (1.5, 1e-9)])
    def test_quadrature_refinement(self, dom, r, tol):
        f = lambda z1, z2: raised_cosine(z1, z2, r)
        base = project(f, 12, dom)
        fine = project(f, 12, dom, quad_n=2 * DEFAULT_QUAD_N)
        assert np.max(np.abs(base.coeffs - fine.coeffs)) < tol

    def test_rejects_non_finite(self, dom):
        with pytest.raises(ValueError):
            project(lambda z1, z2: np.where(z1 > 0, np.inf, 0.0) + 0 * z2, 4, dom)

    def test_rejects_too_few_nodes(self, dom):
        with pytest.raises(ValueError):
            project(lambda z1, z2: z1 + z2, 12, dom, quad_n=40)


class TestRoundTrip:
    def test_project_synthesize_band_limited(self, dom, rng):
        f = random_field(rng, 12, kmax=5)
        fn = lambda z1, z2: synthesize_tensor(f, z1.ravel(), z2.ravel(), dom)
        again = project(fn, 12, dom, quad_n=64)
        assert np.max(np.abs(again.coeffs - f.coeffs)) < 1e-10

    def test_synthesize_of_projection_reproduces_function(self, dom, rng):
        f = random_field(rng, 12)
        fn = lambda z1, z2: synthesize_tensor(f, z1.ravel(), z2.ravel(), dom)
        proj = project(fn, 12, dom, quad_n=64)
        pts = rng.uniform(-2, 2, (200, 2))
        assert np.max(np.abs(synthesize_grid(proj, pts, dom) - synthesize_grid(f, pts, dom))) < 1e-10

    def test_constant_field_synthesizes_to_one(self, dom, rng):
        c = np.zeros((13, 13, 4))
        c[0, 0, 3] = 1.0
        pts = rng.uniform(-2, 2, (30, 2))
        np.testing.assert_allclose(synthesize_grid(SpectralField(12, c), pts, dom), 1.0, atol=1e-15)

    def test_grid_and_tensor_synthesis_agree(self, dom, rng):
        f = random_field(rng, 12)
        g1, g2 = np.linspace(-2, 2, 7), np.linspace(-2, 2, 9)
        Z = np.stack(np.meshgrid(g1, g2, indexing="ij"), axis=-1)
        np.testing.assert_allclose(synthesize_tensor(f, g1, g2, dom), synthesize_grid(f, Z, dom),
                                   atol=1e-12)

    def test_parseval(self, dom, rng):
        f = random_field(rng, 6)
        g, h = oracle_nodes(8.0, 64)
        vals = synthesize_tensor(f, g, g, dom)
        assert math.isclose(l2_norm_sq(f, dom), np.sum(vals ** 2) * h * h, rel_tol=1e-12)


class TestShift:
    def test_zero_shift_is_identity(self, dom, rng):
        f = random_field(rng, 12)
        assert shift_coefficients(f, (0.0, 0.0), dom).allclose(f, 1e-15)

    def test_one_dimensional_sine(self, dom):
        m, s, lam = 3, 0.37, 8.0
        c = np.zeros((13, 13, 4))
        c[m, 0, 2] = 1.0  # sin(w m z1) * cos(0)
        out = shift_coefficients(SpectralField(12, c), (s, 0.0), dom)
        w = 2 * np.pi * m / lam
        expected = np.zeros((13, 13, 4))
        expected[m, 0, 2] = math.cos(w * s)   # sin(a - b) = sin a cos b - cos a sin b
        expected[m, 0, 3] = -math.sin(w * s)
        assert np.max(np.abs(out.coeffs - expected)) < 1e-15

    def test_shift_matches_projection_of_shifted_kernel(self, model, dom):
        zt = (-0.26, 0.56)
        via_shift = shift_coefficients(model.a_coeffs, zt, dom)
        via_projection = project(lambda z1, z2: raised_cosine(z1 - zt[0], z2 - zt[1], 1.5), 12, dom)
        assert np.max(np.abs(via_shift.coeffs - via_projection.coeffs)) < 1e-8

    @settings(max_examples=40, deadline=None)
    @given(st.tuples(st.floats(-2, 2), st.floats(-2, 2)), st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
           st.integers(0, 2 ** 31))
    def test_group_property(self, zt1, zt2, seed):
        dom = Domain2D.square(2.0, quad_n=64)
        f = random_field(np.random.default_rng(seed), 8)
        two_steps = shift_coefficients(shift_coefficients(f, zt2, dom), zt1, dom)
        one_step = shift_coefficients(f, (zt1[0] + zt2[0], zt1[1] + zt2[1]), dom)
        assert np.max(np.abs(two_steps.coeffs - one_step.coeffs)) < 1e-12 * max(1.0, np.abs(f.coeffs).max())

    @settings(max_examples=25, deadline=None)
    @given(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), st.integers(0, 2 ** 31))
    def test_shift_moves_the_function(self, zt, seed):
        dom = Domain2D.square(2.0, quad_n=64)
        rng = np.random.default_rng(seed)
        f = random_field(rng, 8)
        z = rng.uniform(-1, 1, (10, 2))
        lhs = synthesize_grid(shift_coefficients(f, zt, dom), z, dom)
        rhs = synthesize_grid(f, z - np.asarray(zt), dom)
        assert np.max(np.abs(lhs - rhs)) < 1e-11


class TestConvolution:
    def test_cos_cos_entry_gives_identity_pattern(self, dom):
        c = np.zeros((13, 13, 4))
        c[2, 5, 3] = 1.0
        np.testing.assert_array_equal(conv_matrix(SpectralField(12, c), 2, 5), np.eye(4))

    def test_zero_kernel(self):
        assert not np.any(conv_matrix(SpectralField.zeros(3), 1, 2))

    def test_matches_brute_force_periodic_convolution(self, rng):
        """Fixes both the per-mode sign pattern and the normalisation constant."""
        dom = Domain2D.square(2.0, quad_n=64)
        k, n = 3, 32
        a, x = random_field(rng, k), random_field(rng, k)
        g, h = oracle_nodes(8.0, n)
        Z1, Z2 = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([Z1.ravel(), Z2.ravel()], axis=1)
        x_vals = synthesize_grid(x, pts, dom)
        a_diff = synthesize_grid(a, (pts[:, None, :] - pts[None, :, :]).reshape(-1, 2), dom)
        conv_vals = (a_diff.reshape(n * n, n * n) @ x_vals * h * h).reshape(n, n)
        expected = oracle_project(conv_vals, k, 8.0, 8.0)
        got = conv_apply(a, x, dom)
        assert np.max(np.abs(got.coeffs - expected)) < 1e-6 * max(1.0, np.abs(expected).max())

    def test_normalisation_constant(self, dom):
        assert conv_scale(0, 0, dom) == 64.0
        assert conv_scale(0, 3, dom) == 32.0
        assert conv_scale(2, 3, dom) == 16.0

    def test_constant_kernel_keeps_only_the_mean(self, dom, rng):
        c = np.zeros((13, 13, 4))
        c[0, 0, 3] = 1.0
        x = random_field(rng, 12)
        out = conv_apply(SpectralField(12, c), x, dom)
        expected = np.zeros((13, 13, 4))
        expected[0, 0, 3] = 64.0 * x.coeffs[0, 0, 3]   # int x over the cell
        assert np.max(np.abs(out.coeffs - expected)) < 1e-12

    def test_kernel_against_fine_quadrature_of_true_integral(self, model, dom):
        zt = (-0.26, 0.56)
        spectral = conv_apply(model.a_coeffs, shift_coefficients(model.a_coeffs, zt, dom), dom)
        n = 1024
        g, h = oracle_nodes(8.0, n)
        off = (np.fft.fftfreq(n) * n) * h
        kern = raised_cosine(off[:, None], off[None, :], 1.5)
        Z1, Z2 = np.meshgrid(g, g, indexing="ij")
        shifted = raised_cosine(Z1 - zt[0], Z2 - zt[1], 1.5)
        true = np.fft.irfft2(np.fft.rfft2(shifted) * np.fft.rfft2(kern), s=(n, n)) * h * h
        expected = project_samples(true, 12, dom)
        rel = np.linalg.norm(spectral.coeffs - expected.coeffs) / np.linalg.norm(expected.coeffs)
        assert rel < 1e-4

    def test_commutative_for_even_fields(self, model, dom):
        b = project(lambda z1, z2: np.exp(-(z1 ** 2 + z2 ** 2)), 12, dom)
        lhs = conv_apply(model.a_coeffs, b, dom)
        rhs = conv_apply(b, model.a_coeffs, dom)
        assert np.max(np.abs(lhs.coeffs - rhs.coeffs)) < 1e-8

    def test_dead_rows_stay_zero(self, model, dom, rng):
        out = conv_apply(random_field(rng, 12), random_field(rng, 12), dom)
        assert not np.any(out.coeffs[~live_mask(12)])
        assert not np.any(conv_blocks(model.a_coeffs, dom)[~live_mask(12)])


class TestCoefficientFile:
    def test_bitwise_round_trip(self, tmp_path, dom, rng):
        f = random_field(rng, 12)
        write_coeff_csv(tmp_path / "f.csv", f, dom, "test")
        back, meta = read_coeff_csv(tmp_path / "f.csv")
        assert back == f
        assert meta == {"k": 12, "lambda1": 8.0, "lambda2": 8.0, "role": "test"}

    def test_header(self, tmp_path, dom):
        write_coeff_csv(tmp_path / "f.csv", SpectralField.zeros(1), dom, "a")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "k,lambda1,lambda2,role"
        assert lines[2] == "m,n,i,value"
        assert lines[3].startswith("0,0,1,")
        assert lines[4].startswith("0,0,2,")
        assert len(lines) == 3 + 16

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n3,4\n")
        with pytest.raises(ValueError):
            read_coeff_csv(tmp_path / "x.csv")
