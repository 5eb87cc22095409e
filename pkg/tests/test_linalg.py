import numpy as np
import pytest

from duallora import linalg as la

from oracles import jacobi_eigvals_sym, matmul_triple_loop, rel_err


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((3, 5))
        assert np.array_equal(la.matmul(np.eye(3), m), m)

    def test_hand_arithmetic(self):
        a = np.array([[1.0, 2.0]])
        b = np.array([[3.0], [4.0]])
        assert np.allclose(la.matmul(a, b), [[11.0]])

    def test_matches_triple_loop_exactly(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = rng.standard_normal((4, 5))
            b = rng.standard_normal((5, 3))
            assert np.array_equal(la.matmul(a, b), matmul_triple_loop(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(la.DimensionError):
            la.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_flop_counter(self):
        a = np.zeros((4, 5))
        b = np.zeros((5, 3))
        with la.FLOPS:
            la.matmul(a, b)
            la.matmul(a, b)
            assert la.FLOPS.total == 2 * (2 * 4 * 5 * 3)
        # disabled outside the context
        before = la.FLOPS.total
        la.matmul(a, b)
        assert la.FLOPS.total == before


class TestThinSvd:
    def test_identity(self):
        res = la.thin_svd(np.eye(4))
        assert res.sigma == pytest.approx(np.ones(4))

    def test_rank_one_outer_product(self):
        rng = np.random.default_rng(1)
        u = rng.standard_normal(6)
        u *= 2.0 / np.linalg.norm(u)
        v = rng.standard_normal(9)
        v *= 3.0 / np.linalg.norm(v)
        res = la.thin_svd(np.outer(u, v))
        assert res.sigma[0] == pytest.approx(6.0, rel=1e-12)
        assert np.all(res.sigma[1:] <= 1e-12)

    def test_against_jacobi_eigensolver(self):
        rng = np.random.default_rng(2)
        m = rng.standard_normal((5, 8))
        sigma = la.thin_svd(m).sigma
        eigs = jacobi_eigvals_sym(m @ m.T)
        assert rel_err(sigma**2, eigs) <= 1e-9

    @pytest.mark.parametrize("shape", [(5, 5), (8, 3), (3, 8), (32, 64), (64, 32)])
    def test_reconstruction_and_orthonormality(self, shape):
        rng = np.random.default_rng(hash(shape) % 2**32)
        for _ in range(20):
            m = rng.standard_normal(shape)
            res = la.thin_svd(m)
            recon = res.u @ np.diag(res.sigma) @ res.vt
            scale = np.max(np.abs(m))
            assert np.max(np.abs(recon - m)) <= 1e-9 * scale
            assert np.all(np.diff(res.sigma) <= 0.0)
            assert np.all(res.sigma >= 0.0)
            k = res.vt.shape[0]
            assert np.max(np.abs(res.vt @ res.vt.T - np.eye(k))) <= 1e-8

    def test_zero_matrix(self):
        res = la.thin_svd(np.zeros((3, 4)))
        assert np.all(res.sigma == 0.0)
        assert np.max(np.abs(res.vt @ res.vt.T - np.eye(3))) <= 1e-8

    def test_rejects_non_finite(self):
        with pytest.raises(la.ParameterError):
            la.thin_svd(np.array([[1.0, np.nan]]))


class TestSelectBasis:
    def _svd_from_sigma(self, sigma, d=4):
        k = len(sigma)
        vt = np.eye(d)[:k]
        return la.SvdResult(u=np.eye(k), sigma=np.asarray(sigma, float), vt=vt)

    def test_all_energy_first_component(self):
        basis = la.select_basis(self._svd_from_sigma([1.0, 0.0, 0.0]), 0.95)
        assert basis.rank == 1

    def test_rejects_unordered_sigma(self):
        with pytest.raises(la.ParameterError):
            la.select_basis(self._svd_from_sigma([3.0, 4.0]), 0.95)

    def test_hand_energy_criterion(self):
        # cumulative energies 4/6, 5/6, 6/6 with epsilon 0.95 -> k = 3
        basis = la.select_basis(self._svd_from_sigma([2.0, 1.0, 1.0]), 0.95)
        assert basis.rank == 3

    def test_zero_sigma_gives_empty(self):
        basis = la.select_basis(self._svd_from_sigma([0.0, 0.0]), 0.5)
        assert basis.rank == 0
        assert basis.dim == 4

    @pytest.mark.parametrize("eps", [-0.1, 0.0, 1.0001, 2.0])
    def test_epsilon_domain(self, eps):
        with pytest.raises(la.ParameterError):
            la.select_basis(self._svd_from_sigma([1.0]), eps)

    def test_monotone_in_epsilon(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            sigma = np.sort(rng.uniform(0, 5, size=6))[::-1]
            svd = self._svd_from_sigma(sigma, d=8)
            eps_grid = sorted(rng.uniform(0.01, 1.0, size=5))
            ranks = [la.select_basis(svd, e).rank for e in eps_grid]
            assert ranks == sorted(ranks)

    def test_epsilon_one_takes_full_energy(self):
        basis = la.select_basis(self._svd_from_sigma([2.0, 1.0, 0.0]), 1.0)
        assert basis.rank == 2


class TestProjections:
    def test_empty_basis_identity_and_annihilation(self):
        rng = np.random.default_rng(4)
        m = rng.standard_normal((3, 5))
        phi = la.empty_basis(3)
        assert np.array_equal(la.project_out(m, phi), m)
        assert np.array_equal(la.project_into(m, phi), np.zeros_like(m))

    def test_full_span(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((4, 6))
        phi = la.Basis(np.eye(4))
        assert np.max(np.abs(la.project_out(m, phi))) <= 1e-12
        assert np.allclose(la.project_into(m, phi), m, atol=1e-12)

    def test_hand_projection(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        e1 = la.Basis(np.array([[1.0, 0.0]]))
        e2 = la.Basis(np.array([[0.0, 1.0]]))
        assert np.allclose(la.project_out(m, e1), [[0.0, 0.0], [3.0, 4.0]])
        assert np.allclose(la.project_into(m, e2), [[0.0, 0.0], [3.0, 4.0]])

    def test_dimension_mismatch(self):
        phi = la.Basis(np.eye(3))
        with pytest.raises(la.DimensionError):
            la.project_out(np.zeros((4, 2)), phi)
        with pytest.raises(la.DimensionError):
            la.project_into(np.zeros((4, 2)), phi)

    def _random_basis(self, rng, r, d):
        q = la.thin_svd(rng.standard_normal((r, d))).vt
        return la.Basis(q[:r])

    def test_idempotence(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            d = rng.integers(2, 9)
            r = rng.integers(0, d + 1)
            phi = self._random_basis(rng, r, d) if r else la.empty_basis(d)
            m = rng.standard_normal((d, 5))
            once = la.project_out(m, phi)
            twice = la.project_out(once, phi)
            scale = max(np.max(np.abs(m)), 1e-12)
            assert np.max(np.abs(twice - once)) <= 1e-10 * scale
            # residual has no component left in the basis
            if phi.rank:
                assert np.max(np.abs(phi.vectors @ once)) <= 1e-10 * scale

    def test_orthogonal_decomposition(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            d = rng.integers(2, 9)
            r = rng.integers(0, d + 1)
            phi = self._random_basis(rng, r, d) if r else la.empty_basis(d)
            m = rng.standard_normal((d, 4))
            total = la.project_out(m, phi) + la.project_into(m, phi)
            assert np.max(np.abs(total - m)) <= 1e-10 * max(np.max(np.abs(m)), 1e-12)


class TestSoftmax:
    def test_uniform_logits(self):
        assert np.allclose(la.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        p = la.softmax_rows(rng.standard_normal((6, 9)) * 30.0)
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12

    def test_saturated_jacobian_is_zero(self):
        h = la.softmax_jacobian(np.array([1.0, 0.0]))
        assert np.max(np.abs(h)) == 0.0

    def test_jacobian_rows_sum_to_zero(self):
        rng = np.random.default_rng(9)
        p = la.softmax_rows(rng.standard_normal((1, 5)))[0]
        h = la.softmax_jacobian(p)
        assert np.max(np.abs(h.sum(axis=1))) <= 1e-12

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        z = rng.standard_normal(3)
        p = la.softmax_rows(z[None, :])[0]
        h = la.softmax_jacobian(p)
        eps = 1e-6
        fd = np.zeros((3, 3))
        for j in range(3):
            zp = z.copy()
            zp[j] += eps
            zm = z.copy()
            zm[j] -= eps
            fd[:, j] = (la.softmax_rows(zp[None, :])[0] - la.softmax_rows(zm[None, :])[0]) / (2 * eps)
        assert rel_err(h, fd) <= 1e-6

    def test_jacobian_rejects_unnormalized(self):
        with pytest.raises(la.ParameterError):
            la.softmax_jacobian(np.array([0.7, 0.7]))
