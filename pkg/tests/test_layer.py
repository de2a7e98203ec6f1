import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlayer.errors import DimensionError, DomainError, FormatError
from mlayer.layer import (Dims, MLayerParams, backward, build_matrix, embed, forward, from_json,
                          init_periodic, init_standard, load_model, param_count, reparameterize,
                          save_model, to_json)
from mlayer.linexp import expm_taylor_oracle

TENSORS = ("U", "u0", "T", "B", "S", "V")


def random_params(dims, seed, scale=0.3):
    return init_standard(dims, seed, sigma=scale)


def fd_gradients(params, x, g_out, step=1e-5, reg=0.0):
    """Central differences of <g_out, sum forward> (+ reg * ||exp M||^2)."""
    def objective(p):
        out, cache = forward(p, x, return_cache=True)
        val = float(np.sum(g_out * out))
        if reg:
            val += reg * float(np.sum(cache.expM ** 2))
        return val

    grads = {}
    for name in TENSORS:
        arr = getattr(params, name)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = objective(params)
            arr[idx] = orig - step
            down = objective(params)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def max_rel_error(analytic, numeric):
    errs = []
    for name in TENSORS:
        a, b = getattr(analytic, name), numeric[name]
        errs.append(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
    return max(errs)


def cross_params():
    """d=3, n=7 layout whose exp(M) has phi0*phi1 at (0,4) and phi1*phi2^2 at (0,6)."""
    dims = Dims(3, 3, 7, 2)
    p = MLayerParams.zeros(dims)
    p.U[:] = np.eye(3)
    p.T[0, 0, 1] = p.T[1, 0, 2] = p.T[2, 0, 3] = 1.0
    p.T[0, 2, 4] = p.T[2, 2, 5] = 2.0
    p.T[2, 5, 6] = 3.0
    p.S[0, 0, 4] = p.S[1, 0, 6] = 1.0
    return p


class TestDims:
    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            Dims(0, 1, 1, 1)
        with pytest.raises(ValueError):
            Dims(1, 1, -2, 1)

    def test_param_count_table(self):
        assert param_count(Dims(784, 35, 30, 10)) == 68885
        assert param_count(Dims(3072, 35, 30, 10)) == 148965
        assert param_count(Dims(1, 1, 1, 1)) == 6

    def test_embedding_share(self):
        dims = Dims(3072, 35, 30, 10)
        p = MLayerParams.zeros(dims)
        assert p.U.size + p.u0.size == 107555

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 5), st.integers(1, 3))
    def test_param_count_matches_allocation(self, p, d, n, h):
        dims = Dims(p, d, n, h)
        assert init_standard(dims, 0).size() == param_count(dims)


class TestParams:
    def test_shape_mismatch(self):
        p = MLayerParams.zeros(Dims(2, 2, 2, 1))
        with pytest.raises(DimensionError):
            MLayerParams(U=p.U, u0=p.u0, T=p.T, B=np.zeros((3, 3)), S=p.S, V=p.V)

    def test_non_finite(self):
        p = MLayerParams.zeros(Dims(2, 2, 2, 1))
        U = p.U.copy()
        U[0, 0] = np.nan
        with pytest.raises(DomainError):
            MLayerParams(U=U, u0=p.u0, T=p.T, B=p.B, S=p.S, V=p.V)


class TestEmbedAndMatrix:
    def test_embed_identity(self):
        p = MLayerParams.zeros(Dims(2, 2, 1, 1))
        p.U[:] = np.eye(2)
        np.testing.assert_array_equal(embed(p, [1.0, 2.0]), [1.0, 2.0])

    def test_embed_bias_only(self):
        p = MLayerParams.zeros(Dims(3, 1, 1, 1))
        p.u0[:] = 0.5
        np.testing.assert_array_equal(embed(p, [7.0, -1.0, 2.0]), [0.5])

    def test_embed_wrong_length(self):
        p = MLayerParams.zeros(Dims(3, 1, 1, 1))
        with pytest.raises(DimensionError):
            embed(p, [1.0, 2.0])

    def test_matrix_is_bias_without_generators(self):
        p = random_params(Dims(3, 2, 4, 1), 0)
        p.T[:] = 0
        p.u0[:] = 0
        for x in np.random.default_rng(1).standard_normal((5, 3)):
            np.testing.assert_array_equal(build_matrix(p, x), p.B)

    def test_feature_cross_matrix(self):
        p = cross_params()
        f0, f1, f2 = 2.0, 3.0, 5.0
        expected = np.zeros((7, 7))
        expected[0, 1], expected[0, 2], expected[0, 3] = f0, f1, f2
        expected[2, 4], expected[2, 5], expected[5, 6] = 2 * f0, 2 * f2, 3 * f2
        np.testing.assert_array_equal(build_matrix(p, [f0, f1, f2]), expected)

    def test_affine_in_input(self):
        rng = np.random.default_rng(2)
        p = random_params(Dims(4, 3, 5, 2), 3)
        for _ in range(20):
            x1, x2 = rng.standard_normal((2, 4))
            lhs = build_matrix(p, x1 + x2) - build_matrix(p, x2)
            rhs = build_matrix(p, x1) - build_matrix(p, np.zeros(4))
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestForward:
    def test_zero_readout_gives_bias(self):
        p = random_params(Dims(3, 2, 4, 2), 4)
        p.S[:] = 0
        for x in np.random.default_rng(5).standard_normal((4, 3)):
            np.testing.assert_array_equal(forward(p, x), p.V)

    def test_feature_cross_outputs(self):
        np.testing.assert_allclose(forward(cross_params(), [2.0, 3.0, 5.0]), [6.0, 75.0], rtol=1e-13)

    def test_matches_oracle_pipeline(self):
        rng = np.random.default_rng(6)
        p = random_params(Dims(5, 3, 6, 3), 7)
        for x in rng.standard_normal((10, 5)):
            phi = p.U @ x + p.u0
            M = p.B + sum(phi[a] * p.T[a] for a in range(3))
            E = expm_taylor_oracle(M)
            ref = p.V + np.array([np.sum(p.S[m] * E) for m in range(3)])
            np.testing.assert_allclose(forward(p, x), ref, rtol=1e-10)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(8)
        p = random_params(Dims(4, 2, 5, 3), 9)
        X = rng.standard_normal((6, 4))
        batch = forward(p, X)
        for i, x in enumerate(X):
            np.testing.assert_allclose(batch[i], forward(p, x), rtol=1e-13)

    def test_cache_contents(self):
        p = random_params(Dims(3, 2, 4, 1), 10)
        x = np.array([0.1, -0.2, 0.3])
        out, cache = forward(p, x, return_cache=True)
        np.testing.assert_allclose(cache.phi, embed(p, x))
        np.testing.assert_allclose(cache.M, build_matrix(p, x))
        np.testing.assert_allclose(out, forward(p, x))


class TestBackward:
    @pytest.mark.parametrize("dims", [Dims(3, 2, 4, 2), Dims(5, 4, 6, 3)])
    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, dims, seed):
        rng = np.random.default_rng(100 + seed)
        p = random_params(dims, seed)
        x = rng.standard_normal(dims.p)
        g_out = rng.standard_normal(dims.h)
        grads = backward(p, x, g_out)
        assert max_rel_error(grads, fd_gradients(p, x, g_out)) < 1e-5

    def test_activity_regularizer_gradient(self):
        rng = np.random.default_rng(11)
        dims = Dims(3, 2, 4, 2)
        p = random_params(dims, 12)
        x = rng.standard_normal(3)
        g_out = rng.standard_normal(2)
        lam = 0.3
        _, cache = forward(p, x, return_cache=True)
        grads = backward(p, x, g_out, cache=cache, g_expm=2 * lam * cache.expM)
        assert max_rel_error(grads, fd_gradients(p, x, g_out, reg=lam)) < 1e-5

    def test_output_bias_gradient_is_upstream(self):
        p = random_params(Dims(2, 2, 3, 3), 13)
        g = np.array([1.5, -2.0, 0.25])
        np.testing.assert_array_equal(backward(p, [0.3, 0.4], g).V, g)

    def test_no_generators_no_embedding_gradient(self):
        p = random_params(Dims(2, 2, 3, 1), 14)
        p.T[:] = 0
        grads = backward(p, [0.3, 0.4], [1.0])
        assert np.all(grads.U == 0) and np.all(grads.u0 == 0)

    def test_batch_gradient_is_sum(self):
        rng = np.random.default_rng(15)
        p = random_params(Dims(3, 2, 4, 2), 16)
        X = rng.standard_normal((5, 3))
        G = rng.standard_normal((5, 2))
        total = backward(p, X, G)
        for name in TENSORS:
            summed = sum(getattr(backward(p, X[i], G[i]), name) for i in range(5))
            np.testing.assert_allclose(getattr(total, name), summed, rtol=1e-12, atol=1e-14)

    def test_bad_upstream_shape(self):
        p = random_params(Dims(2, 2, 3, 2), 17)
        with pytest.raises(DimensionError):
            backward(p, [0.1, 0.2], [1.0, 2.0, 3.0])


class TestInit:
    def test_deterministic(self):
        a = init_standard(Dims(3, 2, 4, 2), 42)
        b = init_standard(Dims(3, 2, 4, 2), 42)
        for name in TENSORS:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_standard_statistics(self):
        p = init_standard(Dims(1000, 1000, 1, 1), 0)
        draws = p.U.ravel()
        assert draws.size == 10 ** 6
        assert abs(draws.mean()) <= 0.001
        assert 0.0495 <= draws.std() <= 0.0505

    def test_periodic_statistics(self):
        diag, off = [], []
        for seed in range(200):
            p = init_periodic(Dims(1, 1, 6, 1), seed)
            for A in (p.B, p.T[0]):
                diag.append(np.diag(A))
                off.append(A[~np.eye(6, dtype=bool)])
        diag, off = np.concatenate(diag), np.concatenate(off)
        assert abs(diag.mean() + 10) < 0.01
        assert abs(off.mean()) < 0.01
        assert off.std() == pytest.approx(0.01, rel=0.1)

    def test_periodic_embedding_and_readout(self):
        p = init_periodic(Dims(500, 400, 2, 1), 1)
        assert p.U.mean() == pytest.approx(0.1, abs=0.001)
        assert p.U.std() == pytest.approx(0.05, rel=0.02)

    def test_periodic_initial_matrix_is_stable(self):
        for seed in range(100):
            p = init_periodic(Dims(1, 1, 6, 1), seed)
            M = build_matrix(p, [0.0])
            off_rows = np.abs(M).sum(axis=1) - np.abs(np.diag(M))
            # Gershgorin: every disc lies in the left half plane
            assert np.all(np.diag(M) + off_rows < 0)
            assert np.all(np.linalg.eigvals(M).real < 0)


class TestReparameterize:
    def setup_method(self):
        self.dims = Dims(4, 3, 5, 2)
        self.params = random_params(self.dims, 20)
        self.X = np.random.default_rng(21).standard_normal((100, 4))

    def test_identity(self):
        q = reparameterize(self.params, np.eye(3), np.eye(5))
        for name in TENSORS:
            np.testing.assert_allclose(getattr(q, name), getattr(self.params, name), atol=1e-15)

    def test_orthogonal_conjugation(self):
        Q, _ = np.linalg.qr(np.random.default_rng(22).standard_normal((5, 5)))
        q = reparameterize(self.params, np.eye(3), Q)
        np.testing.assert_allclose(forward(q, self.X), forward(self.params, self.X), atol=1e-9)

    def test_embedding_change(self):
        rng = np.random.default_rng(23)
        P = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
        assert np.linalg.cond(P) < 100
        q = reparameterize(self.params, P, np.eye(5))
        np.testing.assert_allclose(forward(q, self.X), forward(self.params, self.X), atol=1e-8)

    def test_singular(self):
        P = np.ones((3, 3))
        with pytest.raises(DomainError):
            reparameterize(self.params, P, np.eye(5))
        with pytest.raises(DomainError):
            reparameterize(self.params, np.eye(3), np.zeros((5, 5)))

    def test_wrong_shape(self):
        with pytest.raises(DimensionError):
            reparameterize(self.params, np.eye(2), np.eye(5))


class TestSerialization:
    def test_round_trip_exact(self, tmp_path):
        p = init_standard(Dims(3, 2, 4, 2), 30)
        path = tmp_path / "m.json"
        save_model(path, p, {"note": "x"})
        q, extra = load_model(path)
        assert extra == {"note": "x"}
        for name in TENSORS:
            np.testing.assert_array_equal(getattr(q, name), getattr(p, name))
        assert to_json(q, extra) == path.read_text()

    def test_document_layout(self):
        p = init_standard(Dims(2, 1, 2, 1), 31)
        obj = json.loads(to_json(p))
        assert obj["version"] == 1
        assert obj["dims"] == {"p": 2, "d": 1, "n": 2, "h": 1}
        assert obj["tensors"]["T"]["shape"] == [1, 2, 2]
        assert len(obj["tensors"]["T"]["data"]) == 4

    def test_bad_version(self):
        text = to_json(init_standard(Dims(1, 1, 1, 1), 0)).replace('"version":1', '"version":7')
        with pytest.raises(FormatError):
            from_json(text)

    def test_bad_shape(self):
        obj = json.loads(to_json(init_standard(Dims(1, 1, 2, 1), 0)))
        obj["tensors"]["B"]["shape"] = [4]
        with pytest.raises(FormatError):
            from_json(json.dumps(obj))

    def test_truncated(self):
        text = to_json(init_standard(Dims(1, 1, 1, 1), 0))
        with pytest.raises(FormatError):
            from_json(text[:-10])
