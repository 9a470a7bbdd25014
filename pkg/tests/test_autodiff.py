import numpy as np
import pytest

from sfattack import autodiff as ad


def fd_grad(fn, values, h=1e-5):
    """Central finite differences of a scalar fn over a list of arrays."""
    out = []
    for k, base in enumerate(values):
        g = np.zeros_like(base)
        for j in range(base.size):
            bump = [v.copy() for v in values]
            bump[k].ravel()[j] = base.ravel()[j] + h
            fp = fn(*bump)
            bump[k].ravel()[j] = base.ravel()[j] - h
            fm = fn(*bump)
            g.ravel()[j] = (fp - fm) / (2 * h)
        out.append(g)
    return out


class TestPrimitives:
    def test_add(self):
        assert np.array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])

    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(np.eye(2), a).data, a)

    def test_exp_zero(self):
        assert ad.exp(np.zeros(1)).data[0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.add(np.zeros(3), np.zeros((2, 2)))
        with pytest.raises(ad.ShapeError):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_domain_errors(self):
        with pytest.raises(ad.DomainError):
            ad.log(np.array([-1.0]))
        with pytest.raises(ad.DomainError):
            ad.log(np.array([0.0]))
        with pytest.raises(ad.DomainError):
            ad.sqrt(np.array([-0.5]))

    def test_dispatch(self):
        t = ad.primitive_forward("add", [np.ones(2), np.ones(2)])
        assert np.array_equal(t.data, [2.0, 2.0])
        with pytest.raises(KeyError):
            ad.primitive_forward("tanh", [np.ones(2)])

    def test_pairwise_sqdist_small(self):
        a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        b = np.array([[1.0, 0, 0]])
        assert np.array_equal(ad.pairwise_sqdist(a, b).data, [[1.0], [0.0]])

    def test_pairwise_sqdist_self(self):
        a = np.random.default_rng(0).normal(size=(5, 3))
        d = ad.pairwise_sqdist(a, a).data
        assert np.allclose(np.diag(d), 0.0)
        assert np.allclose(d, d.T)

    def test_pairwise_sqdist_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        expect = np.zeros((4, 5))
        for i in range(4):
            for j in range(5):
                expect[i, j] = sum((a[i, k] - b[j, k]) ** 2 for k in range(3))
        assert np.abs(ad.pairwise_sqdist(a, b).data - expect).max() < 1e-12


class TestBackward:
    def test_sum_of_squares(self):
        g = ad.Graph()
        x = g.leaf([1.0, 2.0])
        grads = ad.backward(ad.tsum(ad.mul(x, x)))
        assert np.array_equal(grads[x.node_id], [2.0, 4.0])

    def test_mean_norm(self):
        g = ad.Graph()
        x = g.leaf([[3.0, 4.0]])
        grads = ad.backward(ad.tmean(ad.rownorm(x)))
        assert np.allclose(grads[x.node_id], [[0.6, 0.8]])

    def test_non_scalar_root(self):
        g = ad.Graph()
        x = g.leaf([1.0, 2.0])
        with pytest.raises(ad.GraphError):
            ad.backward(ad.mul(x, x))

    def test_graph_single_use(self):
        g = ad.Graph()
        x = g.leaf([1.0])
        root = ad.tsum(x)
        ad.backward(root)
        with pytest.raises(ad.GraphError):
            ad.backward(root)

    def test_unreached_leaf_gets_zeros(self):
        g = ad.Graph()
        x = g.leaf([1.0, 2.0])
        y = g.leaf([3.0])
        grads = ad.backward(ad.tsum(x))
        assert np.array_equal(grads[y.node_id], [0.0])


def _recipes():
    """Composite graph builders: (fn over tensors, shapes)."""
    def r0(x, y):
        return ad.tsum(ad.mul(ad.exp(ad.smul(x, 0.3)), ad.add(y, x)))

    def r1(x, y):
        return ad.tmean(ad.rownorm(ad.sub(ad.matmul(x, y), ad.smul(x, 0.5))))

    def r2(x, y):
        d = ad.pairwise_sqdist(x, y)
        return ad.tsum(ad.mul(ad.log(ad.add(d, ad.broadcast(
            ad.constant(1.0), d.shape))), ad.smul(d, 0.1)))

    def r3(x, y):
        c = ad.concat(x, y, axis=0)
        return ad.tmean(ad.sqrt(ad.add(ad.row_sum(ad.mul(c, c)),
                                       ad.broadcast(ad.constant(0.1), (c.shape[0],)))))

    def r4(x, y):
        gathered = ad.gather_rows(x, [0, 2, 1, 2])
        return ad.tsum(ad.relu(ad.sub(ad.matmul(gathered, y),
                                      ad.broadcast(ad.constant(0.2), (4, 2)))))

    return [
        (r0, [(3, 4), (3, 4)]),
        (r1, [(4, 4), (4, 4)]),
        (r2, [(3, 2), (5, 2)]),
        (r3, [(2, 3), (4, 3)]),
        (r4, [(3, 3), (3, 2)]),
    ]


class TestGradientCorrectness:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("recipe_idx", range(5))
    def test_random_composite_graphs(self, recipe_idx, seed):
        # 50 random graphs total: backward vs central differences (h=1e-5)
        fn, shapes = _recipes()[recipe_idx]
        rng = np.random.default_rng(1000 * recipe_idx + seed)
        values = [rng.normal(size=s) for s in shapes]

        g = ad.Graph()
        leaves = [g.leaf(v) for v in values]
        grads = ad.backward(fn(*leaves))
        analytic = [grads[t.node_id] for t in leaves]

        numeric = fd_grad(lambda *vs: float(fn(*[ad.constant(v) for v in vs]).data),
                          values)
        for a, n in zip(analytic, numeric):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
            assert (np.abs(a - n) / denom).max() < 1e-5

    def test_linearity(self):
        rng = np.random.default_rng(5)
        v = rng.normal(size=(4, 3))

        def grad_of(fn):
            g = ad.Graph()
            x = g.leaf(v)
            return ad.backward(fn(x))[x.node_id]

        f = lambda x: ad.tsum(ad.mul(x, x))
        h = lambda x: ad.tmean(ad.rownorm(x))
        combo = lambda x: ad.add(ad.smul(f(x), 2.0), ad.smul(h(x), -3.0))
        assert np.allclose(grad_of(combo), 2.0 * grad_of(f) - 3.0 * grad_of(h),
                           rtol=1e-12, atol=1e-12)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(9)
            g = ad.Graph()
            x = g.leaf(rng.normal(size=(4, 3)))
            y = g.leaf(rng.normal(size=(4, 3)))
            root = ad.tmean(ad.rownorm(ad.add(ad.mul(x, y), ad.exp(ad.smul(x, 0.1)))))
            return root.data.copy(), ad.backward(root)[x.node_id]

        (v1, g1), (v2, g2) = run(), run()
        assert v1.tobytes() == v2.tobytes()
        assert g1.tobytes() == g2.tobytes()

    def test_sign_safety_relu(self):
        g = ad.Graph()
        x = g.leaf([0.0, -1.0, 2.0])
        grads = ad.backward(ad.tsum(ad.relu(x)))
        assert np.array_equal(grads[x.node_id], [0.0, 0.0, 1.0])

    def test_sign_safety_rownorm(self):
        g = ad.Graph()
        x = g.leaf([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
        grads = ad.backward(ad.tsum(ad.rownorm(x)))
        assert np.array_equal(grads[x.node_id][0], [0.0, 0.0, 0.0])
        assert np.allclose(grads[x.node_id][1], [0.6, 0.8, 0.0])


class TestGradcheck:
    def test_constant_recipe(self):
        def builder(rng):
            return (lambda x: ad.smul(ad.tsum(ad.mul(x, ad.constant(np.zeros(3)))), 1.0),
                    [np.ones(3)])

        rep = ad.gradcheck(builder, seed=0)
        assert rep.max_rel_err == 0.0 and rep.passed

    def test_repeatable(self):
        def builder(rng):
            v = rng.normal(size=(3, 3))
            return lambda x: ad.tmean(ad.rownorm(ad.mul(x, x))), [v]

        r1 = ad.gradcheck(builder, seed=7)
        r2 = ad.gradcheck(builder, seed=7)
        assert (r1.max_rel_err, r1.passed) == (r2.max_rel_err, r2.passed)

    def test_nonfinite_forward_rejected(self):
        def builder(rng):
            return lambda x: ad.smul(ad.tsum(x), float("nan")), [np.ones(2)]

        with pytest.raises(ad.DomainError):
            ad.gradcheck(builder, seed=0)
