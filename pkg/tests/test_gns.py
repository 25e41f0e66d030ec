import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgr.errors import ShapeMismatch, SpecMismatch
from lgr.features import GraphSample, NormStats, batch_samples
from lgr.gns import (
    AdamState,
    GnsModel,
    GnsSpec,
    Mlp,
    load_checkpoint,
    loss,
    save_checkpoint,
    train_step,
)

SMALL = GnsSpec(node_in=15, latent=8, n_blocks=2, hidden_layers=2)


def random_graph(n=12, e=40, node_in=15, seed=0, targets=True):
    rng = np.random.default_rng(seed)
    recv = rng.integers(0, n, e)
    send = (recv + rng.integers(1, n, e)) % n
    return GraphSample(rng.normal(size=(n, node_in)), rng.normal(size=(e, 4)), send, recv,
                       targets=rng.normal(size=(n, 3)) if targets else None)


def permuted(sample, perm):
    inv = np.argsort(perm)
    return GraphSample(sample.node_features[perm], sample.edge_features,
                       inv[sample.senders], inv[sample.receivers],
                       targets=None if sample.targets is None else sample.targets[perm])


def flat(grads):
    return np.concatenate([g.ravel() for g in grads.values()])


def numeric_grad(model, sample, h=1e-5):
    out = {}
    for k, p in model.params.items():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss(model(sample), sample.targets, sample.mask)
            p[i] = old - h
            down = loss(model(sample), sample.targets, sample.mask)
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out[k] = g
    return out


class TestArchitecture:
    def test_output_shape(self):
        s = random_graph()
        assert GnsModel(SMALL)(s).shape == (12, 3)

    def test_zero_decoder_gives_zero(self):
        m = GnsModel(SMALL, seed=3)
        for k in m.params:
            if k.startswith("decoder.") and k.split(".")[1] == str(SMALL.hidden_layers):
                m.params[k][...] = 0.0
        np.testing.assert_array_equal(m(random_graph()), 0.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_permutation_equivariance(self, seed):
        s = random_graph(seed=seed)
        perm = np.random.default_rng(seed).permutation(s.n_nodes)
        m = GnsModel(SMALL, seed=1)
        np.testing.assert_allclose(m(permuted(s, perm)), m(s)[perm], atol=1e-12)

    def test_edge_order_irrelevant(self):
        s = random_graph()
        order = np.random.default_rng(5).permutation(s.n_edges)
        t = GraphSample(s.node_features, s.edge_features[order], s.senders[order],
                        s.receivers[order])
        m = GnsModel(SMALL)
        np.testing.assert_allclose(m(t), m(s), atol=1e-12)

    def test_sum_aggregation(self):
        """A twin neighbor with identical features changes the result (a mean would not)."""
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 15))
        ef = rng.normal(size=(1, 4))
        one = GraphSample(x, ef, np.array([1]), np.array([0]))
        two = GraphSample(np.vstack([x, x[1]]), np.vstack([ef, ef]), np.array([1, 2]),
                          np.array([0, 0]))
        m = GnsModel(SMALL, seed=2)
        a, b = m(one), m(two)
        np.testing.assert_allclose(b[1], b[2], atol=1e-14)
        assert not np.allclose(a[0], b[0])
        # scatter matrix is an exact sum over incoming edges
        e = rng.normal(size=(two.n_edges, 5))
        np.testing.assert_allclose(two.scatter_matrix("receivers") @ e, [e.sum(0), 0 * e[0], 0 * e[0]])

    def test_no_edges(self):
        s = GraphSample(np.ones((3, 15)), np.zeros((0, 4)), np.zeros(0, int), np.zeros(0, int))
        out = GnsModel(SMALL)(s)
        np.testing.assert_allclose(out, np.tile(out[0], (3, 1)))

    def test_feature_width_checked(self):
        m = GnsModel(SMALL)
        with pytest.raises(ShapeMismatch):
            m(random_graph(node_in=18))
        s = random_graph()
        s.edge_features = s.edge_features[:, :3]
        with pytest.raises(ShapeMismatch):
            m(s)

    def test_layernorm_output_moments(self, rng):
        mlp = Mlp("t", [6], 16, 10, 2, True)
        p = {}
        mlp.init(p, rng)
        y, _ = mlp.forward(p, [(rng.normal(size=(30, 6)), None)])
        np.testing.assert_allclose(y.mean(1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(1), 1, atol=1e-3)

    def test_glorot_bounds(self):
        m = GnsModel(GnsSpec.paper_scale(), seed=0)
        w = m.params["node_enc.0.w"]
        limit = np.sqrt(6 / (15 + 128))
        assert np.abs(w).max() <= limit and np.abs(w).max() > 0.9 * limit
        np.testing.assert_array_equal(m.params["node_enc.0.b"], 0)

    def test_param_count(self):
        assert GnsModel(GnsSpec.paper_scale()).n_params == 631_683
        m = GnsModel(SMALL)
        assert m.n_params == sum(np.prod(s) for s in m.param_shapes().values())

    def test_determinism(self):
        s = random_graph()
        a, b = GnsModel(SMALL, seed=9), GnsModel(SMALL, seed=9)
        np.testing.assert_array_equal(a(s), b(s))
        assert not np.array_equal(a(s), GnsModel(SMALL, seed=10)(s))

    def test_needs_hidden_layer(self):
        with pytest.raises(ValueError):
            GnsSpec(hidden_layers=0)

    def test_batch_matches_individual(self):
        a, b = random_graph(seed=1), random_graph(n=7, e=15, seed=2)
        m = GnsModel(SMALL, seed=4)
        out = m(batch_samples([a, b]))
        np.testing.assert_allclose(out[:12], m(a), atol=1e-12)
        np.testing.assert_allclose(out[12:], m(b), atol=1e-12)


class TestLoss:
    def test_examples(self):
        assert loss(np.zeros((2, 3)), np.zeros((2, 3))) == 0.0
        assert loss(np.ones((4, 3)), np.zeros((4, 3))) == 1.0
        p = np.array([[2.0, 0, 0], [0, 0, 0]])
        assert loss(p, np.zeros((2, 3))) == pytest.approx(4 / 6)

    def test_mask(self):
        p = np.array([[2.0, 0, 0], [5.0, 5, 5]])
        assert loss(p, np.zeros((2, 3)), mask=np.array([True, False])) == pytest.approx(4 / 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            loss(np.zeros((3, 3)), np.zeros((2, 3)))

    def test_grad(self, rng):
        p, t = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        _, g = loss(p, t, with_grad=True)
        d = np.zeros_like(p)
        d[2, 1] = 1e-6
        assert (loss(p + d, t) - loss(p - d, t)) / 2e-6 == pytest.approx(g[2, 1], rel=1e-6)


class TestGradients:
    @pytest.mark.parametrize("layernorm", [True, False])
    def test_finite_differences(self, layernorm):
        spec = GnsSpec(node_in=15, latent=8, n_blocks=2, hidden_layers=1, layernorm=layernorm)
        s = random_graph(n=6, e=14, seed=3)
        m = GnsModel(spec, seed=5)
        _, g = m.loss_and_grad(s)
        errs = []
        for h in (1e-4, 1e-5):
            ref = flat(numeric_grad(m, s, h))
            errs.append(np.linalg.norm(flat(g) - ref) / np.linalg.norm(ref))
        assert errs[1] < 1e-4
        # central differences converge as h^2 towards the analytic gradient
        assert errs[1] < errs[0] or errs[1] < 1e-8

    def test_zero_residual_zero_grads(self):
        s = random_graph()
        m = GnsModel(SMALL)
        s.targets = m(s)
        value, g = m.loss_and_grad(s)
        assert value == 0.0
        assert all(np.all(v == 0) for v in g.values())

    def test_masked_nodes_do_not_contribute(self):
        s = random_graph()
        s.mask = np.arange(12) < 6
        m = GnsModel(SMALL)
        _, g1 = m.loss_and_grad(s)
        s.targets = s.targets.copy()
        s.targets[6:] += 100.0
        _, g2 = m.loss_and_grad(s)
        np.testing.assert_array_equal(flat(g1), flat(g2))


class TestAdam:
    def test_zero_grad_leaves_params(self):
        m = GnsModel(SMALL)
        before = flat(m.params).copy()
        adam = AdamState.for_model(m)
        adam.update(m.params, {k: np.zeros_like(v) for k, v in m.params.items()})
        np.testing.assert_array_equal(flat(m.params), before)
        assert adam.step == 1

    def test_first_step_is_sign(self, rng):
        m = GnsModel(SMALL)
        before = {k: v.copy() for k, v in m.params.items()}
        grads = {k: rng.normal(size=v.shape) for k, v in m.params.items()}
        adam = AdamState.for_model(m, lr_init=1e-3)
        adam.update(m.params, grads)
        for k in grads:
            np.testing.assert_allclose(m.params[k] - before[k], -1e-3 * np.sign(grads[k]),
                                       rtol=1e-4)

    def test_schedule(self):
        a = AdamState({}, {}, lr_init=1e-4, lr_final=1e-6, decay_steps=5e6)
        assert a.lr(0) == pytest.approx(1e-4)
        assert a.lr(5_000_000) == pytest.approx(1e-6 + 99e-6 * 0.1)
        assert a.lr(10**9) == pytest.approx(1e-6)
        assert all(a.lr(s) > a.lr(s + 1000) for s in range(0, 10**6, 10**5))

    def test_loss_decreases(self):
        s = random_graph()
        m = GnsModel(SMALL, seed=2)
        adam = AdamState.for_model(m, lr_init=1e-2)
        first = train_step(m, adam, s)
        for _ in range(50):
            last = train_step(m, adam, s)
        assert last < 0.5 * first


class TestCheckpoint:
    def test_bitwise_round_trip(self, tmp_path, rng):
        stats = NormStats(rng.normal(size=3), rng.random(3) + 0.1, rng.normal(size=3),
                          rng.random(3) + 0.1)
        m = GnsModel(SMALL, stats=stats, seed=4, meta={"history": 5, "radius": 0.15})
        adam = AdamState.for_model(m, lr_init=3e-4)
        for _ in range(3):
            train_step(m, adam, random_graph())
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, adam, path)
        m2, adam2 = load_checkpoint(path)
        assert m2.spec == m.spec and m2.meta == m.meta and adam2.step == 3
        assert adam2.hyper() == adam.hyper()
        for k in m.params:
            assert m2.params[k].tobytes() == m.params[k].tobytes()
            assert adam2.m[k].tobytes() == adam.m[k].tobytes()
            assert adam2.v[k].tobytes() == adam.v[k].tobytes()
        np.testing.assert_array_equal(m2.stats.acc_std, stats.acc_std)
        s = random_graph(seed=8)
        assert m2(s).tobytes() == m(s).tobytes()
        # training continues identically
        s.targets = s.targets * 2
        train_step(m, adam, s)
        train_step(m2, adam2, s)
        np.testing.assert_array_equal(flat(m2.params), flat(m.params))

    def test_without_optimizer(self, tmp_path):
        save_checkpoint(GnsModel(SMALL), None, tmp_path / "a")
        _, adam = load_checkpoint(tmp_path / "a")
        assert adam is None

    def test_spec_mismatch(self, tmp_path):
        save_checkpoint(GnsModel(SMALL), None, tmp_path / "a")
        with pytest.raises(SpecMismatch):
            load_checkpoint(tmp_path / "a", spec=GnsSpec(latent=16))
        load_checkpoint(tmp_path / "a", spec=SMALL)

    def test_corrupt_files(self, tmp_path):
        path = tmp_path / "a"
        save_checkpoint(GnsModel(SMALL), None, path)
        raw = path.read_bytes()
        (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
        (tmp_path / "trail").write_bytes(raw + b"\0" * 8)
        (tmp_path / "ver").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
        for name in ("magic", "trail", "ver"):
            with pytest.raises(SpecMismatch):
                load_checkpoint(tmp_path / name)

    def test_params_must_match_spec(self):
        params = GnsModel(SMALL).params
        with pytest.raises(SpecMismatch):
            GnsModel(GnsSpec(latent=16), params=params)
