import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from edabench.exceptions import DegenerateTrainSetWarning
from edabench.model import (
    AdamW,
    ArchSpec,
    ClassifierModel,
    SoftmaxClassifier,
    TrainHyper,
    backward,
    cross_entropy,
    embed,
    fit,
    forward,
    forward_pass,
    grad,
    init,
    predict,
    select_best_epoch,
    softmax,
)


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_error(a, b, floor=1e-6):
    # the floor keeps float64 roundoff on near-zero components from dominating
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))


def random_case(rng):
    kind = rng.choice(["linear", "mlp"])
    d, M = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3)))
    spec = ArchSpec(d, M, kind, hidden, str(rng.choice(["relu", "tanh"])))
    model = init(spec, int(rng.integers(0, 1000)))
    model.params += 0.1 * rng.standard_normal(spec.param_count)
    n = int(rng.integers(1, 9))
    return model, rng.standard_normal((n, d)), rng.integers(0, M, n)


def blobs(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = np.where(y[:, None] == 1, 2.0, -2.0) + 0.5 * rng.standard_normal((n, 2))
    return X, y


class TestArch:
    def test_param_counts(self):
        assert init(ArchSpec(2, 2, "linear"), 0).params.size == 6
        assert ArchSpec(4, 3, "mlp", (8,)).param_count == 4 * 8 + 8 + 8 * 3 + 3 == 67

    def test_feature_dim(self):
        assert ArchSpec(5, 2, "linear").feature_dim == 5
        assert ArchSpec(5, 2, "mlp", (8, 3)).feature_dim == 3

    @pytest.mark.parametrize("kw", [dict(kind="mlp", hidden_dims=()), dict(kind="rnn"), dict(activation="gelu"),
                                    dict(hidden_dims=(0,))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ArchSpec(2, 2, **kw)

    def test_init_glorot(self):
        spec = ArchSpec(4, 3, "mlp", (8,))
        m = init(spec, 1)
        W1 = m.params[:32]
        assert np.all(np.abs(W1) <= math.sqrt(6 / 12))
        assert np.all(m.params[32:40] == 0) and np.all(m.params[-3:] == 0)
        assert np.array_equal(m.params, init(spec, 1).params)
        assert not np.array_equal(m.params, init(spec, 2).params)

    def test_param_length_checked(self):
        with pytest.raises(ValueError):
            ClassifierModel(ArchSpec(2, 2, "linear"), np.zeros(5))

    def test_save_load(self, tmp_path):
        m = init(ArchSpec(3, 2, "mlp", (4,), "tanh"), 5)
        m.save(tmp_path / "m.json")
        back = ClassifierModel.load(tmp_path / "m.json")
        assert back.spec == m.spec and np.array_equal(back.params, m.params)


class TestForward:
    def test_zero_linear_uniform(self):
        m = ClassifierModel(ArchSpec(3, 4, "linear"), np.zeros(16))
        assert np.array_equal(forward(m, np.ones(3)), np.zeros(4))
        assert np.allclose(softmax(forward(m, np.ones(3))), 0.25)

    def test_identity_layer(self):
        params = np.concatenate([np.eye(2).ravel(), np.zeros(2)])
        m = ClassifierModel(ArchSpec(2, 2, "linear"), params)
        assert forward(m, np.array([3.0, -1.0])).tolist() == [3.0, -1.0]

    def test_softmax_normalized_and_stable(self):
        rng = np.random.default_rng(0)
        z = rng.normal(scale=300, size=(50, 5))
        p = softmax(z)
        assert np.all(p >= 0) and np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
        assert np.all(np.isfinite(p))

    def test_embed(self):
        lin = init(ArchSpec(3, 2, "linear"), 0)
        x = np.array([1.0, -2.0, 0.5])
        assert np.array_equal(embed(lin, x), x)
        mlp = init(ArchSpec(3, 2, "mlp", (8,)), 0)
        assert embed(mlp, x).shape == (8,)

    def test_embed_relu_dead(self):
        spec = ArchSpec(2, 2, "mlp", (4,))
        params = np.zeros(spec.param_count)
        params[8:12] = -1.0  # hidden biases
        assert np.array_equal(embed(ClassifierModel(spec, params), np.zeros(2)), np.zeros(4))

    def test_predict_ties_low_index(self):
        m = ClassifierModel(ArchSpec(2, 3, "linear"), np.zeros(9))
        assert predict(m, np.ones((4, 2))).tolist() == [0, 0, 0, 0]


class TestGradient:
    def test_finite_differences(self):
        rng = np.random.default_rng(2024)
        for _ in range(30):
            model, X, y = random_case(rng)

            def loss(p):
                return grad(ClassifierModel(model.spec, p), X, y)[0]

            _, g = grad(model, X, y)
            assert rel_error(g, central_diff(loss, model.params)) < 1e-5

    def test_uniform_logits_ln2(self):
        m = ClassifierModel(ArchSpec(3, 2, "linear"), np.zeros(8))
        loss, _ = grad(m, np.ones((5, 3)), [0, 1, 1, 0, 1])
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_duplicated_batch(self):
        model, X, y = random_case(np.random.default_rng(3))
        l1, g1 = grad(model, X, y)
        l2, g2 = grad(model, np.vstack([X, X]), np.concatenate([y, y]))
        assert l1 == pytest.approx(l2, abs=1e-12) and np.allclose(g1, g2, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        model, X, y = random_case(rng)
        p = rng.permutation(len(y))
        _, g1 = grad(model, X, y)
        _, g2 = grad(model, X[p], y[p])
        assert np.max(np.abs(g1 - g2)) < 1e-12

    def test_cross_entropy_extreme_logits(self):
        loss, d = cross_entropy(np.array([[1000.0, -1000.0]]), np.array([1]))
        assert loss == pytest.approx(2000.0) and np.all(np.isfinite(d))

    def test_embedding_gradient_hook(self):
        # dembed must enter at the head input exactly like a gradient of <v, g(x)>
        rng = np.random.default_rng(7)
        spec = ArchSpec(3, 2, "mlp", (4, 5), "tanh")
        m = init(spec, 1)
        X = rng.standard_normal((6, 3))
        v = rng.standard_normal((6, 5))

        def obj(p):
            return float(np.sum(embed(ClassifierModel(spec, p), X) * v))

        _, cache = forward_pass(spec, m.params, X)
        g, _ = backward(spec, m.params, cache, np.zeros((6, 2)), dembed=v)
        assert rel_error(g, central_diff(obj, m.params)) < 1e-5


class TestFit:
    def test_separable_blobs(self):
        X, y = blobs()
        res = fit(init(ArchSpec(2, 2, "mlp", (16,)), 0), X, y, X, y, TrainHyper(), seed=0)
        assert np.mean(predict(res.model, X) == y) >= 0.99

    def test_one_epoch_snapshot(self):
        X, y = blobs(100)
        res = fit(init(ArchSpec(2, 2), 0), X, y, X, y, TrainHyper(max_epochs=1), 0, keep_snapshots=True)
        assert res.best_epoch == 1
        assert np.array_equal(res.model.params, res.snapshots[0].params)

    def test_select_best_epoch(self):
        assert select_best_epoch([0.6, 0.8, 0.7]) == 1  # 0-based index of epoch 2
        assert select_best_epoch([0.7, 0.7, 0.6]) == 0

    def test_selection_contract(self):
        X, y = blobs(200, seed=4)
        Xv, yv = blobs(60, seed=5)
        yv = yv.copy()
        yv[:15] = 1 - yv[:15]
        res = fit(init(ArchSpec(2, 2), 3), X, y, Xv, yv, TrainHyper(max_epochs=5, learning_rate=0.05), 1,
                  keep_snapshots=True)
        assert res.val_scores[res.best_epoch - 1] == max(res.val_scores)
        assert res.best_epoch - 1 == min(i for i, s in enumerate(res.val_scores) if s == max(res.val_scores))
        assert np.array_equal(res.model.params, res.snapshots[res.best_epoch - 1].params)

    def test_deterministic(self):
        X, y = blobs(120)
        a = fit(init(ArchSpec(2, 2), 0), X, y, X, y, TrainHyper(), 9).model
        b = fit(init(ArchSpec(2, 2), 0), X, y, X, y, TrainHyper(), 9).model
        assert np.array_equal(a.params, b.params)

    def test_single_class_warns(self):
        X = np.random.default_rng(0).normal(size=(20, 2))
        with pytest.warns(DegenerateTrainSetWarning):
            fit(init(ArchSpec(2, 2), 0), X, np.zeros(20, int), X, np.zeros(20, int), TrainHyper(), 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit(init(ArchSpec(2, 2), 0), np.empty((0, 2)), [], np.ones((1, 2)), [0], TrainHyper(), 0)


def test_adamw_decoupled_decay():
    # zero gradient: only the decay term moves the parameters
    opt = AdamW(3, lr=0.1, weight_decay=0.5)
    p = opt.step(np.ones(3), np.zeros(3))
    assert np.allclose(p, 0.95)


class TestEstimator:
    def test_fit_predict(self):
        X, y = blobs()
        clf = SoftmaxClassifier(random_state=1).fit(X, y)
        assert clf.score(X, y) >= 0.99
        assert clf.predict_proba(X).shape == (len(y), 2)
        assert clf.transform(X).shape == (len(y), 16)

    def test_linear_and_clone(self):
        X, y = blobs(100)
        clf = SoftmaxClassifier(hidden_layer_sizes=(), max_epochs=5)
        c2 = clone(clf)
        assert c2.get_params() == clf.get_params()
        c2.fit(X, y)
        assert c2.transform(X).shape == X.shape

    def test_warm_start_continues(self):
        X, y = blobs(100)
        clf = SoftmaxClassifier(warm_start=True, max_epochs=1).fit(X, y)
        first = clf.model_.params.copy()
        clf.fit(X, y)
        cold = SoftmaxClassifier(max_epochs=1).fit(X, y)
        assert not np.array_equal(clf.model_.params, first)
        assert np.array_equal(cold.model_.params, first)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            SoftmaxClassifier().predict(np.zeros((1, 2)))

    def test_no_warning_on_normal_fit(self):
        X, y = blobs(60)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            SoftmaxClassifier().fit(X, y)
