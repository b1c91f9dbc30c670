import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sysaudit import models
from sysaudit.autodiff import Graph
from sysaudit.errors import ConfigurationError, ShapeError, TrainingError
from sysaudit.metrics import roc_auc
from sysaudit.models import Samples, TrainConfig, dense_spec, pooled_set_spec
from tests.oracles import central_difference, rel_error


def hand_count(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def test_dense_parameter_count():
    spec = dense_spec(12, (64, 64, 32))
    assert spec.n_params == hand_count([12, 64, 64, 32, 1]) == 7105
    assert models.init(spec, 0).params.size == 7105


def test_linear_model_has_five_parameters():
    assert dense_spec(4, ()).n_params == 5


def test_pooled_set_parameter_count():
    spec = pooled_set_spec(6)
    assert spec.n_params == hand_count([6, 32, 32, 32, 1])


def test_init_deterministic_and_bounded():
    spec = dense_spec()
    a, b = models.init(spec, 3), models.init(spec, 3)
    np.testing.assert_array_equal(a.params, b.params)
    assert not np.array_equal(a.params, models.init(spec, 4).params)
    w0 = models.unflatten(spec, a.params)["W0"]
    assert np.abs(w0).max() <= 1 / np.sqrt(12)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        models.ModelSpec("dense", 4, (0,))
    with pytest.raises(ConfigurationError):
        models.ModelSpec("pooled-set", 4, (8,), ())
    with pytest.raises(ConfigurationError):
        models.ModelSpec("tree", 4)
    with pytest.raises(ConfigurationError):
        dense_spec(4, (8,), dropout=1.0)


def test_zero_parameters_give_half():
    spec = dense_spec(5, (7,))
    ck = models.init(spec, 0)
    ck.params[:] = 0
    x = np.random.default_rng(0).normal(size=(10, 5))
    np.testing.assert_array_equal(models.predict(ck, x), 0.5)
    np.testing.assert_array_equal(models.logits(ck, x), 0.0)


def test_scores_are_sigmoid_of_logits_and_monotone():
    spec = dense_spec(3, (8,))
    ck = models.init(spec, 1)
    x = np.random.default_rng(1).normal(size=(200, 3))
    z, s = models.logits(ck, x), models.predict(ck, x)
    np.testing.assert_allclose(s, 1 / (1 + np.exp(-z)), rtol=1e-12)
    assert np.array_equal(z > 0, s > 0.5)
    order = np.argsort(z)
    assert np.all(np.diff(s[order]) >= 0)
    np.testing.assert_array_equal(models.predict(ck, np.repeat(x[:1], 4, 0)), np.repeat(s[:1], 4))


def test_predict_dimension_mismatch():
    ck = models.init(dense_spec(3, (4,)), 0)
    with pytest.raises(ShapeError):
        models.predict(ck, np.zeros((2, 4)))
    ps = models.init(pooled_set_spec(3, (4,), (4,)), 0)
    with pytest.raises(ShapeError):
        models.predict(ps, np.zeros((2, 5, 3)), np.ones((2, 4)))


def test_pooled_set_permutation_and_padding_invariance():
    rng = np.random.default_rng(2)
    ck = models.init(pooled_set_spec(4, (8, 8), (8,)), 2)
    x = rng.normal(size=(6, 7, 4))
    mask = np.zeros((6, 7))
    for i, n in enumerate([1, 3, 7, 2, 5, 4]):
        mask[i, :n] = 1
    x = x * mask[..., None]
    ref = models.predict(ck, x, mask)
    perm = x.copy()
    for i in range(6):
        n = int(mask[i].sum())
        perm[i, :n] = x[i, rng.permutation(n)]
    np.testing.assert_allclose(models.predict(ck, perm, mask), ref, rtol=1e-12)
    junk = np.where(mask[..., None] > 0, x, rng.normal(size=x.shape) * 100)
    np.testing.assert_allclose(models.predict(ck, junk, mask), ref, rtol=1e-12)


def test_network_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    spec = dense_spec(8, (6,), dropout=0.0)
    ck = models.init(spec, 3)
    g = Graph()
    x = g.input("x")
    root = g.sum(g.tanh(models.build_network(g, spec, x)))
    bind = models.bindings(ck, rng.normal(size=(4, 8)))
    grad = g.forward(bind, root).backward(root, wrt=["x"])[x.id]
    num = central_difference(lambda b: float(g.forward(b, root).value), bind, "x")
    assert rel_error(grad, num) < 1e-4


def test_separable_toy_set_is_learned():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3000, 2))
    y = (x[:, 0] > 0).astype(float)
    tr, va = Samples(x[:2400], y[:2400]), Samples(x[2400:], y[2400:])
    ck, hist = models.train(models.init(dense_spec(2, (16,), dropout=0.0), 0), tr, va,
                            TrainConfig(learning_rate=1e-2, max_epochs=60, patience=10))
    acc = np.mean((models.predict(ck, tr.x) > 0.5) == tr.labels)
    assert acc > 0.99
    best_val = min(h["val_loss"] for h in hist)
    assert models.mean_loss(ck, va) <= hist[-1]["val_loss"] + 1e-15
    assert models.mean_loss(ck, va) <= best_val + 1e-12


def test_shuffled_labels_give_chance_auc():
    aucs = []
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(2000, 4))
        y = rng.integers(0, 2, 2000).astype(float)
        ck, _ = models.train(models.init(dense_spec(4, (8,)), seed), Samples(x[:1600], y[:1600]),
                             Samples(x[1600:1800], y[1600:1800]), TrainConfig(max_epochs=10, seed=seed))
        aucs.append(roc_auc(models.predict(ck, x[1800:]), y[1800:]).auc)
    assert 0.45 <= np.mean(aucs) <= 0.55


def test_training_is_reproducible():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(600, 3))
    y = (x.sum(1) > 0).astype(float)
    run = lambda: models.train(models.init(dense_spec(3, (8,)), 1), Samples(x[:500], y[:500]),
                               Samples(x[500:], y[500:]), TrainConfig(max_epochs=5, seed=9))[0]
    np.testing.assert_array_equal(run().params, run().params)


def test_pooled_set_training_runs():
    rng = np.random.default_rng(6)
    n, t = 400, 6
    mask = (np.arange(t)[None, :] < rng.integers(1, t + 1, n)[:, None]).astype(float)
    y = rng.integers(0, 2, n).astype(float)
    x = rng.normal(size=(n, t, 2)) + y[:, None, None] * 1.5
    x *= mask[..., None]
    ck, hist = models.train(models.init(pooled_set_spec(2, (8,), (8,)), 0), Samples(x[:300], y[:300], mask[:300]),
                            Samples(x[300:], y[300:], mask[300:]), TrainConfig(max_epochs=15, learning_rate=5e-3))
    assert roc_auc(models.predict(ck, x[300:], mask[300:]), y[300:]).auc > 0.85


def test_non_finite_loss_reports_epoch_and_batch():
    x = np.ones((10, 2))
    x[3, 0] = np.nan
    y = np.zeros(10)
    ck = models.init(dense_spec(2, (3,)), 0)
    with pytest.raises(TrainingError, match="epoch 0, batch"):
        models.train(ck, Samples(x, y), Samples(np.ones((4, 2)), np.zeros(4)), TrainConfig(batch_size=4))


def test_non_binary_labels_rejected():
    ck = models.init(dense_spec(2, (3,)), 0)
    with pytest.raises(ConfigurationError):
        models.train(ck, Samples(np.ones((4, 2)), np.array([0, 1, 2, 0.0])), Samples(np.ones((2, 2)), np.zeros(2)))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = models.init(pooled_set_spec(4), 7)
    ck.shift = np.random.default_rng(0).normal(size=4)
    ck.scale = np.random.default_rng(1).random(4) + 0.5
    path = tmp_path / "ck.json"
    models.save_checkpoint(ck, path)
    back = models.load_checkpoint(path)
    np.testing.assert_array_equal(back.params, ck.params)
    np.testing.assert_array_equal(back.shift, ck.shift)
    assert back.spec == ck.spec and back.seed == 7


def test_checkpoint_version_mismatch(tmp_path):
    d = models.init(dense_spec(2, ()), 0).to_dict()
    d["format_version"] = 99
    with pytest.raises(ConfigurationError):
        models.Checkpoint.from_dict(d)


def test_indistinguishability_task_shapes_and_pairing():
    rng = np.random.default_rng(8)
    nom = Samples(rng.normal(size=(100, 3)), rng.integers(0, 2, 100))
    adv = Samples(nom.x + 0.01, nom.labels)
    split = models.build_indistinguishability_task(nom, adv, seed=1)
    assert len(split.train) + len(split.val) + len(split.test) == 200
    for part in (split.train, split.val, split.test):
        assert part.labels.sum() * 2 == len(part)  # pairs stay together, so each part is balanced
    with pytest.raises(ShapeError):
        models.build_indistinguishability_task(nom, Samples(np.zeros((100, 4)), nom.labels), 0)


def test_indistinguishability_detects_coherent_shift():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4000, 3))
    nom = Samples(x, np.zeros(4000))
    shifted = x.copy()
    shifted[:, 0] += 5 * 1.0
    split = models.build_indistinguishability_task(nom, Samples(shifted, np.zeros(4000)), 0)
    # a one-feature cut at the midpoint already separates
    cut_auc = roc_auc(split.test.x[:, 0], split.test.labels).auc
    assert cut_auc > 0.9
    ck, _ = models.train(models.init(dense_spec(3, (8,)), 0), split.train, split.val, TrainConfig(max_epochs=5))
    assert roc_auc(models.predict(ck, split.test.x), split.test.labels).auc > 0.9


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 500), st.integers(0, 10_000))
def test_split_indices_fractions(n, seed):
    tags = models.split_indices(n, seed)
    assert set(np.unique(tags)) <= {0, 1, 2}
    assert abs((tags == 0).sum() - 0.8 * n) <= 1
    np.testing.assert_array_equal(tags, models.split_indices(n, seed))


def test_batch_loss_is_mean_of_per_example_losses():
    rng = np.random.default_rng(10)
    ck = models.init(dense_spec(3, (4,)), 0)
    x, y = rng.normal(size=(9, 3)), rng.integers(0, 2, 9).astype(float)
    per = [models.mean_loss(ck, Samples(x[i:i + 1], y[i:i + 1])) for i in range(9)]
    assert models.mean_loss(ck, Samples(x, y)) == pytest.approx(np.mean(per), rel=1e-12)
