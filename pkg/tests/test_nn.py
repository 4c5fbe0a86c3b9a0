import math

import numpy as np
import pytest

from tes import data, nn
from tes.simcore import derive_stream


# ---------------------------------------------------------------------------
# Independent oracle: central finite differences of the batch loss.
# ---------------------------------------------------------------------------

def fd_worst_rel_error(model, x, y, arr, analytic, coords, eps=1e-4, floor=1e-6):
    """Worst per-coordinate relative error of `analytic` vs central differences."""
    flat, gf = arr.reshape(-1), analytic.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        up, _ = nn.loss_and_grad(model, x, y)
        flat[i] = orig - eps
        down, _ = nn.loss_and_grad(model, x, y)
        flat[i] = orig
        fd = (up - down) / (2 * eps)
        worst = max(worst, abs(fd - gf[i]) / max(abs(fd), abs(gf[i]), floor))
    return worst


def small_random_model(rng, scale=0.3):
    m = nn.init_model(0)
    return nn.Model(
        w1=rng.normal(0, scale * math.sqrt(6.0 / 848), size=m.w1.shape),
        b1=rng.normal(0, 0.01, size=m.b1.shape),
        w2=rng.normal(0, scale * math.sqrt(6.0 / 74), size=m.w2.shape),
        b2=rng.normal(0, 0.01, size=m.b2.shape),
    )


def test_gradient_matches_finite_differences():
    # Full-coordinate sweep is too slow for 50890 params; check every
    # coordinate of the small tensors and a fixed random subset of w1.
    rng = np.random.default_rng(2024)
    x = rng.uniform(0, 1, size=(10, 784))
    y = rng.integers(0, 10, size=10)
    model = small_random_model(rng)
    _, g = nn.loss_and_grad(model, x, y)

    worst = 0.0
    for arr, ga in [(model.b1, g.b1), (model.b2, g.b2), (model.w2, g.w2)]:
        worst = max(worst, fd_worst_rel_error(model, x, y, arr, ga, range(arr.size)))
    picks = rng.choice(model.w1.size, size=400, replace=False)
    worst = max(worst, fd_worst_rel_error(model, x, y, model.w1, g.w1, picks))
    assert worst < 1e-5


def test_gradient_check_many_seeds():
    # 5-sample batches, several random models: max relative error < 1e-4
    for seed in range(6):
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(0, 1, size=(5, 784))
        y = rng.integers(0, 10, size=5)
        model = small_random_model(rng)
        _, g = nn.loss_and_grad(model, x, y)
        picks = rng.choice(784 * 64, size=150, replace=False)
        worst = fd_worst_rel_error(model, x, y, model.w1, g.w1, picks)
        worst = max(worst, fd_worst_rel_error(model, x, y, model.w2, g.w2, range(model.w2.size)))
        assert worst < 1e-4, f"seed {seed}: worst relative error {worst}"


def test_init_model_deterministic_and_bounded():
    a, b = nn.init_model(3), nn.init_model(3)
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa, pb)
    assert np.all(a.b1 == 0) and np.all(a.b2 == 0)
    assert np.all(np.abs(a.w1) < math.sqrt(6.0 / 848))
    assert np.all(np.abs(a.w2) < math.sqrt(6.0 / 74))
    assert sum(p.size for p in a.params()) == nn.PARAM_COUNT == 50890


def test_forward_rows_sum_to_one():
    model = nn.init_model(1)
    rng = np.random.default_rng(0)
    probs = nn.forward(model, rng.uniform(0, 1, size=(17, 784)))
    assert probs.shape == (17, 10)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_forward_zero_model_uniform():
    model = nn.Model(np.zeros((784, 64)), np.zeros(64), np.zeros((64, 10)), np.zeros(10))
    probs = nn.forward(model, np.random.default_rng(1).uniform(0, 1, size=(4, 784)))
    assert np.allclose(probs, 0.1, atol=1e-12)


def test_forward_handset_weights_pick_class():
    # bias alone drives the logits: class 7 wins everywhere
    model = nn.Model(np.zeros((784, 64)), np.zeros(64), np.zeros((64, 10)), np.zeros(10))
    model.b2[7] = 5.0
    probs = nn.forward(model, np.random.default_rng(2).uniform(0, 1, size=(6, 784)))
    assert np.all(np.argmax(probs, axis=1) == 7)


def test_forward_permutation_equivariant():
    model = nn.init_model(5)
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, size=(12, 784))
    perm = rng.permutation(12)
    assert np.allclose(nn.forward(model, x)[perm], nn.forward(model, x[perm]), atol=1e-12)


def test_loss_zero_model_is_log_ten():
    model = nn.Model(np.zeros((784, 64)), np.zeros(64), np.zeros((64, 10)), np.zeros(10))
    rng = np.random.default_rng(4)
    loss, _ = nn.loss_and_grad(model, rng.uniform(0, 1, size=(8, 784)), rng.integers(0, 10, size=8))
    assert loss == pytest.approx(math.log(10.0), abs=1e-12)


def test_loss_and_grad_duplicate_batch_invariant():
    model = nn.init_model(9)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, size=(6, 784))
    y = rng.integers(0, 10, size=6)
    loss1, g1 = nn.loss_and_grad(model, x, y)
    loss2, g2 = nn.loss_and_grad(model, np.vstack([x, x]), np.concatenate([y, y]))
    assert loss1 == pytest.approx(loss2, rel=1e-12)
    for a, b in zip(g1.params(), g2.params()):
        assert np.allclose(a, b, atol=1e-12)


def test_loss_and_grad_rejects_empty_batch():
    model = nn.init_model(0)
    with pytest.raises(ValueError):
        nn.loss_and_grad(model, np.zeros((0, 784)), np.zeros(0, dtype=int))


def test_sgd_step_zero_lr_and_linearity():
    model = nn.init_model(2)
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 1, size=(5, 784))
    y = rng.integers(0, 10, size=5)
    _, g = nn.loss_and_grad(model, x, y)
    unchanged = nn.sgd_step(model, g, 0.0)
    for a, b in zip(model.params(), unchanged.params()):
        assert np.array_equal(a, b)
    eta = 0.1
    twice = nn.sgd_step(nn.sgd_step(model, g, eta), g, eta)
    for orig, new, grad in zip(model.params(), twice.params(), g.params()):
        assert np.allclose(new, orig - 2 * eta * grad, atol=1e-12)


def test_sgd_step_rejects_nonfinite_gradient():
    model = nn.init_model(2)
    g = nn.Gradient(np.zeros((784, 64)), np.zeros(64), np.zeros((64, 10)), np.zeros(10))
    g.b2[0] = np.nan
    with pytest.raises(FloatingPointError):
        nn.sgd_step(model, g, 0.1)


def test_full_batch_descent_converges():
    # 200 full-batch steps on 100 separable samples drive training loss < 0.1
    ds = data.synth_dataset(100, seed=33)
    model = nn.init_model(33)
    for _ in range(200):
        _, g = nn.loss_and_grad(model, ds.images, ds.labels)
        model = nn.sgd_step(model, g, 0.5)
    loss, _ = nn.loss_and_grad(model, ds.images, ds.labels)
    assert loss < 0.1


def test_full_batch_descent_monotone():
    ds = data.synth_dataset(60, seed=8)
    model = nn.init_model(8)
    prev = math.inf
    for _ in range(50):
        loss, g = nn.loss_and_grad(model, ds.images, ds.labels)
        assert loss <= prev + 1e-12
        prev = loss
        model = nn.sgd_step(model, g, 0.01)


def test_evaluate_zero_model_ties_to_class_zero():
    ds = data.synth_dataset(500, seed=10)
    model = nn.Model(np.zeros((784, 64)), np.zeros(64), np.zeros((64, 10)), np.zeros(10))
    expected = float(np.mean(ds.labels == 0))
    assert nn.evaluate(model, ds) == pytest.approx(expected, abs=1e-12)


def test_evaluate_perfect_on_biased_model():
    # three samples, model output forced to the right class through b2
    imgs = np.zeros((3, 28, 28))
    labels = np.array([4, 4, 4])
    ds = data.Dataset(imgs, labels, "test")
    model = nn.Model(np.zeros((784, 64)), np.zeros(64), np.zeros((64, 10)), np.zeros(10))
    model.b2[4] = 1.0
    assert nn.evaluate(model, ds) == 1.0


def test_per_sample_loss_consistency():
    model = nn.init_model(12)
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, size=(9, 784))
    y = rng.integers(0, 10, size=9)
    losses = nn.per_sample_loss(model, x, y)
    batch_loss, _ = nn.loss_and_grad(model, x, y)
    assert losses.mean() == pytest.approx(batch_loss, rel=1e-12)
    single, _ = nn.loss_and_grad(model, x[:1], y[:1])
    assert losses[0] == pytest.approx(single, rel=1e-12)


def test_per_sample_loss_zero_model():
    model = nn.Model(np.zeros((784, 64)), np.zeros(64), np.zeros((64, 10)), np.zeros(10))
    rng = np.random.default_rng(8)
    losses = nn.per_sample_loss(model, rng.uniform(0, 1, size=(5, 784)), rng.integers(0, 10, size=5))
    assert np.allclose(losses, math.log(10.0), atol=1e-12)


def test_per_sample_loss_mislabeled_copy_costs_more(trained_model, synth_validation):
    # find a confidently classified sample, then flip its label
    probs = nn.forward(trained_model, synth_validation.images[:100])
    preds = np.argmax(probs, axis=1)
    good = np.flatnonzero((preds == synth_validation.labels[:100]) & (probs.max(axis=1) > 0.9))[0]
    img = synth_validation.images[good]
    true_label = int(synth_validation.labels[good])
    wrong_label = (true_label + 1) % 10
    pair_losses = nn.per_sample_loss(
        trained_model, np.stack([img, img]), np.array([true_label, wrong_label])
    )
    assert pair_losses[1] > pair_losses[0]


def test_uncertainty_bounds():
    assert nn.uncertainty(np.eye(10)[3]) == 0.0
    assert nn.uncertainty(np.full(10, 0.1)) == pytest.approx(0.9, abs=1e-12)
    rng = np.random.default_rng(9)
    for _ in range(100):
        p = rng.dirichlet(np.ones(10))
        assert 0.0 <= nn.uncertainty(p) <= 0.9 + 1e-12


def test_checkpoint_roundtrip(tmp_path):
    model = nn.init_model(77)
    path = tmp_path / "model.tesm"
    nn.save_model(path, model)
    raw = path.read_bytes()
    assert raw[:4] == b"TESM"
    assert len(raw) == 16 + nn.PARAM_COUNT * 8
    back = nn.load_model(path)
    for a, b in zip(model.params(), back.params()):
        assert np.array_equal(a, b)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.tesm"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    from tes.errors import FormatError

    with pytest.raises(FormatError):
        nn.load_model(path)


def test_train_sgd_deterministic(synth_train):
    model = nn.init_model(5)
    a = nn.train_sgd(
        model, synth_train.images[:256], synth_train.labels[:256],
        epochs=2, batch_size=32, lr=0.05, rng=derive_stream(5, ("t", 0, "s")),
    )
    b = nn.train_sgd(
        model, synth_train.images[:256], synth_train.labels[:256],
        epochs=2, batch_size=32, lr=0.05, rng=derive_stream(5, ("t", 0, "s")),
    )
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa, pb)
