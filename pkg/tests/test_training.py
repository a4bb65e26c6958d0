import numpy as np
import pytest

from quanos.attacks import AttackConfig
from quanos.datasets import Dataset, batches
from quanos.network import build_network
from quanos.tensor import Tensor, softmax_cross_entropy
from quanos.training import SGD, DivergenceError, TrainConfig, adv_train_step, quanos_procedure, train

CNN = "input 1 6 6\nconv out=4 k=3 pad=1\nrelu\nconv out=4 k=3 pad=1\nrelu\nmaxpool\ndense out=10\n"
MLP2 = "input 1 1 2\ndense out=8\nrelu\ndense out=2\n"


def toy_separable(n=64, seed=0):
    """Two linearly separable point clouds in 2-d."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    centers = np.where(labels[:, None] == 0, [-1.0, -1.0], [1.0, 1.0])
    pts = centers + rng.normal(scale=0.2, size=(n, 2))
    return Dataset(pts.reshape(n, 1, 1, 2).astype(np.float32), labels.astype(np.int64), "train", 2)


def random_data(n, seed, classes=10):
    rng = np.random.default_rng(seed)
    return Dataset(
        rng.uniform(0, 1, (n, 1, 6, 6)).astype(np.float32),
        rng.integers(0, classes, n).astype(np.int64),
        "train",
        classes,
    )


def test_zero_epochs_leaves_model_unchanged():
    m = build_network(CNN, seed=0)
    before = m.state_hash()
    metrics = train(m, random_data(16, 0), None, TrainConfig(epochs_total=0, batch_size=8))
    assert metrics == []
    assert m.state_hash() == before


def test_separable_toy_reaches_perfect_train_accuracy():
    data = toy_separable()
    m = build_network(MLP2, seed=1)
    train(m, data, None, TrainConfig(epochs_total=50, lr=0.1, batch_size=16, weight_decay=0.0, seed=1))
    acc = (m.predict(data.images) == data.labels).mean()
    assert acc == 1.0


def test_fixed_seed_reproduces_epoch_one_loss():
    cfg = TrainConfig(epochs_total=1, batch_size=8, seed=5)
    m1 = build_network(CNN, seed=5)
    m2 = build_network(CNN, seed=5)
    data = random_data(32, 7)
    loss1 = train(m1, data, None, cfg)[0]["train_loss"]
    loss2 = train(m2, data, None, cfg)[0]["train_loss"]
    assert loss1 == loss2


def test_trainer_reduces_to_plain_sgd():
    # independent reference loop: same batches, hand-written update rule
    data = random_data(24, 9)
    cfg = TrainConfig(epochs_total=2, lr=0.03, batch_size=8, seed=3, momentum=0.9, weight_decay=5e-4)
    m = build_network(CNN, seed=3)
    metrics = train(m, data, None, cfg)

    ref = build_network(CNN, seed=3)
    velocity = {name: np.zeros_like(p.data) for name, p in ref.params.items()}
    ref_losses = []
    for epoch in range(2):
        losses = []
        for x, y in batches(data, 8, seed=cfg.seed * 100003 + epoch):
            loss = softmax_cross_entropy(ref.forward(x, training=True), y)
            losses.append(float(loss.data))
            ref.zero_grad()
            loss.backward()
            for name, p in ref.params.items():
                g = p.grad
                if name.endswith(".w"):
                    g = g + 5e-4 * p.data
                velocity[name] = 0.9 * velocity[name] + g
                p.data -= (0.03 * velocity[name]).astype(p.data.dtype)
                p.zero_grad()
        ref_losses.append(float(np.mean(losses)))

    assert metrics[0]["train_loss"] == pytest.approx(ref_losses[0], rel=1e-6)
    assert metrics[1]["train_loss"] == pytest.approx(ref_losses[1], rel=1e-6)
    assert m.state_hash() == ref.state_hash()


def test_divergence_guard():
    m = build_network(MLP2, seed=0)
    data = toy_separable(32)
    with pytest.raises(DivergenceError):
        train(m, data, None, TrainConfig(epochs_total=60, lr=1e9, batch_size=8, seed=0))


def test_lr_decay_schedule():
    data = random_data(8, 1)
    cfg = TrainConfig(epochs_total=3, lr=0.1, lr_decay_epochs=(1, 2), lr_decay_factor=0.1, batch_size=8)
    m = build_network(CNN, seed=0)
    metrics = train(m, data, None, cfg)
    assert [round(r["lr"], 6) for r in metrics] == [0.1, 0.01, 0.001]


# -- adversarial training -----------------------------------------------------


def test_adv_step_with_zero_eps_equals_plain_step_on_doubled_batch():
    data = random_data(8, 11)
    x, y = data.images, data.labels
    cfg = TrainConfig(adv_train="fgsm", attack=AttackConfig(kind="fgsm", epsilon=0.0), epochs_total=1)

    m1 = build_network(CNN, seed=2)
    opt1 = SGD(m1.parameters(), momentum=0.9)
    loss_adv = adv_train_step(m1, x, y, cfg, opt1, lr=0.05)

    m2 = build_network(CNN, seed=2)
    opt2 = SGD(m2.parameters(), momentum=0.9)
    x2 = np.concatenate([x, x], axis=0)
    y2 = np.concatenate([y, y], axis=0)
    loss_plain = softmax_cross_entropy(m2.forward(x2, training=True), y2)
    m2.zero_grad()
    loss_plain.backward()
    opt2.step(0.05)

    assert loss_adv == pytest.approx(float(loss_plain.data), rel=1e-6)
    assert m1.state_hash() == m2.state_hash()


def test_adv_step_augments_batch_two_to_one(monkeypatch):
    import quanos.training as training_mod

    sizes = []
    orig = training_mod._sgd_step

    def spy(model, x, y, opt, lr):
        sizes.append(len(x))
        return orig(model, x, y, opt, lr)

    monkeypatch.setattr(training_mod, "_sgd_step", spy)
    m = build_network(CNN, seed=1)
    cfg = TrainConfig(adv_train="fgsm", attack=AttackConfig(kind="fgsm", epsilon=0.1), epochs_total=1)
    adv_train_step(m, *_xy(random_data(8, 3)), cfg, SGD(m.parameters()), lr=0.01)
    assert sizes == [16]


def test_attack_generation_leaves_no_gradient_residue():
    m = build_network(CNN, seed=1)
    cfg = TrainConfig(adv_train="fgsm", attack=AttackConfig(kind="fgsm", epsilon=0.1), epochs_total=1)
    adv_train_step(m, *_xy(random_data(8, 3)), cfg, SGD(m.parameters()), lr=0.01)
    assert all(p.grad is None for p in m.params.values())


def _xy(d):
    return d.images, d.labels


# -- hybrid-quantization procedure ------------------------------------------------


def test_zero_sensitivity_keeps_uniform_plan():
    # eps=0 probe makes every layer's sensitivity exactly 0, so the plan
    # stays at the uniform initial precision
    m = build_network(CNN, seed=0)
    data = random_data(32, 5)
    cfg = TrainConfig(epochs_total=2, epochs_before_ans=1, batch_size=8, quanos="single", ans_eps=0.0, ans_samples=16)
    _, plan, reports, _ = quanos_procedure(m, data, None, cfg)
    assert all(k == 16 for k in plan.entries.values())
    assert all(v == 0.0 for v in reports[0].values.values())


def test_procedure_quantizes_something_on_a_real_model():
    m = build_network(CNN, seed=0)
    data = random_data(64, 6)
    cfg = TrainConfig(epochs_total=2, epochs_before_ans=1, batch_size=16, quanos="single", ans_samples=32, k_initial=16)
    _, plan, reports, metrics = quanos_procedure(m, data, None, cfg)
    assert len(reports) == 1
    assert any(k < 16 for k in plan.entries.values())
    assert len(metrics) == 2


def test_iterative_mode_logs_at_most_max_rounds_reports():
    m = build_network(CNN, seed=0)
    data = random_data(32, 8)
    cfg = TrainConfig(
        epochs_total=2, epochs_before_ans=1, batch_size=16,
        quanos="iterative", max_rounds=3, ans_samples=16,
    )
    _, _, reports, _ = quanos_procedure(m, data, None, cfg)
    assert 1 <= len(reports) <= 3
    assert [r.epoch_tag for r in reports] == sorted(r.epoch_tag for r in reports)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(quanos="single", epochs_total=2, epochs_before_ans=2)
    with pytest.raises(ValueError):
        TrainConfig(adv_train="bogus")
