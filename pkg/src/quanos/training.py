"""SGD training loop, hybrid-quantization procedure, adversarial training.

The procedure: train a uniformly quantized model for a warmup stretch,
measure per-layer adversarial noise sensitivity on a seeded subset of the
training inputs, derive per-layer bit widths from the sensitivities, then
keep training under the hybrid plan. The iterative variant repeats the
measure/assign/train cycle until the plan reaches a fixed point or a
round budget runs out.

Forward passes honor the active plan; gradients and parameter updates are
always full precision (the quantizer is straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, attack_batch, clean_accuracy
from .datasets import Dataset, batches, sample_subset
from .network import NetworkModel
from .quantization import BitWidthPlan, assign_bitwidths
from .sensitivity import AnsReport, compute_ans
from .tensor import Tensor, softmax_cross_entropy


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    epochs_total: int = 10
    epochs_before_ans: int = 2
    lr: float = 0.05
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    adv_train: str = "none"  # none | fgsm | pgd
    attack: AttackConfig | None = None
    quanos: str = "off"  # off | single | iterative
    max_rounds: int = 3
    k_initial: int = 16
    ans_samples: int = 1000
    ans_eps: float = 0.05

    def __post_init__(self):
        if self.quanos not in ("off", "single", "iterative"):
            raise ValueError(f"unknown quanos mode {self.quanos!r}")
        if self.adv_train not in ("none", "fgsm", "pgd"):
            raise ValueError(f"unknown adv_train mode {self.adv_train!r}")
        if self.quanos != "off" and not self.epochs_before_ans < self.epochs_total:
            raise ValueError("quanos needs epochs_before_ans < epochs_total")
        if self.adv_train != "none" and self.attack is None:
            self.attack = AttackConfig(kind=self.adv_train, epsilon=0.1, alpha=0.02, steps=7, seed=self.seed)


class SGD:
    """Momentum SGD; weight decay applies to conv/dense weights only."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and name.endswith((".w", ".proj_w")):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype)
            p.zero_grad()


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr
    for e in cfg.lr_decay_epochs:
        if epoch >= e:
            lr *= cfg.lr_decay_factor
    return lr


def adv_train_step(model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, optimizer: SGD, lr: float) -> float:
    """One optimizer step on the batch augmented 50/50 with fresh adversaries.

    The adversaries are crafted white-box against the current model state;
    crafting clears its own parameter gradients, so the update sees only
    the augmented-batch loss.
    """
    if cfg.adv_train == "none":
        raise ValueError("adv_train_step called with adv_train='none'")
    x_adv = attack_batch(model, x, y, cfg.attack)
    x_aug = np.concatenate([x, x_adv], axis=0)
    y_aug = np.concatenate([y, y], axis=0)
    return _sgd_step(model, x_aug, y_aug, optimizer, lr)


def _sgd_step(model, x, y, optimizer: SGD, lr: float) -> float:
    mode = "quantized" if model.quant_plan is not None else "clean"
    logits = model.forward(x, mode=mode, training=True)
    loss = softmax_cross_entropy(logits, np.asarray(y))
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value}; lower the learning rate or check the data")
    model.zero_grad()
    loss.backward()
    optimizer.step(lr)
    return value


def train(
    model: NetworkModel,
    train_data: Dataset,
    test_data: Dataset | None,
    cfg: TrainConfig,
    epoch_offset: int = 0,
    epochs: int | None = None,
    optimizer: SGD | None = None,
    adv_enabled: bool = True,
) -> list[dict]:
    """Run SGD for ``epochs`` (default cfg.epochs_total); returns per-epoch metrics."""
    optimizer = optimizer or SGD(model.parameters(), momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n_epochs = cfg.epochs_total if epochs is None else epochs
    metrics = []
    for local in range(n_epochs):
        epoch = epoch_offset + local
        lr = _lr_at(cfg, epoch)
        losses = []
        for x, y in batches(train_data, cfg.batch_size, seed=cfg.seed * 100003 + epoch):
            if cfg.adv_train != "none" and adv_enabled:
                losses.append(adv_train_step(model, x, y, cfg, optimizer, lr))
            else:
                losses.append(_sgd_step(model, x, y, optimizer, lr))
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses))}
        if test_data is not None:
            row["test_acc"] = clean_accuracy(model, test_data)
        metrics.append(row)
    return metrics


def quanos_procedure(
    model: NetworkModel,
    train_data: Dataset,
    test_data: Dataset | None,
    cfg: TrainConfig,
) -> tuple[NetworkModel, BitWidthPlan, list[AnsReport], list[dict]]:
    """Warmup at uniform precision, then sensitivity-driven hybrid training.

    Returns the trained model, the final plan, every sensitivity report
    produced (one per round in iterative mode), and the metrics log. In
    iterative mode, rounds stop early once the plan repeats two rounds
    running. Adversarial training, when configured, engages only after the
    first plan is fixed.
    """
    if cfg.quanos == "off":
        raise ValueError("quanos_procedure needs cfg.quanos in ('single', 'iterative')")
    quantizable = model.quantizable_layers()
    model.set_plan(BitWidthPlan.uniform(quantizable, cfg.k_initial, k_initial=cfg.k_initial))
    optimizer = SGD(model.parameters(), momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    metrics = train(
        model, train_data, test_data, cfg,
        epochs=cfg.epochs_before_ans, optimizer=optimizer, adv_enabled=False,
    )
    reports: list[AnsReport] = []
    plan = model.quant_plan
    rounds = 1 if cfg.quanos == "single" else cfg.max_rounds
    epoch = cfg.epochs_before_ans
    remaining = cfg.epochs_total - cfg.epochs_before_ans

    for r in range(rounds):
        n = min(cfg.ans_samples, len(train_data))
        probe = sample_subset(train_data, n, seed=cfg.seed + r)
        report = compute_ans(model, probe, AttackConfig(kind="fgsm", epsilon=cfg.ans_eps, seed=cfg.seed), epoch_tag=epoch)
        reports.append(report)
        new_plan = assign_bitwidths(report.values, cfg.k_initial, provenance=f"ans-round-{r + 1}")
        stable = new_plan.entries == plan.entries and plan.provenance != "uniform"
        model.set_plan(new_plan)
        plan = new_plan
        metrics += train(
            model, train_data, test_data, cfg,
            epoch_offset=epoch, epochs=remaining, optimizer=optimizer, adv_enabled=True,
        )
        epoch += remaining
        if stable:
            break
    return model, plan, reports, metrics
