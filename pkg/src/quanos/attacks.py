"""White-box FGSM and PGD attacks plus robustness metrics.

Attacks differentiate the model's loss with respect to the input and run
against whatever forward mode the model currently operates in, so a
quantized model is attacked through its quantized (straight-through)
graph. Batch norm always runs in eval mode here; crafting adversaries
must not move the running statistics. Model parameters are never touched
and any parameter gradients produced while differentiating the input are
cleared before returning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset
from .tensor import Tensor, softmax_cross_entropy


class NumericError(ArithmeticError):
    """Gradient came back non-finite."""


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.05
    alpha: float | None = None  # pgd per-step size
    steps: int = 1
    clip: tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    random_start: bool = False
    signed: bool = True  # pgd: step along sign(grad); False steps along raw grad

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.clip[0] >= self.clip[1]:
            raise ValueError(f"clip range must satisfy lo < hi, got {self.clip}")
        if self.kind == "pgd":
            if self.alpha is None or self.alpha <= 0:
                raise ValueError("pgd needs alpha > 0")
            if self.steps < 1:
                raise ValueError("pgd needs steps >= 1")


def _model_mode(model) -> str:
    return "quantized" if getattr(model, "quant_plan", None) is not None else "clean"


def input_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(loss)/d(input) through the model's current forward mode."""
    xt = Tensor(x, requires_grad=True)
    logits = model.forward(xt, mode=_model_mode(model), training=False)
    loss = softmax_cross_entropy(logits, labels)
    loss.backward()
    g = xt.grad
    model.zero_grad()  # attacks must leave no gradient residue on parameters
    if not np.all(np.isfinite(g)):
        raise NumericError("input gradient is not finite")
    return g


def _project(x: np.ndarray, delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """clip(x + delta) with any float rounding pushed back inside the ball.

    After adding delta and clipping, x_adv - x can exceed epsilon by a few
    ulps; violating entries are nudged toward x until the measured L-inf
    distance is within budget exactly.
    """
    lo, hi = cfg.clip
    x_adv = np.clip(x + delta, lo, hi)
    eps = np.asarray(cfg.epsilon, dtype=x.dtype)
    for _ in range(16):
        d = x_adv - x
        over = d > eps
        under = d < -eps
        if not (over.any() or under.any()):
            break
        x_adv = np.where(over, np.nextafter(x_adv, x), x_adv)
        x_adv = np.where(under, np.nextafter(x_adv, x), x_adv)
    return x_adv


def fgsm(model, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Single-step gradient-sign attack: x + epsilon * sign(grad), clipped."""
    x = np.asarray(x)
    g = input_gradient(model, x, labels)
    delta = (np.asarray(cfg.epsilon, dtype=x.dtype) * np.sign(g)).astype(x.dtype)
    return _project(x, delta, cfg)


def pgd(model, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated signed steps projected onto the epsilon ball and clip range.

    Starts at x unless random_start draws a seeded uniform point inside the
    ball. With steps=1, alpha=epsilon and no random start this computes
    exactly the FGSM update.
    """
    x = np.asarray(x)
    eps = np.asarray(cfg.epsilon, dtype=x.dtype)
    lo, hi = cfg.clip
    if cfg.random_start:
        rng = rng or np.random.default_rng(cfg.seed)
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
    else:
        delta = np.zeros_like(x)
    for _ in range(cfg.steps):
        x_t = np.clip(x + delta, lo, hi)
        g = input_gradient(model, x_t, labels)
        step = np.asarray(cfg.alpha, dtype=x.dtype) * (np.sign(g) if cfg.signed else g).astype(x.dtype)
        delta = np.clip(delta + step, -eps, eps)
    return _project(x, delta, cfg)


def attack_batch(model, x, labels, cfg: AttackConfig, rng=None) -> np.ndarray:
    if cfg.kind == "fgsm":
        return fgsm(model, x, labels, cfg)
    return pgd(model, x, labels, cfg, rng=rng)


def clean_accuracy(model, data: Dataset, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(data), batch_size):
        x = data.images[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        correct += int((model.predict(x) == y).sum())
    return correct / len(data)


def adversarial_accuracy(model, data: Dataset, cfg: AttackConfig, batch_size: int = 256) -> float:
    """Accuracy under per-sample white-box attacks; deterministic given cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    correct = 0
    for start in range(0, len(data), batch_size):
        x = data.images[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        x_adv = attack_batch(model, x, y, cfg, rng=rng)
        correct += int((model.predict(x_adv) == y).sum())
    return correct / len(data)


def adversarial_loss(clean_acc: float, adv_acc: float) -> float:
    """Robustness gap in percentage points; negative means the attack helped."""
    return (clean_acc - adv_acc) * 100.0
