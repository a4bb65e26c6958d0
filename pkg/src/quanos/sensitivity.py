"""Per-layer adversarial noise sensitivity and activation-ablation studies.

The sensitivity of a layer is the L2 error ratio between its activations
on an adversarial input and on the clean input,
||a_adv - a|| / ||a||, computed per sample on the flattened post-ReLU
activation and averaged over the sample set. Layers whose computation
shifts more under attack score higher, and the bit-width assignment
quantizes them harder.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, attack_batch, adversarial_accuracy
from .datasets import Dataset


@dataclass
class AnsReport:
    values: dict[str, float]
    sample_count: int
    attack: AttackConfig
    epoch_tag: int = -1
    aggregation: str = "mean_per_sample"

    def __post_init__(self):
        for name, v in self.values.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"layer {name}: sensitivity {v} must be finite and >= 0")

    def ranked(self) -> list[tuple[str, float]]:
        """Layers ordered from most to least sensitive."""
        return sorted(self.values.items(), key=lambda kv: -kv[1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,ans\n")
        for name, v in self.values.items():
            buf.write(f"{name},{v:.10g}\n")
        return buf.getvalue()


def compute_ans(
    model,
    samples: Dataset,
    cfg: AttackConfig | None = None,
    batch_size: int = 128,
    epoch_tag: int = -1,
) -> AnsReport:
    """Mean per-sample activation error ratio for every quantizable layer.

    Each batch runs a clean capturing forward, the white-box attack, and an
    adversarial capturing forward, both through the model's current mode.
    A sample whose clean activation is identically zero contributes ratio 0
    for that layer (a dead layer carries no sensitivity signal).
    """
    if len(samples) == 0:
        raise ValueError("sensitivity needs a non-empty sample set")
    cfg = cfg or AttackConfig(kind="fgsm", epsilon=0.05)
    layers = model.quantizable_layers()
    sums = {name: 0.0 for name in layers}
    rng = np.random.default_rng(cfg.seed)

    for start in range(0, len(samples), batch_size):
        x = samples.images[start : start + batch_size]
        y = samples.labels[start : start + batch_size]
        model.forward(x, mode=_mode(model), capture=True, training=False)
        clean = {name: model.capture_buffer[name] for name in layers}
        x_adv = attack_batch(model, x, y, cfg, rng=rng)
        model.forward(x_adv, mode=_mode(model), capture=True, training=False)
        for name in layers:
            a = clean[name].reshape(len(x), -1).astype(np.float64)
            a_adv = model.capture_buffer[name].reshape(len(x), -1).astype(np.float64)
            num = np.linalg.norm(a_adv - a, axis=1)
            den = np.linalg.norm(a, axis=1)
            ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
            sums[name] += float(ratio.sum())

    values = {name: sums[name] / len(samples) for name in layers}
    return AnsReport(values=values, sample_count=len(samples), attack=cfg, epoch_tag=epoch_tag)


def _mode(model) -> str:
    return "quantized" if getattr(model, "quant_plan", None) is not None else "clean"


class AblatedView:
    """Forward-pass view of a model with a fixed fraction of one layer's
    activation units clamped to zero; the wrapped parameters are shared,
    never copied or modified."""

    def __init__(self, model, layer: str, fraction: float, seed: int):
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"fraction must be in [0, 1], got {fraction}")
        spec = next((s for s in model.specs if s.name == layer), None)
        if spec is None or spec.kind not in ("conv", "dense"):
            raise ValueError(f"unknown or non-activating layer {layer!r}")
        self.model = model
        self.layer = layer
        self.fraction = fraction
        shape = spec.out_shape
        n = int(np.prod(shape))
        n_off = int(round(fraction * n))
        mask = np.ones(n, dtype=model.dtype)
        if n_off:
            off = np.random.default_rng(seed).permutation(n)[:n_off]
            mask[off] = 0.0
        self.mask = mask.reshape(shape)

    @property
    def quant_plan(self):
        return self.model.quant_plan

    def forward(self, x, mode="clean", capture=False, training=False):
        out = self.model.forward(x, mode=mode, capture=capture, training=training, ablation=(self.layer, self.mask))
        if capture:
            self.capture_buffer = self.model.capture_buffer
        return out

    def predict(self, x, mode=None):
        mode = mode or _mode(self.model)
        return self.forward(x, mode=mode).data.argmax(axis=1)

    def zero_grad(self):
        self.model.zero_grad()

    def quantizable_layers(self):
        return self.model.quantizable_layers()


def ablate(model, layer: str, fraction: float, seed: int) -> AblatedView:
    """Seeded view with a random ``fraction`` of one layer's units zeroed."""
    return AblatedView(model, layer, fraction, seed)


def ablation_curve(model, layer: str, data: Dataset, cfg: AttackConfig, p_grid) -> list[tuple[float, float]]:
    """(fraction ablated, adversarial accuracy) rows; attacks are crafted
    white-box against the ablated view itself."""
    rows = []
    for p in p_grid:
        view = ablate(model, layer, p, seed=cfg.seed)
        rows.append((float(p), adversarial_accuracy(view, data, cfg)))
    return rows
