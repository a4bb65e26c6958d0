"""Fake quantization and sensitivity-driven bit-width planning.

Quantization is per-tensor symmetric uniform with a max-abs scale. The
forward pass snaps values onto the k-bit grid; the backward pass is the
identity (straight-through), so training and attack gradients always see
full precision.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, straight_through


class PlanError(ValueError):
    """Bit-width plan does not cover the target model's quantizable layers."""


def quantize_array(a: np.ndarray, k: int) -> np.ndarray:
    """Snap ``a`` onto the symmetric uniform k-bit grid.

    k >= 2: scale s = max|a| / (2^(k-1) - 1), output round(a/s) * s with
    ties rounded half away from zero, giving at most 2^k - 1 distinct
    levels. k == 1 is binary: sign(a) times the mean nonzero magnitude.
    An all-zero array has no defined scale and is returned unchanged
    (zero is exact anyway).

    Evaluated in a canonical form (normalize by max|a|, round, rescale)
    so that re-quantizing an already-quantized array reproduces it bit
    for bit: the max-magnitude element normalizes to exactly 1.0, hence
    the second pass sees the same scale and the same integer levels.
    """
    if k < 1:
        raise ValueError(f"bit width must be >= 1, got {k}")
    a = np.asarray(a)
    mags = np.abs(a)
    amax = mags.max() if a.size else 0.0
    if amax == 0.0:
        return a.copy()
    if k == 1:
        nonzero = mags[mags > 0]
        lo, hi = nonzero.min(), nonzero.max()
        level = hi if lo == hi else nonzero.mean(dtype=a.dtype)
        return (np.sign(a) * level).astype(a.dtype, copy=False)
    n_max = 2 ** (k - 1) - 1
    n = _round_half_away(a / amax * n_max)
    return ((n / n_max) * amax).astype(a.dtype, copy=False)


def quantization_scale(a: np.ndarray, k: int) -> float:
    """Grid step used by :func:`quantize_array` for k >= 2 (0 for all-zero input)."""
    if k < 2:
        raise ValueError("scale is defined for k >= 2")
    amax = float(np.abs(a).max()) if np.asarray(a).size else 0.0
    return amax / (2 ** (k - 1) - 1) if amax else 0.0


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def fake_quantize(x: Tensor, k: int) -> Tensor:
    """Graph op: k-bit grid in the forward pass, identity gradient."""
    return straight_through(x, lambda a: quantize_array(a, k))


@dataclass
class BitWidthPlan:
    """Per-layer precision assignment; weights and activations share k_l."""

    entries: dict[str, int]
    k_initial: int = 16
    provenance: str = "manual"

    def __post_init__(self):
        for name, k in self.entries.items():
            if not 1 <= int(k) <= self.k_initial:
                raise PlanError(f"layer {name}: k={k} outside [1, {self.k_initial}]")
        self.entries = {name: int(k) for name, k in self.entries.items()}

    def __getitem__(self, layer: str) -> int:
        try:
            return self.entries[layer]
        except KeyError:
            raise PlanError(f"plan has no entry for layer {layer!r}") from None

    def __contains__(self, layer: str) -> bool:
        return layer in self.entries

    def validate_against(self, layer_names) -> None:
        names = list(layer_names)
        missing = [n for n in names if n not in self.entries]
        extra = [n for n in self.entries if n not in names]
        if missing or extra:
            raise PlanError(f"plan mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,bits\n")
        for name, k in self.entries.items():
            buf.write(f"{name},{k}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, k_initial: int = 16, provenance: str = "file") -> "BitWidthPlan":
        entries = {}
        lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if lines and lines[0].lower().replace(" ", "") == "layer,bits":
            lines = lines[1:]
        for ln in lines:
            name, _, bits = ln.partition(",")
            if not bits:
                raise PlanError(f"malformed plan line: {ln!r}")
            entries[name.strip()] = int(bits)
        if not entries:
            raise PlanError("plan file has no entries")
        return cls(entries, k_initial=k_initial, provenance=provenance)

    @classmethod
    def uniform(cls, layer_names, k: int, k_initial: int | None = None) -> "BitWidthPlan":
        return cls({n: k for n in layer_names}, k_initial=k_initial or max(k, 16), provenance="uniform")


def assign_bitwidths(ans_values: dict[str, float], k_initial: int, provenance: str = "ans") -> BitWidthPlan:
    """Map per-layer sensitivity ratios onto bit widths.

    k_l = k_initial - round(ans_l * k_initial), with the sensitivity clamped
    to [0, 1] first and the result floored at 1 bit. More sensitive layers
    end up at lower precision.
    """
    if k_initial < 1:
        raise ValueError(f"k_initial must be >= 1, got {k_initial}")
    entries = {}
    for name, v in ans_values.items():
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"layer {name}: sensitivity {v} must be finite and >= 0")
        s = min(float(v), 1.0)
        k = k_initial - int(_round_half_away(np.asarray(s * k_initial)))
        entries[name] = max(1, min(k, k_initial))
    return BitWidthPlan(entries, k_initial=k_initial, provenance=provenance)


def plan_average_bits(plan: BitWidthPlan) -> float:
    """Arithmetic mean of the planned bit widths."""
    if not plan.entries:
        raise PlanError("plan is empty")
    return sum(plan.entries.values()) / len(plan.entries)
