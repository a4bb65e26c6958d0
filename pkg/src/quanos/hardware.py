"""Analytical energy and memory model of a precision-scalable MAC accelerator.

Per layer with I input channels, O output channels, N x N input maps,
k x k kernels and M x M outputs, all at k_b-bit precision:

    accesses  N_A = N^2 * I + k^2 * I * O
    MACs      N_C = M^2 * I * k^2 * O
    energy    E   = N_A * (2.5 * k_b) pJ + N_C * (3.1 * k_b / 32 + 0.1) pJ
    memory    M_l = I * O * k^2 * k_b bits

Precision-scalable MAC modes (data gating, subword-parallel DVAFS) scale
only the MAC term by a per-bit-width multiplier normalized to the 16-bit
baseline. The multiplier curves of the underlying circuits are not
published as numbers, so the shipped defaults are calibrated against the
published accelerator result tables; they are plain text and editable.

The estimate deliberately ignores instruction/control flow and any
weight or input reuse.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .network import NetworkModel, build_network
from .quantization import BitWidthPlan
from .presets import preset_architecture


class CalibrationError(KeyError):
    """Hardware config has no energy multiplier for the requested bit width."""


@dataclass(frozen=True)
class LayerDims:
    name: str
    I: int
    O: int
    N: int
    M: int
    k: int
    k_b: int | None = None


@dataclass(frozen=True)
class EnergyTables:
    """45nm-projection energy coefficients, picojoules."""

    access_pj_per_bit: float = 2.5
    mult32_pj: float = 3.1
    add32_pj: float = 0.1

    def access_energy(self, k_b: int) -> float:
        return self.access_pj_per_bit * k_b

    def mac_energy(self, k_b: int) -> float:
        return self.mult32_pj * k_b / 32.0 + self.add32_pj


@dataclass(frozen=True)
class HardwareConfig:
    """Named MAC configuration with per-bit-width energy multipliers."""

    name: str
    multipliers: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name != "standard":
            if self.multipliers.get(16) != 1.0:
                raise ValueError(f"config {self.name!r}: multiplier at 16 bits must be 1.0")
            ks = sorted(self.multipliers)
            vals = [self.multipliers[k] for k in ks]
            if any(not 0.0 < v <= 1.0 for v in vals):
                raise ValueError(f"config {self.name!r}: multipliers must lie in (0, 1]")
            if any(a > b + 1e-12 for a, b in zip(vals, vals[1:])):
                raise ValueError(f"config {self.name!r}: multipliers must be non-increasing toward lower bit widths")

    def multiplier(self, k_b: int) -> float:
        if self.name == "standard":
            return 1.0
        try:
            return self.multipliers[k_b]
        except KeyError:
            raise CalibrationError(f"config {self.name!r} has no multiplier for k_b={k_b}") from None


# Calibrated default multiplier tables (see module docstring). DG gates
# the unused LSBs of every operand; DVAFS additionally reuses idle
# multiplier subwords, which only engages at power-of-two subdivisions,
# hence the plateau above 8 bits.
_DG_TABLE = {
    1: 0.330038, 2: 0.353122, 3: 0.376205, 4: 0.399288, 5: 0.422371,
    6: 0.482872, 7: 0.543374, 8: 0.603875, 9: 0.653391, 10: 0.702906,
    11: 0.752422, 12: 0.801938, 13: 0.851453, 14: 0.900969, 15: 0.950484, 16: 1.0,
}
_DVAFS_TABLE = {
    1: 0.020230, 2: 0.040461, 3: 0.060691, 4: 0.080922, 5: 0.168587,
    6: 0.170514, 7: 0.172441, 8: 0.180148, 9: 0.977712, 10: 0.977712,
    11: 0.977712, 12: 0.977712, 13: 0.977712, 14: 0.977712, 15: 0.977712, 16: 1.0,
}

STANDARD = HardwareConfig("standard")


def default_configs() -> dict[str, HardwareConfig]:
    return {
        "standard": STANDARD,
        "dg": HardwareConfig("dg", dict(_DG_TABLE)),
        "dvafs": HardwareConfig("dvafs", dict(_DVAFS_TABLE)),
    }


def default_calibration_text() -> str:
    lines = ["# config  k_b  multiplier (MAC energy relative to the 16-bit baseline)"]
    for name, table in (("dg", _DG_TABLE), ("dvafs", _DVAFS_TABLE)):
        for k in sorted(table):
            lines.append(f"{name} {k} {table[k]:.6f}")
    return "\n".join(lines) + "\n"


def parse_calibration(text: str) -> dict[str, HardwareConfig]:
    """Parse a 'config k_b multiplier' text table into HardwareConfigs."""
    tables: dict[str, dict[int, float]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"calibration line {lineno}: expected 'config k_b multiplier', got {raw!r}")
        name, k_b, mult = parts[0], int(parts[1]), float(parts[2])
        tables.setdefault(name, {})[k_b] = mult
    configs = {"standard": STANDARD}
    for name, table in tables.items():
        configs[name] = HardwareConfig(name, table)
    return configs


# -- per-layer quantities -----------------------------------------------------


def count_ops(d: LayerDims) -> tuple[int, int]:
    """(memory accesses N_A, MAC operations N_C) as exact integers."""
    n_a = d.N * d.N * d.I + d.k * d.k * d.I * d.O
    n_c = d.M * d.M * d.I * d.k * d.k * d.O
    return n_a, n_c


def layer_energy(d: LayerDims, tables: EnergyTables = EnergyTables()) -> float:
    """Layer energy in picojoules at d.k_b, standard configuration."""
    n_a, n_c = count_ops(d)
    return n_a * tables.access_energy(d.k_b) + n_c * tables.mac_energy(d.k_b)


def layer_energy_config(d: LayerDims, tables: EnergyTables, hw: HardwareConfig) -> float:
    """Layer energy in picojoules with the MAC term scaled by the config.

    Only the compute term scales; access energy depends on the word width
    alone, independent of the MAC circuit configuration.
    """
    n_a, n_c = count_ops(d)
    return n_a * tables.access_energy(d.k_b) + n_c * tables.mac_energy(d.k_b) * hw.multiplier(d.k_b)


def layer_memory(d: LayerDims) -> int:
    """Weight storage in bits: I * O * k^2 * k_b."""
    if d.k_b is None or d.k_b < 1:
        raise ValueError(f"layer {d.name}: k_b must be >= 1, got {d.k_b}")
    return d.I * d.O * d.k * d.k * d.k_b


# -- presets and model-derived dims --------------------------------------------


def dims_from_model(model: NetworkModel) -> list[LayerDims]:
    """LayerDims for every quantizable layer of a network (dense as 1x1)."""
    quantizable = set(model.quantizable_layers())
    dims = []
    for s in model.specs:
        if s.name not in quantizable:
            continue
        if s.kind == "conv":
            dims.append(LayerDims(s.name, s.in_ch, s.out_ch, s.in_shape[1], s.out_shape[1], s.k))
        elif s.kind == "dense":
            dims.append(LayerDims(s.name, s.in_features, s.out_features, 1, 1, 1))
    return dims


def _explicit(rows) -> list[LayerDims]:
    return [LayerDims(name, I, O, N, M, k) for name, I, O, N, M, k in rows]


# Explicit per-layer geometry so the published tables reproduce without
# building or training any model (pooling-driven N and M included).
VGG19_CIFAR_DIMS = _explicit(
    [
        ("conv1", 3, 64, 32, 32, 3),
        ("conv2", 64, 64, 32, 32, 3),
        ("conv3", 64, 128, 16, 16, 3),
        ("conv4", 128, 128, 16, 16, 3),
        ("conv5", 128, 256, 8, 8, 3),
        ("conv6", 256, 256, 8, 8, 3),
        ("conv7", 256, 256, 8, 8, 3),
        ("conv8", 256, 256, 8, 8, 3),
        ("conv9", 256, 512, 4, 4, 3),
        ("conv10", 512, 512, 4, 4, 3),
        ("conv11", 512, 512, 4, 4, 3),
        ("conv12", 512, 512, 4, 4, 3),
        ("conv13", 512, 512, 2, 2, 3),
        ("conv14", 512, 512, 2, 2, 3),
        ("conv15", 512, 512, 2, 2, 3),
        ("conv16", 512, 512, 2, 2, 3),
        ("fc1", 512, 512, 1, 1, 1),
    ]
)

RESNET18_CIFAR_DIMS = _explicit(
    [
        ("conv1", 3, 64, 32, 32, 3),
        ("conv2", 64, 64, 32, 32, 3),
        ("conv3", 64, 64, 32, 32, 3),
        ("conv4", 64, 64, 32, 32, 3),
        ("conv5", 64, 64, 32, 32, 3),
        ("conv6", 64, 128, 32, 16, 3),
        ("conv7", 128, 128, 16, 16, 3),
        ("conv8", 128, 128, 16, 16, 3),
        ("conv9", 128, 128, 16, 16, 3),
        ("conv10", 128, 256, 16, 8, 3),
        ("conv11", 256, 256, 8, 8, 3),
        ("conv12", 256, 256, 8, 8, 3),
        ("conv13", 256, 256, 8, 8, 3),
        ("conv14", 256, 512, 8, 4, 3),
        ("conv15", 512, 512, 4, 4, 3),
        ("conv16", 512, 512, 4, 4, 3),
        ("conv17", 512, 512, 4, 4, 3),
    ]
)

_PRESET_DIMS = {"vgg19-cifar": VGG19_CIFAR_DIMS, "resnet18-cifar": RESNET18_CIFAR_DIMS}


def preset_dims(name: str) -> list[LayerDims]:
    try:
        return list(_PRESET_DIMS[name])
    except KeyError:
        raise KeyError(f"unknown hardware preset {name!r}; available: {sorted(_PRESET_DIMS)}") from None


def resolve_dims(arch) -> list[LayerDims]:
    """Accept a preset name, a NetworkModel, or an explicit dims list."""
    if isinstance(arch, str):
        if arch in _PRESET_DIMS:
            return preset_dims(arch)
        return dims_from_model(build_network(preset_architecture(arch)))
    if isinstance(arch, NetworkModel):
        return dims_from_model(arch)
    return list(arch)


# -- network-level report --------------------------------------------------------


@dataclass
class EnergyReport:
    """Per-layer energy rows and network totals for a set of MAC configs.

    Totals and ratios are always recomputed from the rows, never cached.
    """

    rows: dict[str, list[dict]]  # config name -> per-layer rows
    memory_rows: list[dict]
    baseline_rows: dict[str, list[dict]]
    baseline_memory_rows: list[dict]
    plan_name: str = "plan"
    baseline_name: str = "baseline"

    def total_energy_pj(self, config: str) -> float:
        return sum(r["total_pj"] for r in self.rows[config])

    def baseline_energy_pj(self, config: str) -> float:
        return sum(r["total_pj"] for r in self.baseline_rows[config])

    def energy_ratio(self, config: str) -> float:
        return self.total_energy_pj(config) / self.baseline_energy_pj(config)

    def total_memory_bits(self) -> int:
        return sum(r["bits"] for r in self.memory_rows)

    def baseline_memory_bits(self) -> int:
        return sum(r["bits"] for r in self.baseline_memory_rows)

    def memory_ratio(self) -> float:
        return self.total_memory_bits() / self.baseline_memory_bits()

    def configs(self) -> list[str]:
        return list(self.rows)

    def summary_table(self) -> str:
        """Human-readable totals, millijoules at 3 significant digits."""
        lines = [f"{'config':<10}{'energy':>12}{'ratio':>9}"]
        for cfg in self.configs():
            mj = self.total_energy_pj(cfg) / 1e9
            lines.append(f"{cfg:<10}{_sig3(mj):>10} mJ{self.energy_ratio(cfg):>8.2f}x")
        mem = self.total_memory_bits() / 1e9
        lines.append(f"{'memory':<10}{_sig3(mem):>8} Gbit{self.memory_ratio():>8.2f}x")
        return "\n".join(lines)


def _sig3(v: float) -> str:
    return f"{v:.3g}"


def network_report(
    arch,
    plan: BitWidthPlan,
    configs=("standard",),
    baseline: BitWidthPlan | None = None,
    tables: EnergyTables = EnergyTables(),
    hw_configs: dict[str, HardwareConfig] | None = None,
) -> EnergyReport:
    """Energy/memory report for a plan against a baseline (default uniform 16-bit)."""
    dims = resolve_dims(arch)
    names = [d.name for d in dims]
    plan.validate_against(names)
    if baseline is None:
        baseline = BitWidthPlan.uniform(names, 16)
    baseline.validate_against(names)
    available = hw_configs or default_configs()
    missing = [c for c in configs if c not in available]
    if missing:
        raise CalibrationError(f"no calibration for configs {missing}")

    def rows_for(p: BitWidthPlan, cfg: HardwareConfig) -> list[dict]:
        out = []
        for d in dims:
            dk = replace(d, k_b=p[d.name])
            n_a, n_c = count_ops(dk)
            access = n_a * tables.access_energy(dk.k_b)
            mac = n_c * tables.mac_energy(dk.k_b) * cfg.multiplier(dk.k_b)
            out.append(
                {"layer": d.name, "N_A": n_a, "N_C": n_c, "k_b": dk.k_b,
                 "access_pj": access, "mac_pj": mac, "total_pj": access + mac}
            )
        return out

    def memory_rows_for(p: BitWidthPlan) -> list[dict]:
        return [
            {"layer": d.name, "k_b": p[d.name], "bits": layer_memory(replace(d, k_b=p[d.name]))}
            for d in dims
        ]

    return EnergyReport(
        rows={c: rows_for(plan, available[c]) for c in configs},
        memory_rows=memory_rows_for(plan),
        baseline_rows={c: rows_for(baseline, available[c]) for c in configs},
        baseline_memory_rows=memory_rows_for(baseline),
        plan_name=plan.provenance,
        baseline_name=baseline.provenance,
    )
