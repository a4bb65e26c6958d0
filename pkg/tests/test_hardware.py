import numpy as np
import pytest

from quanos.hardware import (
    CalibrationError,
    EnergyTables,
    HardwareConfig,
    LayerDims,
    count_ops,
    default_calibration_text,
    default_configs,
    dims_from_model,
    layer_energy,
    layer_energy_config,
    layer_memory,
    network_report,
    parse_calibration,
    preset_dims,
)
from quanos.network import build_network
from quanos.presets import preset_architecture, preset_plan
from quanos.quantization import BitWidthPlan

T = EnergyTables()


def dims(I, O, N, M, k, k_b=None):
    return LayerDims("l", I, O, N, M, k, k_b)


def test_count_ops_unit_layer():
    assert count_ops(dims(1, 1, 1, 1, 1)) == (2, 1)


def test_count_ops_first_cifar_layer():
    n_a, n_c = count_ops(dims(3, 16, 32, 32, 3))
    assert n_a == 3072 + 432 == 3504
    assert n_c == 1024 * 3 * 9 * 16 == 442368


def test_count_ops_small_derived_case():
    assert count_ops(dims(2, 2, 4, 3, 2)) == (32 + 16, 9 * 2 * 4 * 2)


def test_energy_coefficients_at_16_bit():
    assert T.mac_energy(16) == pytest.approx(1.65)
    assert T.access_energy(16) == pytest.approx(40.0)
    assert layer_energy(dims(1, 1, 1, 1, 1, k_b=16), T) == pytest.approx(81.65)


def test_energy_coefficients_at_8_bit():
    assert T.mac_energy(8) == pytest.approx(0.875)
    assert T.access_energy(8) == pytest.approx(T.access_energy(16) / 2)


def test_energy_monotone_in_bits():
    base = dims(4, 8, 10, 10, 3)
    energies = [layer_energy(LayerDims("l", 4, 8, 10, 10, 3, k), T) for k in range(1, 17)]
    assert all(a < b for a, b in zip(energies, energies[1:]))
    memory = [layer_memory(LayerDims("l", 4, 8, 10, 10, 3, k)) for k in range(1, 17)]
    assert all(a < b for a, b in zip(memory, memory[1:]))


def test_doubling_output_channels_doubles_macs_and_memory():
    a = dims(4, 8, 10, 10, 3, 8)
    b = dims(4, 16, 10, 10, 3, 8)
    assert count_ops(b)[1] == 2 * count_ops(a)[1]
    assert layer_memory(b) == 2 * layer_memory(a)
    # weight-access term doubles too
    assert (count_ops(b)[0] - 10 * 10 * 4) == 2 * (count_ops(a)[0] - 10 * 10 * 4)


def test_standard_config_is_identity():
    d = dims(3, 5, 7, 7, 3, k_b=5)
    assert layer_energy_config(d, T, default_configs()["standard"]) == layer_energy(d, T)


def test_config_scales_only_the_mac_term():
    hw = HardwareConfig("custom", {16: 1.0, 8: 0.8})
    d = dims(1, 100, 1, 1, 1, k_b=8)  # N_A = 1 + 100, N_C = 100
    expected = 101 * T.access_energy(8) + 100 * T.mac_energy(8) * 0.8
    assert layer_energy_config(d, T, hw) == pytest.approx(expected)
    pure_mac = LayerDims("l", 1, 100, 1, 1, 1, 8)
    n_a, n_c = count_ops(pure_mac)
    assert n_c * T.mac_energy(8) * 0.8 == pytest.approx(100 * 0.875 * 0.8) == pytest.approx(70.0)


def test_sixteen_bit_energy_identical_across_configs():
    names = [d.name for d in preset_dims("vgg19-cifar")]
    plan16 = BitWidthPlan.uniform(names, 16)
    report = network_report("vgg19-cifar", plan16, configs=("standard", "dg", "dvafs"))
    e = {c: report.total_energy_pj(c) for c in ("standard", "dg", "dvafs")}
    assert e["standard"] == pytest.approx(e["dg"]) == pytest.approx(e["dvafs"])


def test_missing_multiplier_is_a_calibration_error():
    hw = HardwareConfig("partial", {16: 1.0, 8: 0.5})
    with pytest.raises(CalibrationError):
        layer_energy_config(dims(1, 1, 1, 1, 1, k_b=7), T, hw)


def test_config_table_validation():
    with pytest.raises(ValueError):
        HardwareConfig("bad", {16: 0.9})  # must be 1.0 at 16 bits
    with pytest.raises(ValueError):
        HardwareConfig("bad", {16: 1.0, 8: 0.5, 4: 0.7})  # not monotone


def test_layer_memory_example():
    assert layer_memory(dims(3, 16, 32, 32, 3, k_b=8)) == 3456


def test_layer_memory_requires_positive_bits():
    with pytest.raises(ValueError):
        layer_memory(dims(1, 1, 1, 1, 1, k_b=0))


def test_preset_dims_match_network_derived_dims():
    # dual route: the explicit tables must agree with shape propagation
    # through the actual architecture presets
    for preset in ("vgg19-cifar", "resnet18-cifar"):
        explicit = preset_dims(preset)
        derived = dims_from_model(build_network(preset_architecture(preset)))
        assert [(d.name, d.I, d.O, d.N, d.M, d.k) for d in explicit] == [
            (d.name, d.I, d.O, d.N, d.M, d.k) for d in derived
        ]


def test_vgg_preset_memory_at_16_bit():
    total = sum(layer_memory(LayerDims(d.name, d.I, d.O, d.N, d.M, d.k, 16)) for d in preset_dims("vgg19-cifar"))
    assert total / 1e9 == pytest.approx(0.32, rel=0.02)


def test_resnet_preset_memory_at_16_bit():
    total = sum(layer_memory(LayerDims(d.name, d.I, d.O, d.N, d.M, d.k, 16)) for d in preset_dims("resnet18-cifar"))
    assert total / 1e9 == pytest.approx(0.18, rel=0.05)


def test_vgg_published_table_ratios():
    names = [d.name for d in preset_dims("vgg19-cifar")]
    r8 = network_report("vgg19-cifar", BitWidthPlan.uniform(names, 8))
    r5 = network_report("vgg19-cifar", BitWidthPlan.uniform(names, 5))
    assert r8.energy_ratio("standard") == pytest.approx(0.51, abs=0.02)
    assert r5.energy_ratio("standard") == pytest.approx(0.33, abs=0.02)
    assert r8.baseline_energy_pj("standard") / 1e9 == pytest.approx(1.47, rel=0.15)
    assert r8.memory_ratio() == pytest.approx(0.5)


def test_vgg_hybrid_plan_ratios():
    report = network_report("vgg19-cifar", preset_plan("vgg19-table2"), configs=("standard", "dg", "dvafs"))
    assert report.memory_ratio() == pytest.approx(0.27, abs=0.02)
    assert report.energy_ratio("standard") == pytest.approx(0.26, abs=0.03)
    assert report.energy_ratio("dg") == pytest.approx(0.2, abs=0.02)
    assert report.energy_ratio("dvafs") == pytest.approx(0.17, abs=0.02)


def test_vgg_dg_dvafs_uniform_columns():
    names = [d.name for d in preset_dims("vgg19-cifar")]
    r8 = network_report("vgg19-cifar", BitWidthPlan.uniform(names, 8), configs=("dg", "dvafs"))
    r5 = network_report("vgg19-cifar", BitWidthPlan.uniform(names, 5), configs=("dg", "dvafs"))
    assert r8.energy_ratio("dg") == pytest.approx(0.42, abs=0.02)
    assert r5.energy_ratio("dg") == pytest.approx(0.24, abs=0.02)
    assert r8.energy_ratio("dvafs") == pytest.approx(0.32, abs=0.02)
    assert r5.energy_ratio("dvafs") == pytest.approx(0.2, abs=0.02)


def test_resnet_hybrid_plan_memory_ratio():
    report = network_report("resnet18-cifar", preset_plan("resnet18-table5"))
    assert report.memory_ratio() == pytest.approx(0.14, abs=0.02)
    names = [d.name for d in preset_dims("resnet18-cifar")]
    r8 = network_report("resnet18-cifar", BitWidthPlan.uniform(names, 8))
    assert r8.memory_ratio() == 0.5  # exact: memory is linear in bits


def test_network_energy_is_sum_of_layer_energies():
    plan = preset_plan("resnet18-table5")
    report = network_report("resnet18-cifar", plan)
    per_layer = sum(
        layer_energy(LayerDims(d.name, d.I, d.O, d.N, d.M, d.k, plan[d.name]), T)
        for d in preset_dims("resnet18-cifar")
    )
    assert report.total_energy_pj("standard") == pytest.approx(per_layer)


def test_report_against_derived_model_dims():
    m = build_network(preset_architecture("cnn-mnist"))
    plan = BitWidthPlan.uniform(m.quantizable_layers(), 8)
    report = network_report(m, plan)
    assert report.energy_ratio("standard") < 1.0
    assert report.memory_ratio() == 0.5


def test_plan_architecture_mismatch_rejected():
    plan = BitWidthPlan({"convX": 8}, k_initial=16)
    with pytest.raises(Exception):
        network_report("vgg19-cifar", plan)


def test_calibration_file_roundtrip():
    configs = parse_calibration(default_calibration_text())
    assert set(configs) == {"standard", "dg", "dvafs"}
    for name in ("dg", "dvafs"):
        assert configs[name].multipliers == default_configs()[name].multipliers


def test_calibration_parse_errors():
    with pytest.raises(ValueError):
        parse_calibration("dg 8\n")
