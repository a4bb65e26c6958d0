import numpy as np
import pytest

import quanos.network as network_mod
from quanos.network import CorruptionError, ValidationError, build_network, load_checkpoint, save_checkpoint
from quanos.presets import preset_architecture
from quanos.quantization import BitWidthPlan

MINIMAL = """
input 3 8 8
conv out=16 k=3 pad=1
relu
dense out=10
"""

RESIDUAL = """
input 1 8 8
conv out=4 k=3 pad=1
batchnorm
relu
conv out=4 k=3 pad=1
batchnorm
residual_add from=3
relu
dense out=10
"""


def test_minimal_chain_builds_and_validates():
    m = build_network(MINIMAL, seed=0)
    assert [s.kind for s in m.specs] == ["conv", "relu", "dense"]
    assert m.quantizable_layers() == ["conv1"]
    x = np.zeros((2, 3, 8, 8), dtype=np.float32)
    assert m.forward(x).data.shape == (2, 10)


def test_mismatched_shortcut_without_projection_is_rejected():
    bad = """
input 1 8 8
conv out=4 k=3 pad=1
relu
conv out=8 k=3 pad=1
residual_add from=2
"""
    with pytest.raises(ValidationError) as exc:
        build_network(bad)
    assert "layer 4" in str(exc.value)


def test_validation_error_names_offending_layer():
    bad = "input 1 4 4\nconv out=2 k=7\n"
    with pytest.raises(ValidationError) as exc:
        build_network(bad)
    assert "layer 1" in str(exc.value)


def test_vgg19_preset_conv_parameter_count():
    m = build_network(preset_architecture("vgg19-cifar"))
    conv_params = sum(
        m.params[f"{s.name}.w"].size for s in m.specs if s.kind == "conv"
    )
    assert conv_params == pytest.approx(20.0e6, rel=0.01)
    assert len(m.quantizable_layers()) == 17


def test_resnet18_preset_has_17_quantizable_convs():
    m = build_network(preset_architecture("resnet18-cifar"))
    assert m.quantizable_layers() == [f"conv{i}" for i in range(1, 18)]
    x = np.zeros((2, 3, 32, 32), dtype=np.float32)
    assert m.forward(x).data.shape == (2, 100)


def test_build_is_deterministic_under_seed():
    a = build_network(MINIMAL, seed=7)
    b = build_network(MINIMAL, seed=7)
    c = build_network(MINIMAL, seed=8)
    assert a.state_hash() == b.state_hash()
    assert a.state_hash() != c.state_hash()


def test_quantized_mode_requires_plan():
    m = build_network(MINIMAL)
    with pytest.raises(RuntimeError):
        m.forward(np.zeros((1, 3, 8, 8), dtype=np.float32), mode="quantized")


def test_quantization_noop_limit_matches_clean_exactly():
    # weights and activations constructed to sit exactly on their own
    # 8-bit grids, so quantized forward is the identity of clean forward
    arch = "input 1 2 2\nconv out=1 k=1\nrelu\ndense out=2\n"
    m = build_network(arch, seed=0)
    m.params["conv1.w"].data[:] = 1.0  # grid: max|w| = 1 -> integer levels / 127
    m.params["conv1.b"].data[:] = 0.0
    x = np.array([[[[127.0, 1.0], [2.0, 3.0]]]], dtype=np.float32)  # max 127 -> unit step
    m.set_plan(BitWidthPlan.uniform(m.quantizable_layers(), 8, k_initial=8))
    clean = m.forward(x, mode="clean").data
    quant = m.forward(x, mode="quantized").data
    assert np.array_equal(clean, quant)


def test_planned_conv_weights_have_limited_levels(monkeypatch):
    m = build_network(MINIMAL, seed=3)
    m.set_plan(BitWidthPlan({"conv1": 4}, k_initial=16))
    seen = []
    real_conv2d = network_mod.T.conv2d

    def spy(x, w, b, stride=1, padding=0):
        seen.append(w.data.copy())
        return real_conv2d(x, w, b, stride=stride, padding=padding)

    monkeypatch.setattr(network_mod.T, "conv2d", spy)
    m.forward(np.zeros((1, 3, 8, 8), dtype=np.float32), mode="quantized")
    assert len(seen) == 1
    assert len(np.unique(seen[0])) <= 2**4


def test_residual_shortcut_adopts_fed_layer_precision():
    m = build_network(RESIDUAL, seed=1)
    m.set_plan(BitWidthPlan({"conv1": 8, "conv2": 4}, k_initial=16))
    x = np.random.default_rng(0).uniform(0, 1, (2, 1, 8, 8)).astype(np.float32)
    m.forward(x, mode="quantized", capture=True)
    shortcut = m.capture_buffer["res6.shortcut"]
    assert len(np.unique(shortcut)) <= 2**4


def test_quantized_forward_leaves_parameters_untouched():
    m = build_network(MINIMAL, seed=5)
    m.set_plan(BitWidthPlan({"conv1": 3}, k_initial=16))
    before = m.state_hash()
    m.forward(np.random.default_rng(1).uniform(size=(2, 3, 8, 8)).astype(np.float32), mode="quantized")
    assert m.state_hash() == before


def test_forward_is_deterministic():
    m = build_network(MINIMAL, seed=2)
    x = np.random.default_rng(2).uniform(size=(2, 3, 8, 8)).astype(np.float32)
    a = m.forward(x).data
    b = m.forward(x).data
    assert np.array_equal(a, b)


def test_capture_buffers_shape_stable():
    m = build_network(RESIDUAL, seed=1)
    x = np.random.default_rng(0).uniform(size=(4, 1, 8, 8)).astype(np.float32)
    m.forward(x, capture=True)
    shapes1 = {k: v.shape for k, v in m.capture_buffer.items()}
    m.forward(x, capture=True)
    shapes2 = {k: v.shape for k, v in m.capture_buffer.items()}
    assert shapes1 == shapes2
    assert set(m.quantizable_layers()) <= set(shapes1)


def test_plan_must_cover_every_quantizable_layer():
    m = build_network(RESIDUAL, seed=0)
    with pytest.raises(Exception):
        m.set_plan(BitWidthPlan({"conv1": 8}, k_initial=16))


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_roundtrip_bytes_identical():
    m = build_network(RESIDUAL, seed=9)
    m.set_plan(BitWidthPlan({"conv1": 8, "conv2": 4}, k_initial=16))
    blob = save_checkpoint(m)
    again = save_checkpoint(load_checkpoint(blob))
    assert blob == again


def test_checkpoint_restores_plan_and_rng_state():
    m = build_network(MINIMAL, seed=4)
    m.set_plan(BitWidthPlan({"conv1": 6}, k_initial=16))
    m2 = load_checkpoint(save_checkpoint(m))
    assert m2.quant_plan.entries == {"conv1": 6}
    assert m2.rng.bit_generator.state == m.rng.bit_generator.state
    assert m2.state_hash() == m.state_hash()


def test_checkpoint_detects_flipped_payload_byte():
    blob = bytearray(save_checkpoint(build_network(MINIMAL, seed=0)))
    blob[-1] ^= 0xFF
    with pytest.raises(CorruptionError):
        load_checkpoint(bytes(blob))


def test_checkpoint_rejects_bad_magic():
    with pytest.raises(CorruptionError):
        load_checkpoint(b"XXXX" + bytes(100))


def test_checkpoint_size_accounting():
    m = build_network(MINIMAL, seed=0)
    blob = save_checkpoint(m)
    param_bytes = sum(p.data.nbytes for p in m.params.values())
    buffer_bytes = sum(b.nbytes for b in m.buffers.values())
    overhead = len(blob) - param_bytes - buffer_bytes
    assert 0 < overhead < 4096  # header only
