"""Sensitivity-driven hybrid quantization of CNNs, with white-box attack
tooling and an analytical accelerator cost model."""

__version__ = "0.1.0"

from .attacks import AttackConfig, adversarial_accuracy, adversarial_loss, fgsm, pgd
from .datasets import Dataset, load_dataset, sample_subset, synthesize_idx_dataset
from .hardware import (
    EnergyTables,
    HardwareConfig,
    LayerDims,
    count_ops,
    layer_energy,
    layer_energy_config,
    layer_memory,
    network_report,
)
from .network import NetworkModel, build_network, load_checkpoint, save_checkpoint
from .presets import preset_architecture, preset_plan
from .quantization import BitWidthPlan, assign_bitwidths, fake_quantize, plan_average_bits, quantize_array
from .sensitivity import AnsReport, ablate, ablation_curve, compute_ans
from .tensor import Tensor
from .training import TrainConfig, quanos_procedure, train

__all__ = [
    "AnsReport",
    "AttackConfig",
    "BitWidthPlan",
    "Dataset",
    "EnergyTables",
    "HardwareConfig",
    "LayerDims",
    "NetworkModel",
    "Tensor",
    "TrainConfig",
    "ablate",
    "ablation_curve",
    "adversarial_accuracy",
    "adversarial_loss",
    "assign_bitwidths",
    "build_network",
    "compute_ans",
    "count_ops",
    "fake_quantize",
    "fgsm",
    "layer_energy",
    "layer_energy_config",
    "layer_memory",
    "load_checkpoint",
    "load_dataset",
    "network_report",
    "pgd",
    "plan_average_bits",
    "preset_architecture",
    "preset_plan",
    "quantize_array",
    "quanos_procedure",
    "sample_subset",
    "save_checkpoint",
    "synthesize_idx_dataset",
    "train",
]
