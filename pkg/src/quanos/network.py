"""Declarative network construction and quantization-hooked execution.

Architectures are described in a line-oriented text format::

    input 3 32 32
    conv out=64 k=3 stride=1 pad=1
    batchnorm
    relu
    maxpool
    ...
    dense out=10

One layer per line; layer ids are 1-based over the layer lines. Conv
input channels and dense input features are inferred from the running
shape. ``residual_add from=<id> [project]`` adds the output of an earlier
layer, optionally through a declared 1x1 projection conv when shapes
differ.

Conv and dense layers are the quantizable units (named conv1..convN,
fc1..fcM); the final classifier is never quantized. In quantized mode a
layer's weights go through fake quantization at its planned bit width and
its post-ReLU activations are snapped to the same grid, so pooling layers
downstream see quantized activations for free. Residual shortcuts are
re-quantized to the precision of the layer they feed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .quantization import BitWidthPlan, fake_quantize
from .tensor import Tensor

CHECKPOINT_MAGIC = b"QNCK"
CHECKPOINT_VERSION = 1

_KINDS = {"conv", "dense", "relu", "batchnorm", "maxpool", "avgpool", "residual_add"}


class ValidationError(ValueError):
    """Architecture text fails parsing or shape checking."""


class CorruptionError(ValueError):
    """Checkpoint bytes fail the magic/version/content-hash check."""


@dataclass
class LayerSpec:
    id: int
    kind: str
    name: str
    in_shape: tuple = ()
    out_shape: tuple = ()
    out_ch: int = 0
    in_ch: int = 0
    k: int = 0
    stride: int = 1
    pad: int = 0
    in_features: int = 0
    out_features: int = 0
    shortcut_from: int | None = None
    project: bool = False
    proj_stride: int = 1


def parse_architecture(text: str) -> tuple[tuple[int, int, int], list[LayerSpec]]:
    """Parse and shape-check an architecture description."""
    input_shape = None
    specs: list[LayerSpec] = []
    conv_n = dense_n = 0
    lid = 0
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        kind, opts = fields[0], _parse_opts(fields[1:], line)
        if kind == "input":
            if input_shape is not None:
                raise ValidationError("duplicate input line")
            if len(fields) != 4:
                raise ValidationError(f"input line needs 3 extents: {line!r}")
            input_shape = tuple(int(v) for v in fields[1:])
            continue
        if input_shape is None:
            raise ValidationError("architecture must start with an input line")
        if kind not in _KINDS:
            raise ValidationError(f"unknown layer kind {kind!r}")
        lid += 1
        spec = LayerSpec(id=lid, kind=kind, name=f"{kind}{lid}")
        if kind == "conv":
            conv_n += 1
            spec.name = f"conv{conv_n}"
            spec.out_ch = int(opts.pop("out"))
            spec.k = int(opts.pop("k"))
            spec.stride = int(opts.pop("stride", 1))
            spec.pad = int(opts.pop("pad", 0))
        elif kind == "dense":
            dense_n += 1
            spec.name = f"fc{dense_n}"
            spec.out_features = int(opts.pop("out"))
        elif kind == "residual_add":
            spec.name = f"res{lid}"
            spec.shortcut_from = int(opts.pop("from"))
            spec.project = bool(opts.pop("project", False))
        if opts:
            raise ValidationError(f"layer {lid} ({kind}): unknown options {sorted(opts)}")
        specs.append(spec)
    if input_shape is None:
        raise ValidationError("missing input line")
    if not specs:
        raise ValidationError("architecture has no layers")
    _validate_shapes(input_shape, specs)
    return input_shape, specs


def _parse_opts(fields, line):
    opts = {}
    for f in fields:
        if "=" in f:
            key, _, val = f.partition("=")
            opts[key] = val
        else:
            opts[f] = True
    return opts


def _validate_shapes(input_shape, specs):
    shape = input_shape  # (C, H, W) or (F,)
    by_id = {}
    for s in specs:
        s.in_shape = shape
        if s.kind == "conv":
            if len(shape) != 3:
                raise ValidationError(f"layer {s.id} ({s.name}): conv needs a C,H,W input, got {shape}")
            c, h, w = shape
            s.in_ch = c
            if h + 2 * s.pad < s.k or w + 2 * s.pad < s.k:
                raise ValidationError(f"layer {s.id} ({s.name}): kernel {s.k} exceeds padded input {h}x{w}")
            oh = (h + 2 * s.pad - s.k) // s.stride + 1
            ow = (w + 2 * s.pad - s.k) // s.stride + 1
            shape = (s.out_ch, oh, ow)
        elif s.kind == "dense":
            s.in_features = int(np.prod(shape))
            shape = (s.out_features,)
        elif s.kind in ("relu",):
            pass
        elif s.kind == "batchnorm":
            if len(shape) != 3:
                raise ValidationError(f"layer {s.id} ({s.name}): batchnorm needs a C,H,W input")
            s.in_ch = shape[0]
        elif s.kind == "maxpool":
            c, h, w = shape
            if h < 2 or w < 2:
                raise ValidationError(f"layer {s.id} ({s.name}): maxpool needs extents >= 2, got {h}x{w}")
            shape = (c, h // 2, w // 2)
        elif s.kind == "avgpool":
            c, h, w = shape
            shape = (c, 1, 1)
        elif s.kind == "residual_add":
            src = by_id.get(s.shortcut_from)
            if src is None or s.shortcut_from >= s.id:
                raise ValidationError(f"layer {s.id} ({s.name}): shortcut_from must name an earlier layer")
            if src.out_shape != shape:
                if not s.project:
                    raise ValidationError(
                        f"layer {s.id} ({s.name}): shortcut shape {src.out_shape} != {shape} and no projection declared"
                    )
                sc, sh, _ = src.out_shape
                c, h, _ = shape
                if sh % h != 0:
                    raise ValidationError(f"layer {s.id} ({s.name}): projection cannot map {src.out_shape} onto {shape}")
                s.proj_stride = sh // h
                s.in_ch = sc
                s.out_ch = c
        s.out_shape = shape
        by_id[s.id] = s


# -- model ---------------------------------------------------------------------


class NetworkModel:
    """Layer specs plus trainable state, with quantized and capturing forwards."""

    def __init__(self, arch_text: str, seed: int = 0, dtype=np.float32):
        self.arch_text = arch_text
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.input_shape, self.specs = parse_architecture(arch_text)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.quant_plan: BitWidthPlan | None = None
        self.capture_buffer: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)
        self._init_params()

    # parameters ------------------------------------------------------------

    def _he_uniform(self, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def _init_params(self):
        for s in self.specs:
            if s.kind == "conv":
                self.params[f"{s.name}.w"] = self._he_uniform((s.out_ch, s.in_ch, s.k, s.k), s.in_ch * s.k * s.k)
                self.params[f"{s.name}.b"] = Tensor(np.zeros(s.out_ch, dtype=self.dtype), requires_grad=True)
            elif s.kind == "dense":
                self.params[f"{s.name}.w"] = self._he_uniform((s.out_features, s.in_features), s.in_features)
                self.params[f"{s.name}.b"] = Tensor(np.zeros(s.out_features, dtype=self.dtype), requires_grad=True)
            elif s.kind == "batchnorm":
                self.params[f"{s.name}.gamma"] = Tensor(np.ones(s.in_ch, dtype=self.dtype), requires_grad=True)
                self.params[f"{s.name}.beta"] = Tensor(np.zeros(s.in_ch, dtype=self.dtype), requires_grad=True)
                self.buffers[f"{s.name}.running_mean"] = np.zeros(s.in_ch, dtype=np.float64)
                self.buffers[f"{s.name}.running_var"] = np.ones(s.in_ch, dtype=np.float64)
            elif s.kind == "residual_add" and s.project:
                self.params[f"{s.name}.proj_w"] = self._he_uniform((s.out_ch, s.in_ch, 1, 1), s.in_ch)
                self.params[f"{s.name}.proj_b"] = Tensor(np.zeros(s.out_ch, dtype=self.dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_hash(self) -> str:
        """Digest of all parameters and buffers; cheap mutation detector."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.buffers[name]).tobytes())
        return h.hexdigest()

    # quantization bookkeeping ------------------------------------------------

    def quantizable_layers(self) -> list[str]:
        """Conv and dense layer names, excluding the final classifier."""
        names = [s.name for s in self.specs if s.kind in ("conv", "dense")]
        dense_names = [s.name for s in self.specs if s.kind == "dense"]
        if dense_names:
            names.remove(dense_names[-1])
        return names

    def set_plan(self, plan: BitWidthPlan | None):
        if plan is not None:
            plan.validate_against(self.quantizable_layers())
        self.quant_plan = plan

    # forward -----------------------------------------------------------------

    def forward(
        self,
        x,
        mode: str = "clean",
        capture: bool = False,
        training: bool = False,
        ablation: tuple[str, np.ndarray] | None = None,
    ) -> Tensor:
        """Run the network; returns logits.

        mode='quantized' applies the active bit-width plan to weights and
        post-ReLU activations (the stored parameters are never mutated).
        capture=True snapshots each quantizable layer's activation into
        ``capture_buffer``. ablation=(layer, mask) multiplies that layer's
        activation by a fixed mask, for unit-ablation studies.
        """
        if mode not in ("clean", "quantized"):
            raise ValueError(f"unknown forward mode {mode!r}")
        if mode == "quantized" and self.quant_plan is None:
            raise RuntimeError("quantized forward requires an attached bit-width plan")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != len(self.input_shape) + 1 or x.data.shape[1:] != self.input_shape:
            raise T.ShapeError(f"input shape {x.data.shape[1:]} != expected {self.input_shape}")
        if capture:
            self.capture_buffer = {}

        quantized = mode == "quantized"
        outputs: dict[int, Tensor] = {}
        owner: str | None = None  # most recent quantizable layer
        out = x
        for s in self.specs:
            if s.kind == "conv":
                w, b = self.params[f"{s.name}.w"], self.params[f"{s.name}.b"]
                if quantized and s.name in self.quant_plan:
                    w = fake_quantize(w, self.quant_plan[s.name])
                out = T.conv2d(out, w, b, stride=s.stride, padding=s.pad)
                owner = s.name if s.name in set(self.quantizable_layers()) else None
            elif s.kind == "dense":
                if len(out.data.shape) > 2:
                    out = out.flatten2d()
                w, b = self.params[f"{s.name}.w"], self.params[f"{s.name}.b"]
                if quantized and s.name in self.quant_plan:
                    w = fake_quantize(w, self.quant_plan[s.name])
                out = T.dense(out, w, b)
                owner = s.name if s.name in set(self.quantizable_layers()) else None
            elif s.kind == "batchnorm":
                out = T.batch_norm(
                    out,
                    self.params[f"{s.name}.gamma"],
                    self.params[f"{s.name}.beta"],
                    self.buffers[f"{s.name}.running_mean"],
                    self.buffers[f"{s.name}.running_var"],
                    training=training,
                )
            elif s.kind == "relu":
                out = T.relu(out)
                if owner is not None:
                    if quantized and owner in self.quant_plan:
                        out = fake_quantize(out, self.quant_plan[owner])
                    if ablation is not None and ablation[0] == owner:
                        out = out * Tensor(ablation[1])
                    if capture:
                        self.capture_buffer[owner] = out.data.copy()
            elif s.kind == "maxpool":
                out = T.max_pool2(out)
            elif s.kind == "avgpool":
                out = T.avg_pool(out)
            elif s.kind == "residual_add":
                shortcut = outputs[s.shortcut_from]
                if s.project:
                    shortcut = T.conv2d(
                        shortcut,
                        self.params[f"{s.name}.proj_w"],
                        self.params[f"{s.name}.proj_b"],
                        stride=s.proj_stride,
                        padding=0,
                    )
                # the shortcut adopts the precision of the layer it feeds
                if quantized and owner is not None and owner in self.quant_plan:
                    shortcut = fake_quantize(shortcut, self.quant_plan[owner])
                if capture:
                    self.capture_buffer[f"{s.name}.shortcut"] = shortcut.data.copy()
                out = out + shortcut
            outputs[s.id] = out
        return out

    def predict(self, x, mode: str | None = None) -> np.ndarray:
        """Argmax class predictions with gradients disabled."""
        mode = mode or ("quantized" if self.quant_plan is not None else "clean")
        logits = self.forward(x, mode=mode, training=False)
        return logits.data.argmax(axis=1)

    def clone(self) -> "NetworkModel":
        return load_checkpoint(save_checkpoint(self))


def build_network(spec_text: str, seed: int = 0, dtype=np.float32) -> NetworkModel:
    """Construct a validated, seeded model from an architecture description."""
    return NetworkModel(spec_text, seed=seed, dtype=dtype)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: NetworkModel) -> bytes:
    """Serialize to a versioned container: magic, version, header, hashed payload."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name in sorted(model.params):
        arrays.append((name, model.params[name].data))
    for name in sorted(model.buffers):
        arrays.append((name, model.buffers[name]))
    payload = b"".join(np.ascontiguousarray(a).tobytes() for _, a in arrays)
    header = {
        "arch": model.arch_text,
        "seed": model.seed,
        "dtype": model.dtype.name,
        "rng_state": _encode_rng(model.rng),
        "plan": None
        if model.quant_plan is None
        else {
            "entries": model.quant_plan.entries,
            "k_initial": model.quant_plan.k_initial,
            "provenance": model.quant_plan.provenance,
        },
        "arrays": [[name, a.dtype.name, list(a.shape)] for name, a in arrays],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + payload


def load_checkpoint(data: bytes) -> NetworkModel:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CorruptionError(f"bad checkpoint magic {data[:4]!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CorruptionError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode())
    payload = data[12 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptionError("checkpoint payload hash mismatch")

    model = NetworkModel(header["arch"], seed=header["seed"], dtype=np.dtype(header["dtype"]))
    offset = 0
    for name, dtype_name, shape in header["arrays"]:
        dt = np.dtype(dtype_name)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=offset).reshape(shape).copy()
        offset += arr.nbytes
        if name in model.params:
            model.params[name] = Tensor(arr, requires_grad=True)
        elif name in model.buffers:
            model.buffers[name] = arr
        else:
            raise CorruptionError(f"checkpoint carries unknown array {name!r}")
    model.rng = _decode_rng(header["rng_state"])
    if header["plan"] is not None:
        model.set_plan(
            BitWidthPlan(
                header["plan"]["entries"],
                k_initial=header["plan"]["k_initial"],
                provenance=header["plan"]["provenance"],
            )
        )
    return model


def _encode_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


def _decode_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
