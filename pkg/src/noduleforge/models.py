"""Network construction, execution, transfer, and serialization.

Two architectures are built here:

* ``ScreenFcn`` is the stage-1 screening network: five convolutions and a
  single max-pool, all valid (pad 0), so a 30x30x10 training patch maps
  to one logit pair and a whole volume maps to a dense score grid with
  total stride 2.
* ``RefineResNet`` is the stage-2 network: a three-conv stem whose conv
  shapes match the screening network (so those layers can be transferred),
  identity-shortcut residual units with same-size padding, global average
  pooling, and two 1x1x1-conv heads: 2-way classification and a 4-way
  linear regression output.

Model structure is carried by per-layer ``block`` tags: consecutive layers
with the same tag form a stage, tags starting with ``res`` run as
``x + F(x)``, and ``cls``/``reg`` stages are heads applied after pooling.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    ArchitectureError,
    ModelFormatError,
    ModelTruncatedError,
    ModelVersionError,
    ShapeError,
    TransferError,
)
from .nn.layers import (
    LayerParams,
    batchnorm3d_backward,
    batchnorm3d_forward,
    conv3d_backward,
    conv3d_forward,
    conv_output_shape,
    global_avg_pool,
    global_avg_pool_backward,
    maxpool3d,
    maxpool3d_backward,
)

ARCH_SCREEN = "ScreenFcn"
ARCH_REFINE = "RefineResNet"

MODEL_MAGIC = b"NDF1"
MODEL_VERSION = 1

SCREEN_PATCH = (30, 30, 10)  # (x, y, z) stage-1 training patch
REFINE_PATCH = (60, 60, 24)  # (x, y, z) stage-2 crop

# (kD, kH, kW) kernels of the five screening convolutions; the pool sits
# after the second conv. Chosen so the 30x30x10 patch reduces to 1x1x1.
_SCREEN_KERNELS = ((3, 3, 3), (3, 3, 3), (2, 7, 7), (2, 7, 7), (1, 1, 1))
_SCREEN_POOL_AFTER = 1


@dataclass
class ResidualUnitSpec:
    """One identity-shortcut unit: `channels` in == out, `n_convs` stacked."""

    channels: int
    n_convs: int = 2


@dataclass
class ModelParams:
    """Ordered layer list plus named segment ranges and architecture id."""

    layers: list[LayerParams]
    segments: dict[str, tuple[int, int]]
    arch_id: str
    version: int = MODEL_VERSION

    def copy(self) -> "ModelParams":
        return ModelParams(
            layers=[l.copy() for l in self.layers],
            segments=dict(self.segments),
            arch_id=self.arch_id,
            version=self.version,
        )

    def conv_layers(self) -> list[LayerParams]:
        return [l for l in self.layers if l.kind == "conv3d"]

    def n_parameters(self) -> int:
        total = 0
        for l in self.layers:
            for arr in (l.weights, l.bias, l.bn_gamma, l.bn_beta):
                if arr is not None:
                    total += arr.size
        return total


@dataclass
class LayerGrads:
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None


def zero_grads(model: ModelParams) -> list[LayerGrads]:
    grads = []
    for l in model.layers:
        grads.append(LayerGrads(
            weights=None if l.weights is None else np.zeros_like(l.weights),
            bias=None if l.bias is None else np.zeros_like(l.bias),
            bn_gamma=None if l.bn_gamma is None else np.zeros_like(l.bn_gamma),
            bn_beta=None if l.bn_beta is None else np.zeros_like(l.bn_beta),
        ))
    return grads


# ---------------------------------------------------------------------------
# builders


def _conv_layer(rng, in_c, out_c, kernel, std, stride=(1, 1, 1), padding=(0, 0, 0),
                block="stem") -> LayerParams:
    shape = (out_c, in_c) + tuple(kernel)
    return LayerParams(
        kind="conv3d",
        weights=rng.normal(0.0, std, size=shape),
        bias=np.zeros(out_c),
        stride=stride,
        padding=padding,
        block=block,
    )


def _bn_layer(channels, block) -> LayerParams:
    return LayerParams(
        kind="batchnorm3d",
        bn_gamma=np.ones(channels),
        bn_beta=np.zeros(channels),
        bn_running_mean=np.zeros(channels),
        bn_running_var=np.ones(channels),
        block=block,
    )


def _relu_layer(block) -> LayerParams:
    return LayerParams(kind="relu", block=block)


def _pool_layer(block) -> LayerParams:
    return LayerParams(kind="maxpool3d", window=(2, 2, 2), stride=(2, 2, 2), block=block)


def build_screen_fcn(channels=(16, 16, 32, 32, 2), seed: int = 0) -> ModelParams:
    """Stage-1 screening FCN with Gaussian(0, 0.01) weight initialization."""
    channels = tuple(int(c) for c in channels)
    if len(channels) != 5:
        raise ArchitectureError(f"expected 5 channel counts, got {len(channels)}")
    if any(c <= 0 for c in channels):
        raise ArchitectureError(f"channel counts must be positive, got {channels}")
    rng = np.random.default_rng(seed)
    layers: list[LayerParams] = []
    in_c = 1
    for i, (out_c, kernel) in enumerate(zip(channels, _SCREEN_KERNELS)):
        layers.append(_conv_layer(rng, in_c, out_c, kernel, 0.01, block="stem"))
        if i < len(channels) - 1:
            layers.append(_bn_layer(out_c, "stem"))
            layers.append(_relu_layer("stem"))
        if i == _SCREEN_POOL_AFTER:
            layers.append(_pool_layer("stem"))
        in_c = out_c
    model = ModelParams(layers=layers, segments={"shared": (0, len(layers))},
                        arch_id=ARCH_SCREEN)
    # the stated training patch must reduce to a single logit pair
    px, py, pz = SCREEN_PATCH
    shape = _trace_output_shape(model, (pz, py, px))
    if shape != (1, 1, 1):
        raise ArchitectureError(
            f"screening stack maps the {px}x{py}x{pz} patch to {shape}, expected (1, 1, 1)"
        )
    return model


def build_refine_resnet(spec=None, seed: int = 0, stem_channels=(16, 16, 32)) -> ModelParams:
    """Stage-2 dual-branch residual network.

    `spec` is a list of ResidualUnitSpec; a stride-2 transition conv is
    inserted wherever the channel count changes. Stem and head weights are
    Gaussian(0, 0.01); residual and transition convs use He initialization.
    """
    if spec is None:
        spec = [ResidualUnitSpec(32), ResidualUnitSpec(64)]
    if not spec:
        raise ArchitectureError("need at least one residual unit")
    stem_channels = tuple(int(c) for c in stem_channels)
    if len(stem_channels) != 3:
        raise ArchitectureError(f"expected 3 stem channel counts, got {len(stem_channels)}")
    rng = np.random.default_rng(seed)
    layers: list[LayerParams] = []

    c1, c2, c3 = stem_channels
    layers.append(_conv_layer(rng, 1, c1, (3, 3, 3), 0.01, block="stem"))
    layers.append(_bn_layer(c1, "stem"))
    layers.append(_relu_layer("stem"))
    layers.append(_pool_layer("stem"))
    layers.append(_conv_layer(rng, c1, c2, (3, 3, 3), 0.01, block="stem"))
    layers.append(_bn_layer(c2, "stem"))
    layers.append(_relu_layer("stem"))
    layers.append(_pool_layer("stem"))
    layers.append(_conv_layer(rng, c2, c3, (2, 7, 7), 0.01, block="stem"))
    layers.append(_bn_layer(c3, "stem"))
    layers.append(_relu_layer("stem"))

    cur = c3
    for u, unit in enumerate(spec):
        uc = int(unit.channels)
        if unit.n_convs < 1:
            raise ArchitectureError(f"residual unit {u} must have at least 1 conv")
        if uc != cur:
            tag = f"down{u}"
            he = np.sqrt(2.0 / (cur * 27))
            layers.append(_conv_layer(rng, cur, uc, (3, 3, 3), he,
                                      stride=(2, 2, 2), padding=(1, 1, 1), block=tag))
            layers.append(_bn_layer(uc, tag))
            layers.append(_relu_layer(tag))
            cur = uc
        tag = f"res{u}"
        he = np.sqrt(2.0 / (uc * 27))
        for _ in range(unit.n_convs):
            layers.append(_bn_layer(uc, tag))
            layers.append(_relu_layer(tag))
            layers.append(_conv_layer(rng, uc, uc, (3, 3, 3), he,
                                      padding=(1, 1, 1), block=tag))

    layers.append(_bn_layer(cur, "post"))
    layers.append(_relu_layer("post"))

    cls_start = len(layers)
    layers.append(_conv_layer(rng, cur, 2, (1, 1, 1), 0.01, block="cls"))
    reg_start = len(layers)
    layers.append(_conv_layer(rng, cur, 4, (1, 1, 1), 0.01, block="reg"))

    segments = {
        "shared": (0, cls_start),
        "cls_branch": (cls_start, reg_start),
        "reg_branch": (reg_start, len(layers)),
    }
    return ModelParams(layers=layers, segments=segments, arch_id=ARCH_REFINE)


def transfer_stem(src: ModelParams, dst: ModelParams) -> ModelParams:
    """Copy the first three conv layers' weights/biases from src into dst.

    Returns a new model; dst is never modified. Raises TransferError
    listing every mismatched layer before anything is copied.
    """
    src_convs = src.conv_layers()[:3]
    out = dst.copy()
    dst_convs = out.conv_layers()[:3]
    if len(src_convs) < 3 or len(dst_convs) < 3:
        raise TransferError("both models need at least three conv layers")
    mism = [
        f"conv {i}: src {s.weights.shape} vs dst {d.weights.shape}"
        for i, (s, d) in enumerate(zip(src_convs, dst_convs))
        if s.weights.shape != d.weights.shape
    ]
    if mism:
        raise TransferError("incompatible stem shapes: " + "; ".join(mism))
    for s, d in zip(src_convs, dst_convs):
        d.weights = s.weights.copy()
        d.bias = s.bias.copy()
    return out


# ---------------------------------------------------------------------------
# execution


def _stage_groups(model: ModelParams):
    groups: list[tuple[str, list[int]]] = []
    for idx, layer in enumerate(model.layers):
        if groups and groups[-1][0] == layer.block:
            groups[-1][1].append(idx)
        else:
            groups.append((layer.block, [idx]))
    return groups


class Tape:
    """Per-layer intermediates captured by a train-mode forward pass."""

    def __init__(self):
        self.entries: dict[int, object] = {}
        self.gap_in_shape = None


def _seq_forward(model, idxs, x, mode, tape):
    h = x
    for idx in idxs:
        layer = model.layers[idx]
        if layer.kind == "conv3d":
            if tape is not None:
                tape.entries[idx] = h
            h = conv3d_forward(h, layer)
        elif layer.kind == "batchnorm3d":
            h, cache = batchnorm3d_forward(h, layer, mode)
            if tape is not None:
                tape.entries[idx] = cache
        elif layer.kind == "relu":
            if tape is not None:
                tape.entries[idx] = h > 0.0
            h = np.maximum(h, 0.0)
        elif layer.kind == "maxpool3d":
            in_shape = tuple(h.shape)
            h, argmax = maxpool3d(h, layer.window, layer.stride)
            if tape is not None:
                tape.entries[idx] = (in_shape, argmax)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return h


def _seq_backward(model, idxs, grad, tape, grads):
    g = grad
    for idx in reversed(idxs):
        layer = model.layers[idx]
        entry = tape.entries.get(idx)
        if layer.kind == "conv3d":
            g, gw, gb = conv3d_backward(entry, layer, g)
            grads[idx].weights += gw
            grads[idx].bias += gb
        elif layer.kind == "batchnorm3d":
            g, dgamma, dbeta = batchnorm3d_backward(entry, g)
            grads[idx].bn_gamma += dgamma
            grads[idx].bn_beta += dbeta
        elif layer.kind == "relu":
            g = np.where(entry, g, 0.0)
        elif layer.kind == "maxpool3d":
            in_shape, argmax = entry
            g = maxpool3d_backward(in_shape, argmax, g)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return g


def screen_forward(model: ModelParams, x, mode: str = "infer", tape: Tape | None = None):
    """Run the screening FCN; returns the (N, 2, D', H', W') logit map."""
    if model.arch_id != ARCH_SCREEN:
        raise ValueError(f"expected a {ARCH_SCREEN} model, got {model.arch_id}")
    groups = _stage_groups(model)
    h = x
    for _, idxs in groups:
        h = _seq_forward(model, idxs, h, mode, tape)
    return h


def screen_backward(model: ModelParams, tape: Tape, grad_logits):
    """Gradients of every screening parameter given d(loss)/d(logit map)."""
    grads = zero_grads(model)
    g = grad_logits
    for _, idxs in reversed(_stage_groups(model)):
        g = _seq_backward(model, idxs, g, tape, grads)
    return grads, g


def refine_forward(model: ModelParams, x, mode: str = "infer", tape: Tape | None = None):
    """Run the refiner; returns (cls_logits (N, 2), reg_out (N, 4))."""
    if model.arch_id != ARCH_REFINE:
        raise ValueError(f"expected a {ARCH_REFINE} model, got {model.arch_id}")
    heads = {}
    h = x
    for tag, idxs in _stage_groups(model):
        if tag in ("cls", "reg"):
            heads[tag] = idxs
            continue
        if tag.startswith("res"):
            h = h + _seq_forward(model, idxs, h, mode, tape)
        else:
            h = _seq_forward(model, idxs, h, mode, tape)
    if tape is not None:
        tape.gap_in_shape = tuple(h.shape)
    pooled = global_avg_pool(h)
    cls = _seq_forward(model, heads["cls"], pooled, mode, tape)
    reg = _seq_forward(model, heads["reg"], pooled, mode, tape)
    n = cls.shape[0]
    return cls.reshape(n, 2), reg.reshape(n, 4)


def refine_backward(model: ModelParams, tape: Tape, grad_cls, grad_reg):
    """Backprop both heads through the pooled trunk; returns (grads, gx)."""
    grads = zero_grads(model)
    n = grad_cls.shape[0]
    heads = {}
    trunk = []
    for tag, idxs in _stage_groups(model):
        if tag in ("cls", "reg"):
            heads[tag] = idxs
        else:
            trunk.append((tag, idxs))
    gp = _seq_backward(model, heads["cls"], grad_cls.reshape(n, 2, 1, 1, 1), tape, grads)
    gp = gp + _seq_backward(model, heads["reg"], grad_reg.reshape(n, 4, 1, 1, 1), tape, grads)
    g = global_avg_pool_backward(tape.gap_in_shape, gp)
    for tag, idxs in reversed(trunk):
        if tag.startswith("res"):
            g = g + _seq_backward(model, idxs, g, tape, grads)
        else:
            g = _seq_backward(model, idxs, g, tape, grads)
    return grads, g


def commit_batchnorm_stats(model: ModelParams, tape: Tape) -> None:
    """Adopt the running statistics computed during a train-mode forward."""
    for idx, entry in tape.entries.items():
        layer = model.layers[idx]
        if layer.kind == "batchnorm3d" and entry is not None:
            layer.bn_running_mean = entry.new_running_mean
            layer.bn_running_var = entry.new_running_var


def conv_weight_l2(model: ModelParams, segment: str | None = None) -> float:
    """Sum of squared conv weights, optionally restricted to one segment."""
    if segment is None:
        rng_ = range(len(model.layers))
    else:
        start, end = model.segments[segment]
        rng_ = range(start, end)
    total = 0.0
    for idx in rng_:
        layer = model.layers[idx]
        if layer.kind == "conv3d":
            total += float((layer.weights ** 2).sum())
    return total


# ---------------------------------------------------------------------------
# shape and receptive-field arithmetic


def _trace_output_shape(model: ModelParams, in_spatial) -> tuple[int, int, int]:
    shape = tuple(int(v) for v in in_spatial)
    for layer in model.layers:
        if layer.block in ("cls", "reg"):
            continue
        if layer.kind == "conv3d":
            shape = conv_output_shape(shape, layer.weights.shape[2:], layer.stride,
                                      layer.padding)
        elif layer.kind == "maxpool3d":
            shape = conv_output_shape(shape, layer.window, layer.stride, (0, 0, 0))
    return shape


def trace_receptive_field(model: ModelParams):
    """Per-axis (stride, offset, field) of the score grid in (D, H, W) order.

    offset is the voxel index of the receptive-field center of grid index
    0, i.e. start + floor(field/2); a grid step of 1 moves the center by
    `stride` voxels. Only makes sense for the sequential screening stack.
    """
    stride = np.ones(3, dtype=np.int64)
    start = np.zeros(3, dtype=np.int64)
    field = np.ones(3, dtype=np.int64)
    for layer in model.layers:
        if layer.kind == "conv3d":
            k = np.array(layer.weights.shape[2:], dtype=np.int64)
        elif layer.kind == "maxpool3d":
            k = np.array(layer.window, dtype=np.int64)
        else:
            continue
        s = np.array(layer.stride, dtype=np.int64)
        p = np.array(layer.padding, dtype=np.int64)
        field = field + (k - 1) * stride
        start = start - p * stride
        stride = stride * s
    offset = start + field // 2
    return tuple(int(v) for v in stride), tuple(int(v) for v in offset), tuple(int(v) for v in field)


# ---------------------------------------------------------------------------
# serialization

_KIND_CODES = {"conv3d": 1, "batchnorm3d": 2, "relu": 3, "maxpool3d": 4}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_ARCH_CODES = {ARCH_SCREEN: 1, ARCH_REFINE: 2}
_ARCH_NAMES = {v: k for k, v in _ARCH_CODES.items()}
_ARRAY_SLOTS = ("weights", "bias", "bn_gamma", "bn_beta", "bn_running_mean",
                "bn_running_var")


def _write_array(f, arr):
    if arr is None:
        f.write(struct.pack("<B", 0))
        return
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(struct.pack("<BB", 1, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f8").tobytes())


def save_model(model: ModelParams, path) -> None:
    """Write a model to the little-endian "NDF1" container, atomically."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MODEL_MAGIC)
            f.write(struct.pack("<I", model.version))
            f.write(struct.pack("<B", _ARCH_CODES[model.arch_id]))
            f.write(struct.pack("<I", len(model.segments)))
            for name, (s, e) in model.segments.items():
                enc = name.encode("utf-8")
                f.write(struct.pack("<H", len(enc)))
                f.write(enc)
                f.write(struct.pack("<II", s, e))
            f.write(struct.pack("<I", len(model.layers)))
            for layer in model.layers:
                f.write(struct.pack("<B", _KIND_CODES[layer.kind]))
                enc = layer.block.encode("utf-8")
                f.write(struct.pack("<H", len(enc)))
                f.write(enc)
                f.write(struct.pack("<3I", *layer.stride))
                f.write(struct.pack("<3I", *layer.padding))
                if layer.window is None:
                    f.write(struct.pack("<B", 0))
                else:
                    f.write(struct.pack("<B", 1))
                    f.write(struct.pack("<3I", *layer.window))
                for slot in _ARRAY_SLOTS:
                    _write_array(f, getattr(layer, slot))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ModelTruncatedError(
            f"file ended after {len(data)} of {n} expected bytes"
        )
    return data


def _read_array(f):
    (present,) = struct.unpack("<B", _read_exact(f, 1))
    if not present:
        return None
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
    return data.reshape(shape).astype(np.float64)


def load_model(path) -> ModelParams:
    """Read a model written by save_model; inverse up to bit identity."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MODEL_MAGIC:
            raise ModelFormatError(
                f"bad magic {magic!r}, expected {MODEL_MAGIC.decode()!r}"
            )
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != MODEL_VERSION:
            raise ModelVersionError(
                f"unsupported format version {version}, expected {MODEL_VERSION}"
            )
        (arch_code,) = struct.unpack("<B", _read_exact(f, 1))
        if arch_code not in _ARCH_NAMES:
            raise ModelFormatError(f"unknown architecture code {arch_code}")
        (n_seg,) = struct.unpack("<I", _read_exact(f, 4))
        segments = {}
        for _ in range(n_seg):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            s, e = struct.unpack("<II", _read_exact(f, 8))
            segments[name] = (s, e)
        (n_layers,) = struct.unpack("<I", _read_exact(f, 4))
        layers = []
        for _ in range(n_layers):
            (kind_code,) = struct.unpack("<B", _read_exact(f, 1))
            if kind_code not in _KIND_NAMES:
                raise ModelFormatError(f"unknown layer kind code {kind_code}")
            (block_len,) = struct.unpack("<H", _read_exact(f, 2))
            block = _read_exact(f, block_len).decode("utf-8")
            stride = struct.unpack("<3I", _read_exact(f, 12))
            padding = struct.unpack("<3I", _read_exact(f, 12))
            (has_window,) = struct.unpack("<B", _read_exact(f, 1))
            window = struct.unpack("<3I", _read_exact(f, 12)) if has_window else None
            arrays = {slot: _read_array(f) for slot in _ARRAY_SLOTS}
            layers.append(LayerParams(
                kind=_KIND_NAMES[kind_code],
                stride=stride,
                padding=padding,
                window=window,
                block=block,
                **arrays,
            ))
        trailing = f.read(1)
        if trailing:
            raise ModelFormatError("trailing bytes after declared layer data")
    return ModelParams(layers=layers, segments=segments,
                       arch_id=_ARCH_NAMES[arch_code], version=version)
