"""DeskNet: a small fixed CNN with last-conv activation capture.

The model is described by a ModelSpec (ordered layer descriptors) plus a
WeightStore (per-layer parameter tensors). The forward pass is split at
the output of the last convolution block (conv + its relu): the prefix
produces the captured activation tensor, the suffix consumes it. Masked
forward and the cached-suffix path reuse exactly the same code, so all
three entry points compose bit-identically.
"""

import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensors
from .tensors import ShapeError


class WeightFileError(Exception):
    """Base class for weight (de)serialization failures."""


class BadMagic(WeightFileError):
    pass


class BadVersion(WeightFileError):
    pass


class Truncated(WeightFileError):
    def __init__(self, offset):
        super().__init__(f"weight file truncated at byte offset {offset}")
        self.offset = offset


class BadChecksum(WeightFileError):
    pass


class DivergenceError(RuntimeError):
    """Training loss became non-finite; try a lower learning rate."""


# ---------------------------------------------------------------------------
# Layer descriptors

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class Softmax:
    pass


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    last_conv_index: int
    num_classes: int
    input_shape: tuple
    # per-layer output shapes, filled in by __post_init__
    layer_shapes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not (0 <= self.last_conv_index < len(self.layers)):
            raise ShapeError("last_conv_index out of range")
        if not isinstance(self.layers[self.last_conv_index], Conv):
            raise ShapeError("last_conv_index must point at a conv layer")
        shapes = []
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)
            shapes.append(shape)
        if shape != (self.num_classes,):
            raise ShapeError(
                f"model output shape {shape} does not match num_classes {self.num_classes}")
        for layer in self.layers[self.last_conv_index + 1:]:
            if isinstance(layer, Conv):
                raise ShapeError("a conv layer follows last_conv_index")
        object.__setattr__(self, "layer_shapes", tuple(shapes))

    @property
    def capture_index(self):
        """Index of the layer whose output is the captured last-conv activation.

        The downstream layers consume the conv output after its own relu,
        so when a relu immediately follows the last conv the capture point
        sits after it.
        """
        i = self.last_conv_index
        if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], Relu):
            return i + 1
        return i

    @property
    def num_filters(self):
        return self.layers[self.last_conv_index].out_channels

    def in_shape(self, index):
        return self.input_shape if index == 0 else self.layer_shapes[index - 1]

    def param_shapes(self):
        """{layer_index: (weight_shape, bias_shape)} for parameterized layers."""
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                c = self.in_shape(i)[0]
                out[i] = ((layer.out_channels, c, layer.kh, layer.kw), (layer.out_channels,))
            elif isinstance(layer, Dense):
                n = self.in_shape(i)[0]
                out[i] = ((layer.out_features, n), (layer.out_features,))
        return out


def _out_shape(layer, shape, index):
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ShapeError(f"layer {index}: conv needs [C,H,W] input, got {shape}")
        c, h, w = shape
        ho = (h + 2 * layer.padding - layer.kh) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kw) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {index}: conv kernel does not fit input {h}x{w}")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, Relu):
        return shape
    if isinstance(layer, MaxPool):
        c, h, w = shape
        if layer.window > h or layer.window > w:
            raise ShapeError(f"layer {index}: pool window {layer.window} larger than input {h}x{w}")
        return (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ShapeError(f"layer {index}: dense needs a flat input, got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Softmax):
        return shape
    raise ShapeError(f"unknown layer type {layer!r}")


@dataclass
class Prediction:
    probs: np.ndarray
    label: int
    confidence: float
    last_conv_activations: np.ndarray


def build_desknet(num_classes, input_shape):
    """Reference architecture: 3 conv blocks (16/32/64 filters), 64 last-conv filters."""
    if num_classes < 2:
        raise ShapeError("num_classes must be >= 2")
    layers = (
        Conv(16, 3, 3, stride=1, padding=1), Relu(), MaxPool(2, 2),
        Conv(32, 3, 3, stride=1, padding=1), Relu(), MaxPool(2, 2),
        Conv(64, 3, 3, stride=1, padding=1), Relu(),
        MaxPool(2, 2), Flatten(), Dense(num_classes), Softmax(),
    )
    return ModelSpec(layers=layers, last_conv_index=6, num_classes=num_classes,
                     input_shape=tuple(input_shape))


def init_weights(spec, seed=0, conv_bias=0.0):
    """He-style fan-in scaled random init from a seeded PRNG.

    conv_bias sets the initial bias of conv layers; a small negative value
    raises the ReLU firing threshold so filters start selective (sparse
    feature maps) instead of responding to everything.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for i, (wshape, bshape) in spec.param_shapes().items():
        fan_in = int(np.prod(wshape[1:]))
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=wshape).astype(np.float32)
        is_conv = len(wshape) == 4
        fill = np.float32(conv_bias) if is_conv else np.float32(0.0)
        b = np.full(bshape, fill, dtype=np.float32)
        weights[i] = (w, b)
    return weights


def weights_digest(weights):
    """Stable hex id of a WeightStore (crc32 over raw tensor bytes)."""
    crc = 0
    for i in sorted(weights):
        for t in weights[i]:
            crc = zlib.crc32(np.ascontiguousarray(t, dtype=np.float32).tobytes(), crc)
    return f"{crc:08x}"


# ---------------------------------------------------------------------------
# Forward passes

def _run_layers(spec, weights, x, start, stop):
    """Run layers [start, stop) on a batched input."""
    cur = x
    for i in range(start, stop):
        layer = spec.layers[i]
        if isinstance(layer, Conv):
            w, b = weights[i]
            cur = tensors.conv2d_batch(cur, w, b, layer.stride, layer.padding)
        elif isinstance(layer, Relu):
            cur = tensors.relu(cur)
        elif isinstance(layer, MaxPool):
            cur, _ = tensors.maxpool2d_batch(cur, layer.window, layer.stride)
        elif isinstance(layer, Flatten):
            cur = cur.reshape(cur.shape[0], -1)
        elif isinstance(layer, Dense):
            w, b = weights[i]
            cur = cur @ w.T + b
        elif isinstance(layer, Softmax):
            cur = tensors.softmax(cur)
    return cur


def prefix_activations(spec, weights, x_batch):
    """Run the model up to and including the capture point."""
    return _run_layers(spec, weights, x_batch, 0, spec.capture_index + 1)


def suffix_probs(spec, weights, acts_batch):
    """Run the layers after the capture point on captured activations."""
    return _run_layers(spec, weights, acts_batch, spec.capture_index + 1, len(spec.layers))


def _check_input(spec, x):
    x = np.asarray(x)
    if tuple(x.shape) != tuple(spec.input_shape):
        raise ShapeError(f"input shape {x.shape} does not match model input {spec.input_shape}")
    return x


def _prediction(probs, acts):
    label = int(np.argmax(probs))
    return Prediction(probs=probs, label=label, confidence=float(probs[label]),
                      last_conv_activations=acts)


def forward(spec, weights, x):
    """Full forward pass; captures the last-conv activation tensor."""
    x = _check_input(spec, x)
    acts = prefix_activations(spec, weights, x[None])
    probs = suffix_probs(spec, weights, acts)
    return _prediction(probs[0], acts[0])


def forward_masked(spec, weights, x, masked_filters):
    """Forward with the given last-conv filter outputs zeroed before the suffix."""
    x = _check_input(spec, x)
    k = spec.num_filters
    idx = sorted(set(int(f) for f in masked_filters))
    if idx and (idx[0] < 0 or idx[-1] >= k):
        raise ShapeError(f"masked filter index out of range 0..{k - 1}: {idx}")
    acts = prefix_activations(spec, weights, x[None])
    if idx:
        acts = acts.copy()
        acts[:, idx] = 0.0
    probs = suffix_probs(spec, weights, acts)
    return _prediction(probs[0], acts[0])


def forward_from_activations(spec, weights, last_conv_activations):
    """Run only the layers after the capture point on the given activations."""
    acts = np.asarray(last_conv_activations)
    expect = spec.layer_shapes[spec.capture_index]
    if tuple(acts.shape) != tuple(expect):
        raise ShapeError(f"activation shape {acts.shape} does not match {expect}")
    probs = suffix_probs(spec, weights, acts[None])
    return _prediction(probs[0], acts)


def predict_batch(spec, weights, x_batch):
    """Probabilities for a batch of inputs (no capture)."""
    acts = prefix_activations(spec, weights, x_batch)
    return suffix_probs(spec, weights, acts)


# ---------------------------------------------------------------------------
# Backward pass

def forward_cache(spec, weights, x_batch):
    """Forward over a batch, recording what each layer's backward needs."""
    cache = {"spec": spec, "records": []}
    cur = x_batch
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            w, b = weights[i]
            cache["records"].append((i, "conv", cur))
            cur = tensors.conv2d_batch(cur, w, b, layer.stride, layer.padding)
        elif isinstance(layer, Relu):
            cache["records"].append((i, "relu", cur))
            cur = tensors.relu(cur)
        elif isinstance(layer, MaxPool):
            out, arg = tensors.maxpool2d_batch(cur, layer.window, layer.stride)
            cache["records"].append((i, "pool", (cur.shape, arg)))
            cur = out
        elif isinstance(layer, Flatten):
            cache["records"].append((i, "flatten", cur.shape))
            cur = cur.reshape(cur.shape[0], -1)
        elif isinstance(layer, Dense):
            cache["records"].append((i, "dense", cur))
            w, b = weights[i]
            cur = cur @ w.T + b
        elif isinstance(layer, Softmax):
            cur = tensors.softmax(cur)
            cache["records"].append((i, "softmax", None))
    cache["probs"] = cur
    return cur, cache


def backward(spec, weights, cache, labels, label_smoothing=0.0):
    """Exact reverse-mode gradients of mean cross-entropy over the batch.

    Returns (grad_input, {layer_index: (grad_w, grad_b)}). The softmax +
    cross-entropy pair collapses to probs - target, where target is the
    one-hot label vector, optionally smoothed toward uniform by
    label_smoothing (targets (1-a)*onehot + a/K).
    """
    if cache.get("spec") is not spec:
        raise ValueError("forward cache does not belong to this model spec")
    probs = cache["probs"]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = probs.shape[0]
    if labels.shape[0] != n:
        raise ValueError("cache/labels batch size mismatch")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must be in [0, 1)")
    k = probs.shape[1]
    target = np.full_like(probs, label_smoothing / k)
    target[np.arange(n), labels] += np.asarray(1.0 - label_smoothing, dtype=probs.dtype)
    grad = (probs - target) / np.asarray(n, dtype=probs.dtype)

    param_grads = {}
    for i, kind, saved in reversed(cache["records"]):
        layer = spec.layers[i]
        if kind == "softmax":
            continue  # folded into the cross-entropy gradient above
        if kind == "dense":
            w, _ = weights[i]
            param_grads[i] = (grad.T @ saved, grad.sum(axis=0))
            grad = grad @ w
        elif kind == "flatten":
            grad = grad.reshape(saved)
        elif kind == "pool":
            in_shape, arg = saved
            grad = tensors.maxpool2d_batch_backward(
                in_shape, arg, grad, overlapping=layer.stride < layer.window)
        elif kind == "relu":
            grad = grad * (saved > 0)
        elif kind == "conv":
            w, _ = weights[i]
            grad, gw, gb = tensors.conv2d_batch_backward(
                saved, w, layer.stride, layer.padding, grad)
            param_grads[i] = (gw, gb)
    return grad, param_grads


def loss_and_input_grad(spec, weights, x, label):
    """Mean CE loss and input gradient for a single image (used by attacks)."""
    probs, cache = forward_cache(spec, weights, np.asarray(x)[None])
    loss = tensors.cross_entropy(probs[0], int(label))
    grad, _ = backward(spec, weights, cache, [int(label)])
    return float(loss), grad[0]


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 16
    batch: int = 64
    seed: int = 6
    weight_decay: float = 2e-3
    label_smoothing: float = 0.0
    lr_decay: float = 0.85  # per-epoch multiplicative decay


def train(spec, dataset, config=None, weights=None, verbose=False):
    """SGD with momentum on cross-entropy; deterministic under the config seed.

    dataset: sequence of objects with .pixels and .label (or (pixels, label)
    pairs). Returns the trained WeightStore.
    """
    config = config or TrainConfig()
    xs, ys = _dataset_arrays(spec, dataset)
    if xs.shape[0] == 0:
        raise ValueError("train requires a nonempty dataset")
    if ys.max() >= spec.num_classes:
        raise ValueError(f"label {ys.max()} out of range for {spec.num_classes} classes")
    rng = np.random.default_rng(config.seed)
    if weights is None:
        weights = init_weights(spec, seed=config.seed)
    weights = {i: (w.copy(), b.copy()) for i, (w, b) in weights.items()}
    velocity = {i: (np.zeros_like(w), np.zeros_like(b)) for i, (w, b) in weights.items()}
    n = xs.shape[0]
    lr = config.lr
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            probs, cache = forward_cache(spec, weights, xs[idx])
            p = probs[np.arange(len(idx)), ys[idx]]
            loss = float(-np.log(p + tensors.EPS_LOG).mean())
            if not np.isfinite(loss):
                raise DivergenceError("training loss is not finite; lower the learning rate")
            total_loss += loss * len(idx)
            _, grads = backward(spec, weights, cache, ys[idx],
                                label_smoothing=config.label_smoothing)
            for i, (gw, gb) in grads.items():
                vw, vb = velocity[i]
                if config.weight_decay:
                    gw = gw + np.float32(config.weight_decay) * weights[i][0]
                vw = config.momentum * vw - lr * gw
                vb = config.momentum * vb - lr * gb
                velocity[i] = (vw, vb)
                w, b = weights[i]
                weights[i] = ((w + vw).astype(np.float32), (b + vb).astype(np.float32))
        if verbose:
            acc = accuracy(spec, weights, dataset)
            print(f"epoch {epoch + 1}/{config.epochs} loss {total_loss / n:.4f} acc {acc:.4f}")
        lr = lr * config.lr_decay
    return weights


def _dataset_arrays(spec, dataset):
    xs = []
    ys = []
    for item in dataset:
        if hasattr(item, "pixels"):
            xs.append(item.pixels)
            ys.append(item.label)
        else:
            xs.append(item[0])
            ys.append(item[1])
    if not xs:
        return (np.zeros((0,) + tuple(spec.input_shape), dtype=np.float32),
                np.zeros(0, dtype=np.int64))
    return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64)


def accuracy(spec, weights, dataset, batch=256):
    xs, ys = _dataset_arrays(spec, dataset)
    correct = 0
    for start in range(0, xs.shape[0], batch):
        probs = predict_batch(spec, weights, xs[start:start + batch])
        correct += int((probs.argmax(axis=1) == ys[start:start + batch]).sum())
    return correct / max(1, xs.shape[0])


# ---------------------------------------------------------------------------
# Weight file (binary, little-endian)
#
#   magic "CADV" | u32 version=1 | u32 record_count
#   per record: u32 layer_index | u8 tensor_count
#     per tensor: u8 rank | u32 dims[rank] | f32 data[prod(dims)]
#   trailing u32 crc32 of all preceding bytes
#
# One extra record with the sentinel index 0xFFFFFFFF carries
# [C, H, W, num_classes] so a DeskNet file is self-describing.

MAGIC = b"CADV"
VERSION = 1
META_INDEX = 0xFFFFFFFF


def _pack_tensor(t):
    t = np.ascontiguousarray(t, dtype=np.float32)
    out = struct.pack("<B", t.ndim)
    out += struct.pack(f"<{t.ndim}I", *t.shape)
    return out + t.tobytes()


def save_weights(spec, weights, path):
    """Serialize weights (plus a DeskNet shape record) to the binary format."""
    body = MAGIC + struct.pack("<II", VERSION, len(weights) + 1)
    meta = np.array(list(spec.input_shape) + [spec.num_classes], dtype=np.float32)
    body += struct.pack("<IB", META_INDEX, 1) + _pack_tensor(meta)
    for i in sorted(weights):
        ts = weights[i]
        body += struct.pack("<IB", i, len(ts))
        for t in ts:
            body += _pack_tensor(t)
    body += struct.pack("<I", zlib.crc32(body))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
    import os
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise Truncated(self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return self.take(1)[0]


def load_weights(path, spec=None):
    """Read a weight file; returns (ModelSpec, WeightStore).

    Without an explicit spec the DeskNet architecture is rebuilt from the
    file's shape record.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise Truncated(len(data))
    if data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 8:
        raise Truncated(len(data))
    crc_stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != crc_stored:
        raise BadChecksum("weight file checksum mismatch")
    r = _Reader(data[:-4])
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise BadVersion(f"unsupported weight file version {version}")
    count = r.u32()
    records = {}
    for _ in range(count):
        idx = r.u32()
        tcount = r.u8()
        ts = []
        for _ in range(tcount):
            rank = r.u8()
            dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
            nval = int(np.prod(dims)) if rank else 1
            raw = r.take(4 * nval)
            ts.append(np.frombuffer(raw, dtype="<f4").reshape(dims).copy())
        records[idx] = tuple(ts)
    if r.pos != len(r.data):
        raise WeightFileError(f"{len(r.data) - r.pos} trailing bytes in weight file")
    meta = records.pop(META_INDEX, None)
    if spec is None:
        if meta is None:
            raise WeightFileError("weight file has no shape record and no spec was given")
        c, h, w, m = (int(v) for v in meta[0])
        spec = build_desknet(m, (c, h, w))
    expected = spec.param_shapes()
    for i, (wshape, bshape) in expected.items():
        if i not in records:
            raise WeightFileError(f"weight file missing parameters for layer {i}")
        w, b = records[i]
        if tuple(w.shape) != wshape or tuple(b.shape) != bshape:
            raise ShapeError(f"layer {i} parameter shapes {w.shape}/{b.shape} "
                             f"do not match spec {wshape}/{bshape}")
    return spec, {i: records[i] for i in expected}
