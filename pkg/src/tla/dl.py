"""Layer kernels, training stages and distributed training steps.

All tensors are float64.  Convolutions use the cross-correlation
convention with stride 1 and no padding; samples are ``(N, C, L)`` for
convolutional stages and ``(N, F)`` for dense ones.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .arrays import DistArray, from_core, halo_exchange
from .errors import InsufficientOverlap, LabelOutOfRange, ReplicaDivergence, ShapeMismatch
from .executor import FutureCell, Scheduler, split_by_grain, when_all
from .resilience import checksum

# samples per block when accumulating convolutions; keeps temporaries in cache
_CONV_BLOCK = 32


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


# -- conv1d ---------------------------------------------------------------------


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[n,o,t] = b[o] + sum_{c,k} x[n,c,t+k] * w[o,c,k]``.

    The sum runs over ``c`` then ``k`` in increasing order for every output
    element, independent of how many samples or positions are computed at
    once, so tiles of a larger input reproduce the global result bitwise.
    """
    _check(x.ndim == 3 and w.ndim == 3 and b.ndim == 1, "conv1d expects x (N,C,L), w (O,C,K), b (O)")
    n, c_in, length = x.shape
    c_out, c_w, k = w.shape
    _check(c_w == c_in, f"input has {c_in} channels, kernel expects {c_w}")
    _check(b.shape[0] == c_out, f"bias has {b.shape[0]} entries for {c_out} output channels")
    _check(k >= 1 and length >= k, f"length {length} shorter than kernel {k}")
    out_len = length - k + 1
    out = np.zeros((n, c_out, out_len))
    tmp = np.empty((min(n, _CONV_BLOCK), c_out, out_len))
    for lo in range(0, n, _CONV_BLOCK):
        hi = min(n, lo + _CONV_BLOCK)
        acc = out[lo:hi]
        t = tmp[: hi - lo]
        for ci in range(c_in):
            for kk in range(k):
                np.multiply(x[lo:hi, None, ci, kk : kk + out_len], w[None, :, ci, kk, None], out=t)
                acc += t
    out += b[None, :, None]
    return out


def conv1d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, c_in, length = x.shape
    c_out, _, k = w.shape
    out_len = length - k + 1
    _check(grad_out.shape == (n, c_out, out_len), f"grad_out shape {grad_out.shape} != {(n, c_out, out_len)}")
    grad_b = grad_out.sum(axis=(0, 2))
    grad_w = np.empty_like(w)
    grad_x = np.zeros_like(x)
    for kk in range(k):
        window = x[:, :, kk : kk + out_len]
        grad_w[:, :, kk] = np.einsum("not,nct->oc", grad_out, window)
        grad_x[:, :, kk : kk + out_len] += np.einsum("not,oc->nct", grad_out, w[:, :, kk])
    return grad_x, grad_w, grad_b


# -- dense -------------------------------------------------------------------------


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(x.ndim == 2 and w.ndim == 2 and b.ndim == 1, "dense expects x (N,F_in), w (F_in,F_out), b (F_out)")
    _check(x.shape[1] == w.shape[0], f"x has {x.shape[1]} features, w expects {w.shape[0]}")
    _check(b.shape[0] == w.shape[1], f"bias has {b.shape[0]} entries for {w.shape[1]} outputs")
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check(grad_out.shape == (x.shape[0], w.shape[1]), f"grad_out shape {grad_out.shape} mismatched")
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


# -- glue layers ---------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at 0
    return np.where(x > 0.0, grad_out, 0.0)


def max_pool1d_forward(x: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling over the last axis; returns ``(out, argmax)``.

    A trailing remainder shorter than ``width`` is dropped.  Ties go to the
    lowest index.
    """
    _check(x.ndim == 3, "max_pool1d expects (N,C,L)")
    _check(width >= 1 and x.shape[2] >= width, f"pool width {width} invalid for length {x.shape[2]}")
    n, c, length = x.shape
    out_len = length // width
    windows = x[:, :, : out_len * width].reshape(n, c, out_len, width)
    idx = windows.argmax(axis=3)
    out = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]
    return out, idx


def max_pool1d_backward(x_shape: tuple[int, ...], idx: np.ndarray, width: int, grad_out: np.ndarray) -> np.ndarray:
    n, c, length = x_shape
    out_len = idx.shape[2]
    grad = np.zeros((n, c, out_len, width))
    np.put_along_axis(grad, idx[..., None], grad_out[..., None], axis=3)
    full = np.zeros(x_shape)
    full[:, :, : out_len * width] = grad.reshape(n, c, out_len * width)
    return full


def flatten_forward(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def unflatten(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return x.reshape(shape)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    loss_sum, grad = softmax_xent_sum(logits, labels)
    n = logits.shape[0]
    return loss_sum / n, grad / n


def softmax_xent_sum(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed (not averaged) loss and the gradient of that sum."""
    _check(logits.ndim == 2, "logits must be (N,K)")
    labels = np.asarray(labels).astype(np.int64)
    _check(labels.shape == (logits.shape[0],), "need one label per sample")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    loss = float(np.sum(log_z - shifted[rows, labels]))
    probs = np.exp(shifted - log_z[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs


# -- models ------------------------------------------------------------------------------

PARAM_KINDS = ("conv1d", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv1d | relu | maxpool1d | flatten | dense
    params: dict = field(default_factory=dict)
    width: int = 0  # pooling width

    def param_names(self) -> tuple[str, ...]:
        return ("w", "b") if self.kind in PARAM_KINDS else ()


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    generation: int = 0

    def parameters(self) -> list[np.ndarray]:
        return [layer.params[p] for layer in self.layers for p in layer.param_names()]

    def with_parameters(self, params: Sequence[np.ndarray]) -> "ModelSpec":
        it = iter(params)
        layers = []
        for layer in self.layers:
            if layer.param_names():
                layer = replace(layer, params={p: next(it) for p in layer.param_names()})
            layers.append(layer)
        return ModelSpec(tuple(layers), self.generation + 1)

    def checksum(self) -> int:
        h = 0
        for p in self.parameters():
            h = (h * 0x100000001B3 ^ checksum(p)) & 0xFFFFFFFFFFFFFFFF
        return h


@dataclass(frozen=True)
class SolverConfig:
    learning_rate: float = 0.01
    mode: str = "local"  # local | data_parallel

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.mode not in ("local", "data_parallel"):
            raise ValueError(f"unknown solver mode {self.mode!r}")


def conv_layer(rng: np.random.Generator, c_in: int, c_out: int, k: int) -> LayerSpec:
    scale = np.sqrt(2.0 / (c_in * k))
    return LayerSpec("conv1d", {"w": rng.standard_normal((c_out, c_in, k)) * scale, "b": np.zeros(c_out)})


def dense_layer(rng: np.random.Generator, f_in: int, f_out: int) -> LayerSpec:
    scale = np.sqrt(1.0 / f_in)
    return LayerSpec("dense", {"w": rng.standard_normal((f_in, f_out)) * scale, "b": np.zeros(f_out)})


def reference_cnn4(seed: int = 0, channels: int = 9, length: int = 128, classes: int = 6, filters: int = 32, kernel: int = 5) -> ModelSpec:
    """Conv1d -> ReLU -> Conv1d -> ReLU -> MaxPool(2) -> Flatten -> Dense, for (N, 9, 128) input."""
    rng = np.random.default_rng(seed)
    pooled = (length - 2 * (kernel - 1)) // 2
    return ModelSpec(
        (
            conv_layer(rng, channels, filters, kernel),
            LayerSpec("relu"),
            conv_layer(rng, filters, filters, kernel),
            LayerSpec("relu"),
            LayerSpec("maxpool1d", width=2),
            LayerSpec("flatten"),
            dense_layer(rng, filters * pooled, classes),
        )
    )


def forward_pass(model: ModelSpec, x: np.ndarray, labels: np.ndarray | None = None, *, reduction: str = "mean"):
    """Run every layer; returns ``(activations, loss)``.

    ``activations[i]`` is the input of layer ``i`` plus, at the end, the
    logits.  Pooling indices ride along in a parallel list stored on the
    returned activations object.  ``loss`` is None without labels.
    """
    acts = [x]
    aux = []
    h = x
    for layer in model.layers:
        if layer.kind == "conv1d":
            h = conv1d_forward(h, layer.params["w"], layer.params["b"])
            aux.append(None)
        elif layer.kind == "relu":
            h = relu_forward(h)
            aux.append(None)
        elif layer.kind == "maxpool1d":
            h, idx = max_pool1d_forward(h, layer.width)
            aux.append(idx)
        elif layer.kind == "flatten":
            aux.append(h.shape)
            h = flatten_forward(h)
        elif layer.kind == "dense":
            h = dense_forward(h, layer.params["w"], layer.params["b"])
            aux.append(None)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        acts.append(h)
    loss = None
    if labels is not None:
        total, _ = softmax_xent_sum(h, labels)
        loss = total if reduction == "sum" else total / h.shape[0]
    return Activations(acts, aux), loss


class Activations(list):
    def __init__(self, acts, aux):
        super().__init__(acts)
        self.aux = aux


def backward_pass(model: ModelSpec, activations: Activations, labels: np.ndarray, *, reduction: str = "mean") -> list[np.ndarray]:
    """Gradients of the loss for every parameter, in ``model.parameters()`` order."""
    logits = activations[-1]
    _, grad = softmax_xent_sum(logits, labels)
    if reduction == "mean":
        grad = grad / logits.shape[0]
    grads: list[list[np.ndarray]] = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        x = activations[i]
        if layer.kind == "conv1d":
            grad, gw, gb = conv1d_backward(x, layer.params["w"], grad)
            grads.append([gw, gb])
        elif layer.kind == "relu":
            grad = relu_backward(x, grad)
        elif layer.kind == "maxpool1d":
            grad = max_pool1d_backward(x.shape, activations.aux[i], layer.width, grad)
        elif layer.kind == "flatten":
            grad = unflatten(grad, activations.aux[i])
        elif layer.kind == "dense":
            grad, gw, gb = dense_backward(x, layer.params["w"], grad)
            grads.append([gw, gb])
    return [g for pair in reversed(grads) for g in pair]


def sgd_step(model: ModelSpec, gradients: Sequence[np.ndarray], cfg: SolverConfig) -> ModelSpec:
    params = model.parameters()
    if len(params) != len(gradients):
        raise ShapeMismatch(f"{len(gradients)} gradients for {len(params)} parameters")
    return model.with_parameters([p - cfg.learning_rate * g for p, g in zip(params, gradients)])


def train_step(model: ModelSpec, x: np.ndarray, labels: np.ndarray, cfg: SolverConfig) -> tuple[ModelSpec, float]:
    acts, loss = forward_pass(model, x, labels)
    return sgd_step(model, backward_pass(model, acts, labels), cfg), loss


# -- distributed -----------------------------------------------------------------------


def derive_tag(base: int, *parts: int) -> int:
    h = 0xCBF29CE484222325 ^ base
    for p in parts:
        h = ((h ^ (p & 0xFFFFFFFFFFFFFFFF)) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def fused_all_reduce(comm, tensors: Sequence[np.ndarray], tag: int, threshold_bytes: int) -> FutureCell:
    """All-reduce (sum) a list of tensors, packing those below the threshold into one bucket."""
    small = [i for i, t in enumerate(tensors) if t.nbytes < threshold_bytes]
    large = [i for i, t in enumerate(tensors) if t.nbytes >= threshold_bytes]
    cells = []
    if small:
        flat = np.concatenate([tensors[i].ravel() for i in small])
        cells.append(comm.all_reduce(flat, "sum", tag=derive_tag(tag, 0)))
    for j, i in enumerate(large):
        cells.append(comm.all_reduce(tensors[i], "sum", tag=derive_tag(tag, j + 1)))

    def unpack(reduced: list[np.ndarray]) -> list[np.ndarray]:
        out: list[np.ndarray | None] = [None] * len(tensors)
        k = 0
        if small:
            bucket = reduced[k]
            k += 1
            off = 0
            for i in small:
                n = tensors[i].size
                out[i] = bucket[off : off + n].reshape(tensors[i].shape)
                off += n
        for i in large:
            out[i] = reduced[k].reshape(tensors[i].shape)
            k += 1
        return out

    return when_all(cells).then(unpack)


def data_parallel_step(
    model: ModelSpec,
    batch: DistArray,
    labels: np.ndarray,
    cfg: SolverConfig,
    comm,
    tag: int,
    timeout: float | None = 120.0,
) -> ModelSpec:
    """One synchronous SGD step over a batch tiled on the sample axis.

    Local gradients are weighted by ``local samples / global samples`` and
    summed across localities, giving the global-batch mean.  Every replica
    applies the same update; a checksum comparison afterwards turns any
    divergence into :class:`ReplicaDivergence`.
    """
    if batch.meta.tiled_axis != 0:
        raise ShapeMismatch("data-parallel batches must be tiled on the sample axis")
    x = batch.core()
    n_global = batch.meta.global_shape.dims[0]
    acts, _ = forward_pass(model, x, labels)
    grads = backward_pass(model, acts, labels)
    weight = x.shape[0] / n_global
    grads = [g * weight for g in grads]
    threshold = comm.fusion.threshold_bytes or 65536
    reduced = fused_all_reduce(comm, grads, derive_tag(tag, 1), threshold).result(timeout)
    new_model = sgd_step(model, reduced, cfg)
    digest = np.array([new_model.checksum()], dtype=np.uint64).view(np.int64)
    sums = comm.all_gather(digest, tag=derive_tag(tag, 2)).result(timeout)
    if any(int(s[0]) != int(sums[0][0]) for s in sums):
        raise ReplicaDivergence(f"parameter checksums differ across localities at generation {new_model.generation}")
    return new_model


def distributed_loss(model: ModelSpec, batch: DistArray, labels: np.ndarray, comm, tag: int) -> FutureCell:
    """Global mean loss of a sample-tiled batch (all-reduced summed losses)."""
    _, local_sum = forward_pass(model, batch.core(), labels, reduction="sum")
    n_global = batch.meta.global_shape.dims[0]
    return comm.all_reduce(np.array([local_sum]), "sum", tag=tag).then(lambda s: float(s[0]) / n_global)


def spatial_conv_forward(x: DistArray, w: np.ndarray, b: np.ndarray, comm, tag: int, timeout: float | None = 120.0) -> DistArray:
    """Convolve an input tiled on its length axis.

    The output is tiled on the same axis: locality ``r`` owns outputs
    ``[begin_r, min(end_r, L-K+1))``.  Ghost cells are refreshed first if
    they are stale.
    """
    from .arrays import ArrayMeta, Shape, TileSpan

    meta = x.meta
    k = w.shape[2]
    if meta.tiled_axis != 2:
        raise ShapeMismatch("spatial convolution needs the input tiled on the length axis")
    if meta.overlap < k - 1:
        raise InsufficientOverlap(f"overlap {meta.overlap} < kernel-1 = {k - 1}")
    if not x.halo_valid:
        x = halo_exchange(x, comm, tag).result(timeout)
    length = meta.global_shape.dims[2]
    out_len = length - k + 1
    tiles = {}
    for r, s in meta.tile_map.items():
        lo, hi = min(s.begin, out_len), min(s.end, out_len)
        tiles[r] = TileSpan(2, lo, hi, lo, hi)
    n, _, _ = meta.global_shape.dims
    out_meta = ArrayMeta(
        f"{meta.array_name}.conv", meta.generation, meta.num_localities, tiles, 2, Shape((n, w.shape[0], out_len)), 0
    )
    span = x.span
    mine = tiles[x.owner]
    if mine.core_len == 0:
        core = np.zeros((n, w.shape[0], 0))
    else:
        window = x.local[:, :, mine.begin - span.lo : mine.end + k - 1 - span.lo]
        core = conv1d_forward(window, w, b)
    return from_core(out_meta, x.owner, core)


# -- parallel kernels on a scheduler ------------------------------------------------------


def forward_pass_parallel(model: ModelSpec, x: np.ndarray, labels: np.ndarray, sched: Scheduler, reduction: str = "mean") -> float:
    """Loss of a forward pass with the sample axis split into grain-sized subtasks.

    Per-chunk losses are summed in chunk order.
    """
    per_sample = max(1, int(np.prod(x.shape[1:])))
    rows = max(1, sched.config.grain_threshold // per_sample)
    chunks = split_by_grain(x.shape[0], rows)
    cells = [
        sched.spawn(lambda lo=lo, hi=hi: forward_pass(model, x[lo:hi], labels[lo:hi], reduction="sum")[1])
        for lo, hi in chunks
    ]
    total = 0.0
    for part in sched.wait(when_all(cells)):
        total += part
    return total / x.shape[0] if reduction == "mean" else total


# -- datasets -------------------------------------------------------------------------------

_DATA_HEADER = struct.Struct("<IIII")


def synthetic_har(n: int, seed: int = 0, channels: int = 9, length: int = 128, classes: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Seeded stand-in for raw activity-recognition signals: class-dependent sinusoids plus noise."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    t = np.arange(length)[None, None, :]
    freq = (1.0 + labels[:, None, None]) * (1.0 + np.arange(channels)[None, :, None] / channels) / length * 2 * np.pi
    x = np.sin(freq * t) + 0.3 * rng.standard_normal((n, channels, length))
    return x, labels.astype(np.int64)


def write_dataset(path: str | Path, x: np.ndarray, labels: np.ndarray, classes: int) -> None:
    n, c, length = x.shape
    with open(path, "wb") as fh:
        fh.write(_DATA_HEADER.pack(n, c, length, classes))
        fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def read_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    data = Path(path).read_bytes()
    n, c, length, classes = _DATA_HEADER.unpack_from(data)
    off = _DATA_HEADER.size
    count = n * c * length
    x = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(n, c, length).astype(np.float64)
    off += 8 * count
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64)
    if off + 4 * n != len(data):
        raise ValueError(f"dataset file has {len(data) - off - 4 * n} unexpected trailing bytes")
    return x, labels, classes
