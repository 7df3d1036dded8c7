"""Small classifiers: MLPs and a tiny CNN, with seeded init and checkpoints.

Networks are immutable during inference; parameter updates happen only
through the optimizer. No normalization layers: margins and jacobians stay
free of train/eval mode differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"MLCK"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class InitSpec:
    """Parameter initialization: same seed + scheme gives bit-identical nets."""

    scheme: str = "kaiming-uniform"
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("kaiming-uniform", "xavier", "zeros"):
            raise ValueError(f"unknown init scheme: {self.scheme!r}")


def _init_weight(rng, shape, fan_in, fan_out, scheme):
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "kaiming-uniform":
        bound = np.sqrt(6.0 / fan_in)
    else:  # xavier
        bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @property
    def params(self):
        return [self.weight, self.bias]

    def descriptor(self):
        in_dim, out_dim = self.weight.shape
        return {"kind": "dense", "in": in_dim, "out": out_dim}

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Relu:
    params: list = []

    def descriptor(self):
        return {"kind": "relu"}

    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class Conv2d:
    def __init__(self, kernel: Tensor, bias: Tensor):
        self.kernel = kernel
        self.bias = bias

    @property
    def params(self):
        return [self.kernel, self.bias]

    def descriptor(self):
        f, c, kh, kw = self.kernel.shape
        return {"kind": "conv", "in_channels": c, "out_channels": f, "kernel": [kh, kw]}

    def forward(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.kernel)
        return out + self.bias.reshape(1, self.bias.shape[0], 1, 1)


class Flatten:
    params: list = []

    def descriptor(self):
        return {"kind": "flatten"}

    def forward(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


_LAYER_KINDS = {"dense": Dense, "relu": Relu, "conv": Conv2d, "flatten": Flatten}


class Network:
    """Ordered layer stack mapping an input batch to a (batch, K) logit matrix."""

    def __init__(self, layers: list, input_shape: tuple[int, ...], num_classes: int):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)

    @property
    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def descriptors(self) -> list[dict]:
        return [layer.descriptor() for layer in self.layers]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def __call__(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.shape[1:] != self.input_shape:
            raise ValueError(
                f"network expects batches of shape (N, {', '.join(map(str, self.input_shape))}), "
                f"got {x.shape}"
            )
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def snapshot(self) -> list[np.ndarray]:
        """Copies of all parameter buffers (for checkpointing in memory)."""
        return [np.array(p.data) for p in self.params]

    def restore(self, snapshot: list[np.ndarray]) -> None:
        for p, buf in zip(self.params, snapshot):
            p.data = np.array(buf)

    def copy(self) -> "Network":
        clone = _build_from_descriptors(self.descriptors(), self.input_shape, self.num_classes)
        clone.restore(self.snapshot())
        return clone


def build_mlp(layer_sizes, activation: str = "relu", init: InitSpec | None = None) -> Network:
    """Dense stack with the given activation between all but the last layer."""
    if init is None:
        init = InitSpec()
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ValueError(f"build_mlp: need at least input and output sizes, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"build_mlp: all layer sizes must be >= 1, got {sizes}")
    if activation != "relu":
        raise ValueError(f"build_mlp: unsupported activation {activation!r}")
    layers: list = []
    for i in range(len(sizes) - 1):
        rng = np.random.default_rng([init.seed, i])
        w = _init_weight(rng, (sizes[i], sizes[i + 1]), sizes[i], sizes[i + 1], init.scheme)
        layers.append(Dense(Tensor(w, requires_grad=True), Tensor(np.zeros(sizes[i + 1]), requires_grad=True)))
        if i < len(sizes) - 2:
            layers.append(Relu())
    return Network(layers, (sizes[0],), sizes[-1])


@dataclass(frozen=True)
class CnnSpec:
    """Conv->relu blocks (valid conv, stride 1), flatten, dense head."""

    input_shape: tuple[int, int, int]  # (C, H, W)
    channels: tuple[int, ...]
    kernel: int
    hidden: tuple[int, ...]
    num_classes: int
    init: InitSpec = InitSpec()


def build_cnn(spec: CnnSpec) -> Network:
    c, h, w = spec.input_shape
    if c < 1 or h < 1 or w < 1:
        raise ValueError(f"build_cnn: input shape must be positive, got {spec.input_shape}")
    if any(ch < 1 for ch in spec.channels) or spec.kernel < 1:
        raise ValueError("build_cnn: channels and kernel size must be positive")
    layers: list = []
    idx = 0
    for ch in spec.channels:
        h_out, w_out = h - spec.kernel + 1, w - spec.kernel + 1
        if h_out < 1 or w_out < 1:
            raise ValueError(
                f"build_cnn: spatial dims collapse below 1 "
                f"({h}x{w} with kernel {spec.kernel} gives {h_out}x{w_out})"
            )
        rng = np.random.default_rng([spec.init.seed, idx])
        fan_in = c * spec.kernel * spec.kernel
        k = _init_weight(rng, (ch, c, spec.kernel, spec.kernel), fan_in, ch, spec.init.scheme)
        layers.append(Conv2d(Tensor(k, requires_grad=True), Tensor(np.zeros(ch), requires_grad=True)))
        layers.append(Relu())
        c, h, w = ch, h_out, w_out
        idx += 1
    layers.append(Flatten())
    sizes = [c * h * w, *spec.hidden, spec.num_classes]
    for i in range(len(sizes) - 1):
        rng = np.random.default_rng([spec.init.seed, idx])
        wmat = _init_weight(rng, (sizes[i], sizes[i + 1]), sizes[i], sizes[i + 1], spec.init.scheme)
        layers.append(Dense(Tensor(wmat, requires_grad=True), Tensor(np.zeros(sizes[i + 1]), requires_grad=True)))
        if i < len(sizes) - 2:
            layers.append(Relu())
        idx += 1
    return Network(layers, spec.input_shape, spec.num_classes)


def logits(net: Network, batch) -> Tensor:
    """The (N, K) logit matrix for a batch."""
    return net(batch)


def predict(net: Network, batch) -> np.ndarray:
    """Argmax class per row; ties break toward the lowest class index."""
    return np.argmax(net(batch).data, axis=1)


# ----------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, raw <f8 payload
# ----------------------------------------------------------------------


def _build_from_descriptors(descriptors, input_shape, num_classes) -> Network:
    layers: list = []
    for desc in descriptors:
        kind = desc["kind"]
        if kind == "dense":
            w = Tensor(np.zeros((desc["in"], desc["out"])), requires_grad=True)
            b = Tensor(np.zeros(desc["out"]), requires_grad=True)
            layers.append(Dense(w, b))
        elif kind == "conv":
            kh, kw = desc["kernel"]
            k = Tensor(np.zeros((desc["out_channels"], desc["in_channels"], kh, kw)), requires_grad=True)
            b = Tensor(np.zeros(desc["out_channels"]), requires_grad=True)
            layers.append(Conv2d(k, b))
        elif kind == "relu":
            layers.append(Relu())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer kind in checkpoint: {kind!r}")
    return Network(layers, tuple(input_shape), num_classes)


def save_checkpoint(net: Network, path) -> None:
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layers": net.descriptors(),
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in net.params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a marginlab checkpoint (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format version {header['format_version']}"
            )
        net = _build_from_descriptors(header["layers"], header["input_shape"], header["num_classes"])
        payload = fh.read()
    offset = 0
    for p in net.params:
        nbytes = p.size * 8
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: truncated parameter payload at byte {offset}")
        p.data = np.frombuffer(chunk, dtype="<f8").reshape(p.shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes in payload")
    return net
