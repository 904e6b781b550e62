"""Convolutional building blocks, the miniature localisation/recognition
networks, the additive-margin softmax loss, SGD with momentum, and single-file
checkpoints.

All maps are NCHW float64.  Networks are deterministic functions of their
seed; two builds with the same seed produce bit-identical parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor, make_op, reshape, tmean
from .errors import DegenerateInputError, OptimizerStateError

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# graph ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution, zero padding 1, given stride."""
    n, cin, h, w = x.data.shape
    cout = weight.data.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, cin * 9)
    wmat = weight.data.reshape(cout, cin * 9)
    out = np.moveaxis(cols @ wmat.T + bias.data, 3, 1)

    def backward(g):
        gt = np.moveaxis(g, 1, 3)
        dw = (gt.reshape(-1, cout).T @ cols.reshape(-1, cin * 9)).reshape(weight.data.shape)
        db = gt.sum(axis=(0, 1, 2))
        dcols = (gt @ wmat).reshape(n, ho, wo, cin, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                    dcols[:, :, :, :, ki, kj]
        return ((x, dxp[:, :, 1:h + 1, 1:w + 1]), (weight, dw), (bias, db))

    return make_op(out, (x, weight, bias), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes, eps: float = BN_EPS):
    """Standardize over ``axes`` using batch statistics (training mode).

    Returns (out, batch_mean, batch_var) with the raw statistics as plain
    arrays so callers can maintain running estimates.
    """
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    bshape = [1] * x.data.ndim
    bshape[1 if x.data.ndim == 4 else -1] = -1
    gamma_b = gamma.data.reshape(bshape)
    beta_b = beta.data.reshape(bshape)
    out = gamma_b * xhat + beta_b
    m = x.data.size / mu.size

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes).reshape(gamma.data.shape)
        dbeta = g.sum(axis=axes).reshape(beta.data.shape)
        dxhat = g * gamma_b
        dx = (invstd / m) * (m * dxhat
                             - dxhat.sum(axis=axes, keepdims=True)
                             - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return ((x, dx), (gamma, dgamma), (beta, dbeta))

    return make_op(out, (x, gamma, beta), backward), mu.reshape(-1), var.reshape(-1)


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                    eps: float = BN_EPS) -> Tensor:
    bshape = [1] * x.data.ndim
    bshape[1 if x.data.ndim == 4 else -1] = -1
    invstd = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
    mu = running_mean.reshape(bshape)
    xhat = (x.data - mu) * invstd
    gamma_b = gamma.data.reshape(bshape)
    out = gamma_b * xhat + beta.data.reshape(bshape)

    def backward(g):
        axes = tuple(i for i in range(x.data.ndim) if i != (1 if x.data.ndim == 4 else x.data.ndim - 1))
        return ((x, g * gamma_b * invstd),
                (gamma, (g * xhat).sum(axis=axes).reshape(gamma.data.shape)),
                (beta, g.sum(axis=axes).reshape(beta.data.shape)))

    return make_op(out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return ((x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy()),)

    return make_op(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return ((x, g @ weight.data), (weight, g.T @ x.data), (bias, g.sum(axis=0)))

    return make_op(out, (x, weight, bias), backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    norms = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    if np.any(norms < 1e-12):
        raise DegenerateInputError("zero-norm row cannot be normalized")
    y = x.data / norms

    def backward(g):
        return ((x, (g - y * (g * y).sum(axis=1, keepdims=True)) / norms),)

    return make_op(y, (x,), backward)


# ---------------------------------------------------------------------------
# layers


class Layer:
    training = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def named_params(self, prefix: str):
        return []

    def named_buffers(self, prefix: str):
        return []

    def set_training(self, flag: bool):
        self.training = flag


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        fan_in = in_ch * 9
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, 3, 3)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride)

    def named_params(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class BatchNorm(Layer):
    """Shared core for 2-D (NCHW) and 1-D (NC) batch norm."""

    def __init__(self, num_features: int, axes):
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.axes = axes

    def forward(self, x):
        if self.training:
            out, mu, var = batch_norm(x, self.gamma, self.beta, self.axes)
            # In-place so externally held references (checkpoint restore) stay live.
            self.running_mean *= BN_MOMENTUM
            self.running_mean += (1 - BN_MOMENTUM) * mu
            self.running_var *= BN_MOMENTUM
            self.running_var += (1 - BN_MOMENTUM) * var
            return out
        return batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var)

    def named_params(self, prefix):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]

    def named_buffers(self, prefix):
        return [(prefix + ".running_mean", self.running_mean),
                (prefix + ".running_var", self.running_var)]


class BatchNorm2d(BatchNorm):
    def __init__(self, num_features):
        super().__init__(num_features, axes=(0, 2, 3))


class BatchNorm1d(BatchNorm):
    def __init__(self, num_features):
        super().__init__(num_features, axes=(0,))


class ReLU(Layer):
    def forward(self, x):
        return ad.relu(x)


class Sigmoid(Layer):
    def forward(self, x):
        return ad.sigmoid(x)


def _cell_bounds(n: int, k: int) -> list:
    return [n * i // k for i in range(k + 1)]


class SpatialAvgPool(Layer):
    """Average-pool to a fixed cells x cells map, flattened to (B, C*cells^2).

    Keeps coarse spatial structure for heads that need location information,
    unlike a global pool.  Cell boundaries are integer splits, so any H, W
    >= cells works; smaller maps fall back to fewer cells per axis.
    """

    def __init__(self, cells: int = 4):
        self.cells = cells

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.data.shape
        k = self.cells
        rb, cb = _cell_bounds(h, min(k, h)), _cell_bounds(w, min(k, w))
        # Repeat edge cells when the map is smaller than the target grid so
        # the flattened width stays C*cells^2 regardless of input size.
        rows = [(rb[min(i, len(rb) - 2)], rb[min(i, len(rb) - 2) + 1]) for i in range(k)]
        cols = [(cb[min(j, len(cb) - 2)], cb[min(j, len(cb) - 2) + 1]) for j in range(k)]
        out = np.empty((b, c, k, k))
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

        def backward(grad):
            g = grad.reshape(b, c, k, k)
            gx = np.zeros_like(x.data)
            for i, (r0, r1) in enumerate(rows):
                for j, (c0, c1) in enumerate(cols):
                    gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j, None, None]
                                               / ((r1 - r0) * (c1 - c0)))
            return ((x, gx),)

        return make_op(out.reshape(b, c * k * k), (x,), backward)


class GlobalAvgPool(Layer):
    def forward(self, x):
        return global_avg_pool(x)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        if zero_init:
            w = np.zeros((out_features, in_features))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)

    def named_params(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class Residual(Layer):
    """Two 3x3 convs with a skip connection (optional, same resolution)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 1, rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 1, rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x):
        y = ad.relu(self.bn1.forward(self.conv1.forward(x)))
        y = self.bn2.forward(self.conv2.forward(y))
        return ad.relu(x + y)

    def named_params(self, prefix):
        out = []
        for name, sub in (("conv1", self.conv1), ("bn1", self.bn1),
                          ("conv2", self.conv2), ("bn2", self.bn2)):
            out.extend(sub.named_params(f"{prefix}.{name}"))
        return out

    def named_buffers(self, prefix):
        return (self.bn1.named_buffers(prefix + ".bn1")
                + self.bn2.named_buffers(prefix + ".bn2"))

    def set_training(self, flag):
        for sub in (self.conv1, self.bn1, self.conv2, self.bn2):
            sub.set_training(flag)
        self.training = flag


class Sequential(Layer):
    def __init__(self, named_layers):
        self.layers = list(named_layers)

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def named_params(self, prefix):
        out = []
        for name, layer in self.layers:
            out.extend(layer.named_params(f"{prefix}.{name}"))
        return out

    def named_buffers(self, prefix):
        out = []
        for name, layer in self.layers:
            out.extend(layer.named_buffers(f"{prefix}.{name}"))
        return out

    def set_training(self, flag):
        for _, layer in self.layers:
            layer.set_training(flag)
        self.training = flag


def _conv_block(name, in_ch, out_ch, stride, rng, residual=False):
    blocks = [(f"{name}_conv", Conv2d(in_ch, out_ch, stride, rng)),
              (f"{name}_bn", BatchNorm2d(out_ch)),
              (f"{name}_relu", ReLU())]
    if residual:
        blocks.append((f"{name}_res", Residual(out_ch, rng)))
    return blocks


# ---------------------------------------------------------------------------
# network builders


class LocNet:
    """Miniature localisation network: conv stages then a zero-init head.

    The head emits flat warp-parameter offsets; with the zero-initialized
    final layer the induced warp starts exactly at the identity.  A small
    fixed output gain keeps early warp updates gentle so the joint training
    cannot fling the grid off the image before recognition finds its footing.
    """

    def __init__(self, config: dict, rng: np.random.Generator):
        channels = list(config["channels"])
        in_ch = config["input_channels"]
        stages = []
        prev = in_ch
        for i, ch in enumerate(channels):
            stages.extend(_conv_block(f"stage{i}", prev, ch, 2, rng,
                                      residual=config.get("residual", False)))
            prev = ch
        if config.get("pool", "global") == "spatial":
            # Location-aware variant: the head sees a coarse 4x4 map.
            stages.append(("pool", SpatialAvgPool(4)))
            head_in = prev * 16
        else:
            stages.append(("pool", GlobalAvgPool()))
            head_in = prev
        self.backbone = Sequential(stages)
        self.head = Linear(head_in, config["head_dim"], zero_init=True)
        self.gain = float(config.get("output_gain", 0.1))
        bound = config.get("output_bound")
        self.bound = None if bound is None else float(bound)
        self.config = config

    def forward(self, x: Tensor) -> Tensor:
        """Flat parameter offsets, shape (B, head_dim)."""
        raw = self.head.forward(self.backbone.forward(x)) * self.gain
        if self.bound is None:
            return raw
        # Soft clamp to (-bound, bound); tanh'(0) = 1 keeps the gain scale
        # at the zero-init starting point and the identity start exact.
        return ad.tanh(raw * (1.0 / self.bound)) * self.bound

    def named_params(self, prefix="locnet"):
        return self.backbone.named_params(prefix) + self.head.named_params(prefix + ".head")

    def named_buffers(self, prefix="locnet"):
        return self.backbone.named_buffers(prefix)

    def set_training(self, flag):
        self.backbone.set_training(flag)

    def parameters(self):
        return [t for _, t in self.named_params()]


class RecNet:
    """Miniature recognition network with a designated stage-0 tap.

    stage0 keeps the input resolution (the alignment target for feature-map
    warping); the trunk downsamples to a globally pooled embedding.
    """

    def __init__(self, config: dict, rng: np.random.Generator):
        channels = list(config["channels"])
        in_ch = config["input_channels"]
        residual = config.get("residual", False)
        self.stage0 = Sequential(_conv_block("stage0", in_ch, channels[0], 1, rng,
                                             residual=residual))
        trunk = []
        prev = channels[0]
        for i, ch in enumerate(channels[1:], start=1):
            trunk.extend(_conv_block(f"stage{i}", prev, ch, 2, rng, residual=residual))
            prev = ch
        trunk.append(("pool", GlobalAvgPool()))
        self.trunk = Sequential(trunk)
        self.fc = Linear(prev, config["embedding_dim"], rng)
        self.embed_bn = BatchNorm1d(config["embedding_dim"])
        self.config = config

    def stage0_tap(self, x: Tensor) -> Tensor:
        return self.stage0.forward(x)

    def forward_from_stage0(self, fmap: Tensor) -> Tensor:
        return self.embed_bn.forward(self.fc.forward(self.trunk.forward(fmap)))

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_from_stage0(self.stage0_tap(x))

    def named_params(self, prefix="recnet"):
        return (self.stage0.named_params(prefix + ".stage0")
                + self.trunk.named_params(prefix + ".trunk")
                + self.fc.named_params(prefix + ".fc")
                + self.embed_bn.named_params(prefix + ".embed_bn"))

    def named_buffers(self, prefix="recnet"):
        return (self.stage0.named_buffers(prefix + ".stage0")
                + self.trunk.named_buffers(prefix + ".trunk")
                + self.embed_bn.named_buffers(prefix + ".embed_bn"))

    def set_training(self, flag):
        self.stage0.set_training(flag)
        self.trunk.set_training(flag)
        self.embed_bn.set_training(flag)

    def parameters(self):
        return [t for _, t in self.named_params()]


def build_locnet(grid_size: int, input_channels: int = 1, channels=(4, 8, 16),
                 head_dim: int | None = None, seed: int = 0, residual: bool = False,
                 output_gain: float = 0.1, pool: str = "global",
                 output_bound: float | None = None) -> LocNet:
    """LocNet whose head outputs 2*grid_size^2 source-point offsets by default."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if pool not in ("global", "spatial"):
        raise ValueError(f"unknown pool mode {pool!r}")
    if output_bound is not None and output_bound <= 0:
        raise ValueError("output_bound must be positive")
    config = {
        "grid_size": grid_size,
        "input_channels": input_channels,
        "channels": list(channels),
        "head_dim": head_dim if head_dim is not None else 2 * grid_size * grid_size,
        "residual": residual,
        "seed": seed,
        "output_gain": output_gain,
        "pool": pool,
        "output_bound": output_bound,
    }
    return LocNet(config, np.random.default_rng(seed))


def build_recnet(embedding_dim: int, input_channels: int = 1, channels=(8, 16, 32, 64),
                 seed: int = 0, residual: bool = False) -> RecNet:
    if embedding_dim < 2:
        raise ValueError("embedding_dim must be >= 2")
    config = {
        "embedding_dim": embedding_dim,
        "input_channels": input_channels,
        "channels": list(channels),
        "residual": residual,
        "seed": seed,
    }
    return RecNet(config, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# AM-Softmax


@dataclass(frozen=True)
class AmSoftmaxConfig:
    margin: float = 0.35
    scale: float = 64.0
    class_count: int = 2

    def __post_init__(self):
        if not (0.0 <= self.margin < 1.0):
            raise ValueError("margin must be in [0, 1)")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def margin_cross_entropy(cos: Tensor, labels: np.ndarray, margin: float, scale: float) -> Tensor:
    """Mean cross-entropy over scale*(cos - margin at the true class)."""
    b, k = cos.data.shape
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    z = scale * (cos.data - margin * onehot)
    zmax = z.max(axis=1, keepdims=True)
    expz = np.exp(z - zmax)
    denom = expz.sum(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(lse - z[np.arange(b), labels]))

    def backward(g):
        dz = (expz / denom - onehot) * (float(g) / b)
        return ((cos, scale * dz),)

    return make_op(loss, (cos,), backward)


def am_softmax_loss(embeddings: Tensor, class_weights: Tensor, labels,
                    cfg: AmSoftmaxConfig) -> Tensor:
    """Additive-margin softmax on cosine similarities of unit-normalized rows."""
    labels = np.asarray(labels, dtype=int)
    if labels.ndim != 1 or len(labels) != embeddings.data.shape[0]:
        raise ValueError("labels must be a 1-D list matching the batch size")
    if np.any(labels < 0) or np.any(labels >= class_weights.data.shape[0]):
        raise ValueError("labels out of range")
    en = l2_normalize_rows(embeddings)
    wn = l2_normalize_rows(class_weights)
    cos = ad.matmul(en, transpose2d(wn))
    return margin_cross_entropy(cos, labels, cfg.margin, cfg.scale)


def transpose2d(x: Tensor) -> Tensor:
    return make_op(x.data.T, (x,), lambda g: ((x, g.T),))


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with momentum and weight decay folded into the gradient.

    v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v.
    Gradients are cleared after each step.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        if lr < 0 or momentum < 0 or weight_decay < 0:
            raise ValueError("hyperparameters must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                raise OptimizerStateError("parameter has no gradient; run backward first")
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def lr_at_epoch(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Step schedule: divide by 10 at 55%, 75%, and 95% of the run."""
    drops = sum(epoch >= int(np.floor(frac * total_epochs)) for frac in (0.55, 0.75, 0.95))
    return base_lr * (0.1 ** drops)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: dict, tensors: dict) -> None:
    """Single file: one-line JSON header, then little-endian float32 payload."""
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = tensors[name]
        data = (arr.data if isinstance(arr, Tensor) else np.asarray(arr)).astype("<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": len(payload)})
        payload.extend(data.tobytes())
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Returns (config, {name: float64 array})."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(float).reshape(shape)
    return header["config"], tensors
