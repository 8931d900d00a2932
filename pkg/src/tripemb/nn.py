"""Convolutional embedding network written directly against numpy.

Tensors are float64 ``ndarray`` objects in channels-last layout: a single
image is ``(H, W, C)`` and a batch is ``(N, H, W, C)``.  Every layer kernel
accepts either form.  The network is

    num_layers x (zero-pad 1 -> conv 3x3 -> ReLU -> maxpool 2x2)
    -> global average pool -> dense (no activation)

and gradients are computed by hand in :func:`backward_batch`.
"""

from __future__ import annotations

import copy
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, TrainingError, UsageError

FIXED_FILTERS = (16, 16, 16, 16, 16)
INCREASING_FILTERS = (8, 16, 32, 64, 128)

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7

WEIGHTS_MAGIC = b"TRIPEMB1"


class FilterSchedule(str, enum.Enum):
    FIXED = "fixed"
    INCREASING = "increasing"

    @property
    def filters(self) -> tuple[int, ...]:
        return FIXED_FILTERS if self is FilterSchedule.FIXED else INCREASING_FILTERS


@dataclass(frozen=True)
class ModelConfig:
    filter_schedule: FilterSchedule = FilterSchedule.FIXED
    num_layers: int = 4
    embed_dim: int = 2
    input_height: int = 57
    input_width: int = 125

    def __post_init__(self):
        object.__setattr__(self, "filter_schedule", FilterSchedule(self.filter_schedule))
        if self.num_layers not in (3, 4, 5):
            raise ConfigurationError(f"num_layers must be 3, 4 or 5, got {self.num_layers}")
        if self.num_layers > len(self.filter_schedule.filters):
            raise ConfigurationError("more layers than entries in the filter schedule")
        if self.embed_dim < 1:
            raise ConfigurationError(f"embed_dim must be positive, got {self.embed_dim}")
        h, w = self.input_height, self.input_width
        for layer in range(self.num_layers):
            if h < 2 or w < 2:
                raise ConfigurationError(
                    f"input {self.input_height}x{self.input_width} is pooled to {h}x{w} "
                    f"before layer {layer + 1} of {self.num_layers}"
                )
            h, w = h // 2, w // 2

    @property
    def name(self) -> str:
        """Short model-type tag such as ``F4`` or ``I3``."""
        return f"{'F' if self.filter_schedule is FilterSchedule.FIXED else 'I'}{self.num_layers}"

    def channels(self) -> list[int]:
        """Channel counts ``[1, f1, ..., fL]`` through the conv stack."""
        return [1, *self.filter_schedule.filters[: self.num_layers]]

    def spatial_trace(self) -> list[tuple[int, int]]:
        """Spatial dims at the input and after every pooling step."""
        dims = [(self.input_height, self.input_width)]
        for _ in range(self.num_layers):
            h, w = dims[-1]
            dims.append((h // 2, w // 2))
        return dims

    def to_dict(self) -> dict:
        return {
            "filter_schedule": self.filter_schedule.value,
            "num_layers": self.num_layers,
            "embed_dim": self.embed_dim,
            "input_height": self.input_height,
            "input_width": self.input_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {"filter_schedule", "num_layers", "embed_dim", "input_height", "input_width"}
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NetworkParams:
    """Learnable weights plus Adam moment estimates.

    ``tensors`` maps parameter names (``conv0.kernel``, ``conv0.bias``, ...,
    ``dense.weight``, ``dense.bias``) to arrays; ``adam_m``/``adam_v`` mirror
    those shapes and ``adam_step`` counts completed updates.
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.tensors) != list(expected):
            raise ConfigurationError(
                f"parameter names {list(self.tensors)} do not match {list(expected)}"
            )
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigurationError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")
        if not self.adam_m:
            self.adam_m = {k: np.zeros_like(v) for k, v in self.tensors.items()}
        if not self.adam_v:
            self.adam_v = {k: np.zeros_like(v) for k, v in self.tensors.items()}
        for state in (self.adam_m, self.adam_v):
            if {k: v.shape for k, v in state.items()} != expected:
                raise ConfigurationError("adam state shapes do not mirror parameter shapes")

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)

    def conv(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[f"conv{layer}.kernel"], self.tensors[f"conv{layer}.bias"]

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors["dense.weight"], self.tensors["dense.bias"]

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def equal(self, other: "NetworkParams") -> bool:
        """Bit-exact comparison of the weights (ignores optimizer state)."""
        if self.config != other.config:
            return False
        return all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    ch = config.channels()
    for layer in range(config.num_layers):
        shapes[f"conv{layer}.kernel"] = (3, 3, ch[layer], ch[layer + 1])
        shapes[f"conv{layer}.bias"] = (ch[layer + 1],)
    shapes["dense.weight"] = (ch[-1], config.embed_dim)
    shapes["dense.bias"] = (config.embed_dim,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> NetworkParams:
    """Glorot-uniform kernels and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
            continue
        if name.startswith("conv"):
            fan_in, fan_out = 9 * shape[2], 9 * shape[3]
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    return NetworkParams(config, tensors)


def zero_params(config: ModelConfig) -> NetworkParams:
    return NetworkParams(config, {k: np.zeros(s) for k, s in param_shapes(config).items()})


# ---------------------------------------------------------------------------
# layer kernels

def _as_batch(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ConfigurationError(f"{name} expects HxWxC or NxHxWxC input, got shape {x.shape}")


def conv3x3_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size 3x3 convolution with one pixel of zero padding.

    ``out[y, x, f] = bias[f] + sum_{dy,dx,c} pad(x)[y+dy, x+dx, c] * kernel[dy, dx, c, f]``
    (cross-correlation, as in every deep learning framework).
    """
    xb, single = _as_batch(x, "conv3x3_forward")
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    n, h, w, c = xb.shape
    if h < 1 or w < 1:
        raise ConfigurationError("conv3x3_forward needs spatial dims >= 1")
    if kernel.shape[:3] != (3, 3, c) or kernel.ndim != 4:
        raise ConfigurationError(f"kernel shape {kernel.shape} does not match {c} input channels")
    if bias.shape != (kernel.shape[3],):
        raise ConfigurationError(f"bias shape {bias.shape} does not match {kernel.shape[3]} filters")
    out = _conv_padded(np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0))), kernel, h, w) + bias
    return out[0] if single else out


def _im2col(xpad: np.ndarray, h: int, w: int) -> np.ndarray:
    """``(N, h, w, 9*C)`` patches ordered (dy, dx, c) to match ``kernel.reshape(9*C, F)``."""
    return np.concatenate(
        [xpad[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)], axis=-1
    )


def _conv_padded(xpad: np.ndarray, kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    return _im2col(xpad, h, w) @ kernel.reshape(-1, kernel.shape[3])


def _conv_backward(patches: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray,
                   need_input_grad: bool = True):
    n, h, w, f = grad_out.shape
    c = kernel.shape[2]
    g2 = grad_out.reshape(-1, f)
    grad_kernel = (patches.reshape(-1, 9 * c).T @ g2).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0)
    if not need_input_grad:
        return None, grad_kernel, grad_bias
    taps = kernel.reshape(9, c, f)
    grad_xpad = np.zeros((n, h + 2, w + 2, c))
    for off in range(9):
        dy, dx = divmod(off, 3)
        grad_xpad[:, dy:dy + h, dx:dx + w, :] += (g2 @ taps[off].T).reshape(n, h, w, c)
    return grad_xpad[:, 1:-1, 1:-1, :], grad_kernel, grad_bias


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pooling.

    Returns the pooled tensor and an integer mask of the same shape holding
    the winning position (0..3, row-major inside the window) of every cell.
    A trailing odd row or column is dropped.  Ties go to the first position.
    """
    xb, single = _as_batch(x, "maxpool2x2_forward")
    n, h, w, c = xb.shape
    if h < 2 or w < 2:
        raise ConfigurationError(f"maxpool2x2 needs at least 2x2 input, got {h}x{w}")
    ho, wo = h // 2, w // 2
    corners = [xb[:, dy:2 * ho:2, dx:2 * wo:2, :] for dy in (0, 1) for dx in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    idx = np.full(out.shape, 3, dtype=np.int8)
    for pos in (2, 1, 0):
        idx[corners[pos] == out] = pos
    if single:
        return out[0], idx[0]
    return out, idx


def _maxpool_backward(grad_out: np.ndarray, idx: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    n, ho, wo, c = grad_out.shape
    grad_in = np.zeros(in_shape)
    for pos in range(4):
        dy, dx = divmod(pos, 2)
        grad_in[:, dy:2 * ho:2, dx:2 * wo:2, :] = np.where(idx == pos, grad_out, 0.0)
    return grad_in


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel mean over all spatial positions."""
    xb, single = _as_batch(x, "global_avg_pool")
    if xb.shape[1] < 1 or xb.shape[2] < 1:
        raise ConfigurationError("global_avg_pool needs spatial dims >= 1")
    out = xb.mean(axis=(1, 2))
    return out[0] if single else out


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``x @ weights + bias`` on a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ConfigurationError(
            f"dense shapes do not match: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    return x @ weights + bias


# ---------------------------------------------------------------------------
# whole network

@dataclass
class ForwardCache:
    config: ModelConfig
    batch_size: int
    patches: list[np.ndarray]
    preact: list[np.ndarray]
    pool_idx: list[np.ndarray]
    pooled_shape: tuple[int, ...]
    features: np.ndarray


def forward_batch(images: np.ndarray, params: NetworkParams) -> tuple[np.ndarray, ForwardCache]:
    """Embed a batch ``(N, H, W, 1)`` and keep what the backward pass needs."""
    config = params.config
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.shape[1:] != (config.input_height, config.input_width, 1):
        raise ConfigurationError(
            f"images of shape {x.shape[1:]} do not match model input "
            f"{(config.input_height, config.input_width, 1)}"
        )
    patches_list, preact, pool_idx = [], [], []
    for layer in range(config.num_layers):
        kernel, bias = params.conv(layer)
        h, w = x.shape[1:3]
        patches = _im2col(np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))), h, w)
        z = patches @ kernel.reshape(-1, kernel.shape[3]) + bias
        x, idx = maxpool2x2_forward(np.maximum(z, 0.0))
        patches_list.append(patches)
        preact.append(z)
        pool_idx.append(idx)
    features = global_avg_pool(x)
    weight, bias = params.dense()
    emb = dense_forward(features, weight, bias)
    cache = ForwardCache(config, len(emb), patches_list, preact, pool_idx, x.shape, features)
    return emb, cache


def backward_batch(params: NetworkParams, cache: ForwardCache | None, grad_emb: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(grad_emb * embeddings)`` for a cached batch.

    Contributions from every batch element are summed, which is what shared
    weights across the three triplet branches require.
    """
    if cache is None:
        raise UsageError("backward pass called without a forward cache")
    grad_emb = np.asarray(grad_emb, dtype=np.float64)
    if grad_emb.shape != (cache.batch_size, params.config.embed_dim):
        raise UsageError(f"upstream gradient shape {grad_emb.shape} does not match cached batch")
    if cache.config != params.config:
        raise UsageError("forward cache was produced with a different model config")
    grads = {}
    weight, _ = params.dense()
    grads["dense.weight"] = cache.features.T @ grad_emb
    grads["dense.bias"] = grad_emb.sum(axis=0)
    n, h, w, c = cache.pooled_shape
    g = np.broadcast_to((grad_emb @ weight.T)[:, None, None, :] / (h * w), cache.pooled_shape)
    for layer in reversed(range(params.config.num_layers)):
        z = cache.preact[layer]
        g = _maxpool_backward(g, cache.pool_idx[layer], z.shape)
        g = g * (z > 0)
        kernel, _ = params.conv(layer)
        g, gk, gb = _conv_backward(cache.patches[layer], kernel, g, need_input_grad=layer > 0)
        grads[f"conv{layer}.kernel"] = gk
        grads[f"conv{layer}.bias"] = gb
    return {k: grads[k] for k in params.tensors}


def embed(image: np.ndarray, params: NetworkParams) -> np.ndarray:
    """d-dimensional embedding of a single ``(H, W)`` or ``(H, W, 1)`` image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    emb, _ = forward_batch(image[None], params)
    return emb[0]


def embed_many(images: np.ndarray, params: NetworkParams, chunk: int = 64) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = [forward_batch(images[i:i + chunk], params)[0] for i in range(0, len(images), chunk)]
    if not out:
        return np.zeros((0, params.config.embed_dim))
    return np.concatenate(out)


def forward_triplet(images, params: NetworkParams) -> tuple[np.ndarray, ForwardCache]:
    batch = np.stack([np.asarray(im, dtype=np.float64).reshape(params.config.input_height, params.config.input_width, 1) for im in images])
    if len(batch) != 3:
        raise UsageError(f"a triplet has 3 images, got {len(batch)}")
    return forward_batch(batch, params)


def backward_triplet(params: NetworkParams, cache: ForwardCache | None, loss_grads) -> dict[str, np.ndarray]:
    """Gradients of a triplet loss given its gradient at the three embeddings."""
    if cache is not None and cache.batch_size != 3:
        raise UsageError("forward cache does not hold a triplet")
    return backward_batch(params, cache, np.asarray(loss_grads, dtype=np.float64).reshape(3, -1))


# ---------------------------------------------------------------------------
# optimizer

def adam_step(params: NetworkParams, grads: dict[str, np.ndarray], lr: float = ADAM_LR,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> NetworkParams:
    """One in-place Adam update with bias correction; returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    params.adam_step += 1
    t = params.adam_step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.tensors.items():
        g = grads[name]
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


# ---------------------------------------------------------------------------
# weights container
#
# b"TRIPEMB1"
# u32 config_len, config_len bytes of UTF-8 JSON (ModelConfig, sorted keys)
# u64 adam_step
# u32 tensor_count, then per tensor:
#     u32 name_len, name (UTF-8), u32 ndim, ndim x u32 dims, prod(dims) x f64
# All integers and floats little-endian.  Tensors appear in order: weights,
# then ``adam.m.<name>`` and ``adam.v.<name>`` for every weight.

def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode()
    parts = [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def weights_to_bytes(params: NetworkParams) -> bytes:
    config = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    named = list(params.tensors.items())
    named += [(f"adam.m.{k}", v) for k, v in params.adam_m.items()]
    named += [(f"adam.v.{k}", v) for k, v in params.adam_v.items()]
    parts = [WEIGHTS_MAGIC, struct.pack("<I", len(config)), config,
             struct.pack("<Q", params.adam_step), struct.pack("<I", len(named))]
    parts += [_pack_tensor(k, v) for k, v in named]
    return b"".join(parts)


def weights_from_bytes(buf: bytes) -> NetworkParams:
    if buf[:8] != WEIGHTS_MAGIC:
        raise DataError("not a weights file (bad magic)")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        config = ModelConfig.from_dict(json.loads(buf[pos:pos + n].decode()))
        pos += n
        (step,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        named = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            if pos + 8 * size > len(buf):
                raise DataError(f"weights file truncated inside tensor {name}")
            named[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt weights file: {exc}") from exc
    if pos != len(buf):
        raise DataError("trailing bytes after last tensor in weights file")
    names = list(param_shapes(config))
    try:
        return NetworkParams(
            config,
            {k: named[k] for k in names},
            {k: named[f"adam.m.{k}"] for k in names},
            {k: named[f"adam.v.{k}"] for k in names},
            step,
        )
    except KeyError as exc:
        raise DataError(f"weights file is missing tensor {exc}") from exc


def save_weights(params: NetworkParams, path) -> None:
    Path(path).write_bytes(weights_to_bytes(params))


def load_weights(path) -> NetworkParams:
    return weights_from_bytes(Path(path).read_bytes())
