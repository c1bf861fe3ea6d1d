"""Minimal dense/conv numerical kernels with reverse-mode gradients, plus the
two-branch multi-resolution CNN used for staging and feature extraction.

Everything runs in float64 numpy. Each layer implements forward/backward by
hand; finite-difference tests pin the gradients down to 1e-4 relative error.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .edf import EPOCH_SAMPLES, EpochDataset

N_CLASSES = 5

CHECKPOINT_MAGIC = b"SLPA"
CHECKPOINT_VERSION = 1


class NnError(Exception):
    pass


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(
        2.0 * math.pi
    )


_ACTIVATIONS = {
    "gelu": (gelu, gelu_grad),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(np.float64)),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    activation: str = "gelu"

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def out_length(self, in_length: int) -> int:
        out = (in_length + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise NnError(
                f"conv with K={self.kernel}, stride={self.stride}, pad={self.padding} "
                f"produces empty output for input length {in_length}"
            )
        return out


def conv1d_forward(x: np.ndarray, spec: ConvLayerSpec, w: np.ndarray, b: np.ndarray):
    """Cross-correlation + bias + activation.

    x: (N, C_in, L); w: (C_out, C_in, K); b: (C_out,).
    Returns (activated output (N, C_out, L_out), cache for backward).
    """
    if x.ndim != 3 or x.shape[1] != spec.in_channels:
        raise NnError(f"conv input shape {x.shape} incompatible with spec {spec}")
    spec.out_length(x.shape[2])  # raises if the output would be empty
    if spec.padding:
        x = np.pad(x, ((0, 0), (0, 0), (spec.padding, spec.padding)))
    win = sliding_window_view(x, spec.kernel, axis=2)[:, :, :: spec.stride, :]
    # batched matmul: one GEMM per batch row, so each row's result is
    # independent of what else is in the batch (bit-identical duplicates)
    n, c, l_out, k = win.shape
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n, c * k, l_out)
    w2 = w.reshape(spec.out_channels, c * k)
    pre = np.matmul(w2, cols) + b[None, :, None]
    act, _ = _ACTIVATIONS[spec.activation]
    return act(pre), (x, win, pre)


def conv1d_backward(gout, cache, spec: ConvLayerSpec, w: np.ndarray):
    """Gradients of conv1d_forward. Returns (gx (unpadded), gw, gb)."""
    x_padded, win, pre = cache
    _, dact = _ACTIVATIONS[spec.activation]
    gpre = gout * dact(pre)
    gw = np.einsum("nol,nclk->ock", gpre, win, optimize=True)
    gb = gpre.sum(axis=(0, 2))
    gx = np.zeros_like(x_padded)
    k, s = spec.kernel, spec.stride
    for t in range(gpre.shape[2]):
        # scatter each output position's contribution back over its window
        gx[:, :, t * s : t * s + k] += np.einsum(
            "no,ock->nck", gpre[:, :, t], w, optimize=True
        )
    if spec.padding:
        gx = gx[:, :, spec.padding : -spec.padding]
    return gx, gw, gb


def maxpool_forward(x: np.ndarray, k: int):
    n, c, l = x.shape
    l_out = l // k
    xr = x[:, :, : l_out * k].reshape(n, c, l_out, k)
    idx = xr.argmax(axis=3)
    out = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]
    return out, (x.shape, idx, k)


def maxpool_backward(gout, cache):
    shape, idx, k = cache
    n, c, l = shape
    l_out = l // k
    gxr = np.zeros((n, c, l_out, k))
    np.put_along_axis(gxr, idx[..., None], gout[..., None], axis=3)
    gx = np.zeros(shape)
    gx[:, :, : l_out * k] = gxr.reshape(n, c, l_out * k)
    return gx


def meanpool_time_forward(x: np.ndarray):
    return x.mean(axis=2), x.shape


def meanpool_time_backward(gout, shape):
    n, c, l = shape
    return np.repeat(gout[:, :, None], l, axis=2) / l


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, activation: str):
    # plain einsum (no BLAS dispatch) keeps each row's summation order
    # independent of the batch, so duplicated inputs give bit-equal rows
    pre = np.einsum("ni,oi->no", x, w) + b
    act, _ = _ACTIVATIONS[activation]
    return act(pre), (x, pre)


def dense_backward(gout, cache, w, activation):
    x, pre = cache
    _, dact = _ACTIVATIONS[activation]
    gpre = gout * dact(pre)
    gw = gpre.T @ x
    gb = gpre.sum(axis=0)
    gx = gpre @ w
    return gx, gw, gb


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient wrt logits."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise NnError(f"labels out of range [0, {logits.shape[1]})")
    p = softmax(logits)
    n = logits.shape[0]
    eps = 1e-300
    loss = -np.log(p[np.arange(n), labels] + eps).mean()
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the two-branch model.

    Each branch: Conv(K, 32 ch, stride K//8) -> GELU -> maxpool(8)
    -> Conv(7, 64 ch, pad 3) -> GELU -> mean-pool over time; the pooled
    64-dim branch outputs concatenate to a 128-dim vector feeding the
    dense 128 -> 64 -> 5 head.
    """

    input_length: int = EPOCH_SAMPLES
    wide_kernel: int = 400
    narrow_kernel: int = 50
    branch_channels: int = 32
    branch_channels2: int = 64
    hidden: int = 64
    n_classes: int = N_CLASSES
    pool: int = 8
    feature_tap: int = 2  # 0: wide pooled, 1: narrow pooled, 2: concat, 3: hidden

    def branch_specs(self, kernel: int) -> tuple[ConvLayerSpec, ConvLayerSpec]:
        stride = max(1, kernel // 8)
        return (
            ConvLayerSpec(kernel, 1, self.branch_channels, stride=stride),
            ConvLayerSpec(7, self.branch_channels, self.branch_channels2, padding=3),
        )

    @property
    def concat_dim(self) -> int:
        return 2 * self.branch_channels2

    def feature_dim(self) -> int:
        return {0: self.branch_channels2, 1: self.branch_channels2,
                2: self.concat_dim, 3: self.hidden}[self.feature_tap]


# parameter declaration order, used by checkpoints and sgd_step
_PARAM_NAMES = [
    "wide1_w", "wide1_b", "wide2_w", "wide2_b",
    "narrow1_w", "narrow1_b", "narrow2_w", "narrow2_b",
    "head1_w", "head1_b", "head2_w", "head2_b",
]


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.params.items()})

    def param_list(self):
        return [(name, self.params[name]) for name in _PARAM_NAMES]


def _glorot(rng, shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    fan_out = shape[0]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = {}
    for prefix, kernel in [("wide", config.wide_kernel), ("narrow", config.narrow_kernel)]:
        s1, s2 = config.branch_specs(kernel)
        p[f"{prefix}1_w"] = _glorot(rng, (s1.out_channels, s1.in_channels, s1.kernel))
        p[f"{prefix}1_b"] = np.zeros(s1.out_channels)
        p[f"{prefix}2_w"] = _glorot(rng, (s2.out_channels, s2.in_channels, s2.kernel))
        p[f"{prefix}2_b"] = np.zeros(s2.out_channels)
    p["head1_w"] = _glorot(rng, (config.hidden, config.concat_dim))
    p["head1_b"] = np.zeros(config.hidden)
    p["head2_w"] = _glorot(rng, (config.n_classes, config.hidden))
    p["head2_b"] = np.zeros(config.n_classes)
    return ModelParams(config=config, params=p)


def _branch_forward(x, specs, w1, b1, w2, b2, pool):
    h1, c1 = conv1d_forward(x, specs[0], w1, b1)
    h2, c2 = maxpool_forward(h1, pool)
    h3, c3 = conv1d_forward(h2, specs[1], w2, b2)
    h4, c4 = meanpool_time_forward(h3)
    return h4, (c1, c2, c3, c4)


def _branch_backward(gout, caches, specs, w1, w2):
    c1, c2, c3, c4 = caches
    g = meanpool_time_backward(gout, c4)
    g, gw2, gb2 = conv1d_backward(g, c3, specs[1], w2)
    g = maxpool_backward(g, c2)
    _, gw1, gb1 = conv1d_backward(g, c1, specs[0], w1)
    return gw1, gb1, gw2, gb2


def _forward_full(model: ModelParams, x: np.ndarray):
    cfg = model.config
    p = model.params
    if x.ndim != 2 or x.shape[1] != cfg.input_length:
        raise NnError(
            f"expected batch of epochs with {cfg.input_length} samples, got {x.shape}"
        )
    xb = x[:, None, :]
    wide_specs = cfg.branch_specs(cfg.wide_kernel)
    narrow_specs = cfg.branch_specs(cfg.narrow_kernel)
    fw, wc = _branch_forward(xb, wide_specs, p["wide1_w"], p["wide1_b"],
                             p["wide2_w"], p["wide2_b"], cfg.pool)
    fn, nc = _branch_forward(xb, narrow_specs, p["narrow1_w"], p["narrow1_b"],
                             p["narrow2_w"], p["narrow2_b"], cfg.pool)
    concat = np.concatenate([fw, fn], axis=1)
    hidden, hc = dense_forward(concat, p["head1_w"], p["head1_b"], "gelu")
    logits, lc = dense_forward(hidden, p["head2_w"], p["head2_b"], "identity")
    taps = {0: fw, 1: fn, 2: concat, 3: hidden}
    cache = (wide_specs, narrow_specs, wc, nc, hc, lc)
    return logits, taps, cache


def forward(model: ModelParams, x: np.ndarray):
    """Class logits and the tapped feature matrix for a batch of epochs.

    x: (N, input_length). Returns (logits (N, 5), features (N, D)).
    """
    logits, taps, _ = _forward_full(model, x)
    return logits, taps[model.config.feature_tap]


def backward(model: ModelParams, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and gradients for every parameter."""
    cfg = model.config
    p = model.params
    logits, _taps, cache = _forward_full(model, x)
    loss, glogits = cross_entropy(logits, labels)
    wide_specs, narrow_specs, wc, nc, hc, lc = cache
    ghidden, gh2w, gh2b = dense_backward(glogits, lc, p["head2_w"], "identity")
    gconcat, gh1w, gh1b = dense_backward(ghidden, hc, p["head1_w"], "gelu")
    c2 = cfg.branch_channels2
    gw1w, gw1b, gw2w, gw2b = _branch_backward(gconcat[:, :c2], wc, wide_specs,
                                              p["wide1_w"], p["wide2_w"])
    gn1w, gn1b, gn2w, gn2b = _branch_backward(gconcat[:, c2:], nc, narrow_specs,
                                              p["narrow1_w"], p["narrow2_w"])
    grads = {
        "wide1_w": gw1w, "wide1_b": gw1b, "wide2_w": gw2w, "wide2_b": gw2b,
        "narrow1_w": gn1w, "narrow1_b": gn1b, "narrow2_w": gn2w, "narrow2_b": gn2b,
        "head1_w": gh1w, "head1_b": gh1b, "head2_w": gh2w, "head2_b": gh2b,
    }
    return loss, grads


def sgd_step(model: ModelParams, grads: dict, lr: float, weight_decay: float = 0.0) -> ModelParams:
    """W <- W - lr * (grad + weight_decay * W), applied uniformly."""
    if lr <= 0:
        raise NnError(f"learning rate must be > 0, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NnError(f"non-finite gradient in {name}: "
                          f"max |g| = {np.abs(g[np.isfinite(g)]).max() if np.isfinite(g).any() else 'n/a'}")
    new = {name: w - lr * (grads[name] + weight_decay * w)
           for name, w in model.params.items()}
    return ModelParams(config=model.config, params=new)


def extract_features(model: ModelParams, dataset: EpochDataset) -> "FeatureSet":
    """Run the shared extractor over a dataset, keep only the tapped features."""
    x = dataset.samples_matrix()
    _, feats = forward(model, x)
    if not np.all(np.isfinite(feats)):
        raise NnError("non-finite values in extracted features")
    return FeatureSet(matrix=feats, domain=dataset.domain)


@dataclass
class FeatureSet:
    matrix: np.ndarray  # (N, D)
    domain: str
    batch_id: str | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]


def save_checkpoint(model: ModelParams, path: str | Path, train_config: dict | None = None):
    """Binary checkpoint: magic, version, JSON layer specs, float64-LE params
    in declaration order. A JSON sidecar records shapes and the train config."""
    path = Path(path)
    spec_json = json.dumps(asdict(model.config), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(spec_json)))
        f.write(spec_json)
        for _name, arr in model.param_list():
            f.write(arr.astype("<f8").tobytes())
    sidecar = {
        "config": asdict(model.config),
        "shapes": {name: list(arr.shape) for name, arr in model.param_list()},
        "train_config": train_config or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise NnError(f"{path} is not a model checkpoint (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise NnError(f"unsupported checkpoint version {version}")
    spec_len = struct.unpack("<I", raw[8:12])[0]
    config = ModelConfig(**json.loads(raw[12 : 12 + spec_len]))
    ref = init_model(config, seed=0)
    off = 12 + spec_len
    params = {}
    for name, arr in ref.param_list():
        nbytes = arr.size * 8
        params[name] = np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(arr.shape).copy()
        off += nbytes
    return ModelParams(config=config, params=params)
