"""Small group-normalised CNN with hand-written reverse-mode gradients.

Architecture: repeated ``conv3x3 -> norm -> activation -> 2x2 avg-pool``
blocks, then either global average pooling or flattening, then a linear
head.  Everything runs in float64 on batches of shape (N, C, H, W); the
single-example entry points are thin wrappers.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .. import _kernels
from ..errors import ConsistencyError, ParameterError

NORMS = ("group", "none", "batch")
ACTIVATIONS = ("relu", "sigmoid")
HEADS = ("gap", "time_gap", "flatten")


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    norm_groups: int = 1
    norm: str = "group"
    activation: str = "relu"
    pool: bool = True


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple
    conv_blocks: tuple = field(default_factory=tuple)
    n_classes: int = 2
    seed: int = 0
    head: str = "gap"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ParameterError(f"input_shape must be [channels, n_mels, n_frames], got {self.input_shape}")
        if self.n_classes < 2:
            raise ParameterError("n_classes must be >= 2")
        if self.head not in HEADS:
            raise ParameterError(f"head must be one of {HEADS}")
        for i, b in enumerate(blocks):
            if b.norm not in NORMS:
                raise ParameterError(f"block {i}: norm must be one of {NORMS}")
            if b.activation not in ACTIVATIONS:
                raise ParameterError(f"block {i}: activation must be one of {ACTIVATIONS}")
            if b.kernel % 2 != 1 or b.kernel < 1:
                raise ParameterError(f"block {i}: kernel must be odd")
            if b.norm == "group" and (b.norm_groups < 1 or b.out_channels % b.norm_groups):
                raise ParameterError(
                    f"block {i}: out_channels={b.out_channels} not divisible by norm_groups={b.norm_groups}")

    @property
    def uses_batch_norm(self):
        return any(b.norm == "batch" for b in self.conv_blocks)

    def feature_shape(self):
        c, h, w = self.input_shape
        for b in self.conv_blocks:
            c = b.out_channels
            if b.pool:
                h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ParameterError("input too small for the number of pooling blocks")
        return c, h, w

    def n_features(self):
        c, h, w = self.feature_shape()
        if self.head == "gap":
            return c
        return c * h if self.head == "time_gap" else c * h * w

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "conv_blocks": [vars(b).copy() for b in self.conv_blocks],
            "n_classes": self.n_classes,
            "seed": self.seed,
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_shape"], tuple(ConvBlock(**b) for b in d["conv_blocks"]),
                   d["n_classes"], d.get("seed", 0), d.get("head", "gap"))

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


def desk_config(n_classes, seed=0, input_shape=(1, 80, 180), channels=(16, 32), head="gap"):
    """Default diagnostic network: two group-normalised blocks, pooling, linear head."""
    blocks = []
    for ch in channels:
        g = min(32, ch)
        while ch % g:
            g -= 1
        blocks.append(ConvBlock(ch, 3, g, "group", "relu", True))
    return ModelConfig(tuple(input_shape), tuple(blocks), n_classes, seed, head)


# -- parameters -------------------------------------------------------------

def param_shapes(cfg: ModelConfig):
    shapes = {}
    c_in = cfg.input_shape[0]
    for i, b in enumerate(cfg.conv_blocks):
        shapes[f"block{i}.conv.weight"] = (b.out_channels, c_in, b.kernel, b.kernel)
        if b.norm == "group":
            shapes[f"block{i}.norm.gamma"] = (b.out_channels,)
            shapes[f"block{i}.norm.beta"] = (b.out_channels,)
        c_in = b.out_channels
    shapes["head.weight"] = (cfg.n_classes, cfg.n_features())
    shapes["head.bias"] = (cfg.n_classes,)
    return shapes


def init_params(cfg: ModelConfig):
    """Kaiming-uniform (fan-in) weights, unit gains, zero biases; seeded by cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("gamma"):
            params[name] = np.ones(shape)
        elif name.endswith("beta") or name.endswith("bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def check_params(params, cfg):
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        raise ParameterError(f"parameter names {list(params)} do not match config {list(shapes)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ParameterError(f"{name}: shape {params[name].shape}, expected {shape}")


def zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def flatten(params):
    return np.concatenate([np.ravel(v) for v in params.values()])


def unflatten(vec, template):
    need = sum(v.size for v in template.values())
    if need != len(vec):
        raise ParameterError(f"vector has {len(vec)} entries, parameters need {need}")
    out, pos = {}, 0
    for k, v in template.items():
        out[k] = np.asarray(vec[pos:pos + v.size], dtype=np.float64).reshape(v.shape)
        pos += v.size
    return out


def global_norm(grads):
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def fingerprint(params):
    h = hashlib.blake2b(digest_size=16)
    for k, v in params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


# -- layers -----------------------------------------------------------------

def group_norm(x, groups, gamma, beta, eps_n=1e-5):
    """Group normalisation of a (C, H, W) or (N, C, H, W) array."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise ParameterError(f"{c} channels not divisible into {groups} groups")
    if eps_n <= 0:
        raise ParameterError("eps_n must be positive")
    y, _, _ = _kernels.group_norm_forward(np.ascontiguousarray(x), int(groups), np.asarray(gamma, float),
                                          np.asarray(beta, float), float(eps_n))
    return y[0] if single else y


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- forward / backward -----------------------------------------------------

@dataclass
class ForwardCache:
    params_id: str
    x: np.ndarray
    blocks: list
    features: np.ndarray
    last_map_shape: tuple = ()
    single: bool = False


GN_EPS = 1e-5


def forward_batch(params, cfg: ModelConfig, x, check=True):
    """Logits (N, n_classes) and the cache needed by :func:`backward_batch`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
        raise ParameterError(f"input batch shape {x.shape} does not match (N, {cfg.input_shape})")
    if check:
        check_params(params, cfg)
    if cfg.uses_batch_norm:
        raise ParameterError("batch normalisation is not supported; use group norm")
    h = np.ascontiguousarray(x)
    blocks = []
    for i, b in enumerate(cfg.conv_blocks):
        rec = {"input": h}
        z = _kernels.conv2d_forward(h, params[f"block{i}.conv.weight"])
        if b.norm == "group":
            z, rec["xhat"], rec["inv"] = _kernels.group_norm_forward(
                z, b.norm_groups, params[f"block{i}.norm.gamma"], params[f"block{i}.norm.beta"], GN_EPS)
        rec["pre"] = z
        a = np.maximum(z, 0.0) if b.activation == "relu" else _sigmoid(z)
        rec["act"] = a
        h = _kernels.avg_pool2_forward(a) if b.pool else a
        blocks.append(rec)
    if cfg.head == "gap":
        feats = h.mean(axis=(2, 3))
    elif cfg.head == "time_gap":
        feats = h.mean(axis=3).reshape(h.shape[0], -1)
    else:
        feats = h.reshape(h.shape[0], -1)
    logits = feats @ params["head.weight"].T + params["head.bias"]
    return logits, ForwardCache(fingerprint(params), x, blocks, feats, h.shape)


def backward_batch(params, cfg: ModelConfig, cache: ForwardCache, grad_logits, need_input_grad=False):
    """Per-example parameter gradients (leading axis N) and optional input gradients."""
    if cache.params_id != fingerprint(params):
        raise ConsistencyError("forward cache was produced with different parameters")
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    n = cache.x.shape[0]
    if grad_logits.shape != (n, cfg.n_classes):
        raise ParameterError(f"grad_logits shape {grad_logits.shape}, expected {(n, cfg.n_classes)}")
    grads = {}
    feats = cache.features
    grads["head.weight"] = grad_logits[:, :, None] * feats[:, None, :]
    grads["head.bias"] = grad_logits.copy()
    dfeat = grad_logits @ params["head.weight"]
    shape = cache.last_map_shape
    if cfg.head == "gap":
        dh = np.broadcast_to((dfeat / (shape[2] * shape[3]))[:, :, None, None], shape).copy()
    elif cfg.head == "time_gap":
        dh = np.broadcast_to((dfeat.reshape(shape[:3]) / shape[3])[..., None], shape).copy()
    else:
        dh = dfeat.reshape(shape)
    block_grads = []
    for i in reversed(range(len(cfg.conv_blocks))):
        b = cfg.conv_blocks[i]
        rec = cache.blocks[i]
        ah, aw = rec["act"].shape[2:]
        da = _kernels.avg_pool2_backward(np.ascontiguousarray(dh), ah, aw) if b.pool else dh
        if b.activation == "relu":
            dz = da * (rec["pre"] > 0)
        else:
            a = rec["act"]
            dz = da * a * (1.0 - a)
        entry = {}
        if b.norm == "group":
            dz, entry["gamma"], entry["beta"] = _kernels.group_norm_backward(
                np.ascontiguousarray(dz), rec["xhat"], rec["inv"], b.norm_groups,
                params[f"block{i}.norm.gamma"])
        w = params[f"block{i}.conv.weight"]
        entry["weight"] = _kernels.conv2d_backward_weight(rec["input"], np.ascontiguousarray(dz), b.kernel, b.kernel)
        block_grads.append((i, entry))
        if i > 0 or need_input_grad:
            dh = _kernels.conv2d_backward_input(np.ascontiguousarray(dz), w)
        else:
            dh = None
    out = {}
    for i, entry in sorted(block_grads):
        out[f"block{i}.conv.weight"] = entry["weight"]
        if "gamma" in entry:
            out[f"block{i}.norm.gamma"] = entry["gamma"]
            out[f"block{i}.norm.beta"] = entry["beta"]
    out["head.weight"] = grads["head.weight"]
    out["head.bias"] = grads["head.bias"]
    return out, (dh if need_input_grad else None)


def model_forward(params, cfg: ModelConfig, x):
    """Single example: x of shape ``cfg.input_shape`` -> (logits (n_classes,), cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != cfg.input_shape:
        raise ParameterError(f"input shape {x.shape} does not match {cfg.input_shape}")
    logits, cache = forward_batch(params, cfg, x[None])
    cache.single = True
    return logits[0], cache


def model_backward(params, cfg: ModelConfig, cache: ForwardCache, grad_logits):
    """Single example: (parameter gradients, input gradient)."""
    grad_logits = np.asarray(grad_logits, dtype=np.float64).reshape(1, -1)
    grads, dx = backward_batch(params, cfg, cache, grad_logits, need_input_grad=True)
    return {k: v[0] for k, v in grads.items()}, dx[0]
