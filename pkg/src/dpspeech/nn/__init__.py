"""Minimal differentiable model stack: CNN, losses, optimizers, checkpoints."""
import numpy as np

from ..errors import ParameterError
from .checkpoint import decode, encode, load_checkpoint, save_checkpoint
from .losses import inverse_frequency_weights, one_hot, sigmoid_bce_loss, softmax_ce_loss
from .model import (ConvBlock, ForwardCache, ModelConfig, backward_batch, check_params,
                    desk_config, fingerprint, flatten, forward_batch, global_norm, group_norm,
                    init_params, model_backward, model_forward, param_shapes, unflatten,
                    zeros_like)
from .optim import OptimState, adam_step, init_state, nadam_step

CHUNK = 16


def batch_gradients(params, cfg, x, targets, class_weights=None, loss="bce", chunk=CHUNK):
    """Per-example losses (N,) and per-example gradients (dict of (N, ...) arrays).

    ``targets`` are one-hot rows for ``loss="bce"`` and integer labels for
    ``loss="ce"``.  Work is chunked to bound activation memory; every row
    is computed independently so results do not depend on the chunk size.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ParameterError("empty batch")
    check_params(params, cfg)
    losses = np.empty(n)
    out = {k: np.empty((n,) + v.shape) for k, v in params.items()}
    for s in range(0, n, chunk):
        xb = x[s:s + chunk]
        logits, cache = forward_batch(params, cfg, xb, check=False)
        if loss == "bce":
            lb, gl = sigmoid_bce_loss(logits, np.asarray(targets[s:s + chunk], float), class_weights)
        elif loss == "ce":
            lb, gl = softmax_ce_loss(logits, np.asarray(targets[s:s + chunk]))
        else:
            raise ParameterError(f"unknown loss {loss!r}")
        g, _ = backward_batch(params, cfg, cache, gl)
        losses[s:s + chunk] = lb
        for k in out:
            out[k][s:s + chunk] = g[k]
    return losses, out


def per_example_gradients(params, cfg, batch, weights=None, loss="bce"):
    """List of gradient dicts, one per (x, target) pair in ``batch``."""
    if len(batch) == 0:
        raise ParameterError("per_example_gradients needs a non-empty batch")
    x = np.stack([np.asarray(b[0], dtype=np.float64) for b in batch])
    t = [b[1] for b in batch]
    _, g = batch_gradients(params, cfg, x, t, weights, loss)
    return [{k: v[i] for k, v in g.items()} for i in range(len(batch))]


def mean_gradient(params, cfg, x, targets, class_weights=None, loss="bce"):
    """Mean loss and gradient of the mean loss over a batch."""
    losses, g = batch_gradients(params, cfg, x, targets, class_weights, loss)
    return float(losses.mean()), {k: v.mean(axis=0) for k, v in g.items()}


def predict_scores(params, cfg, x, chunk=32):
    """Sigmoid class scores for a batch, shape (N, n_classes)."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for s in range(0, x.shape[0], chunk):
        logits, _ = forward_batch(params, cfg, x[s:s + chunk], check=False)
        out.append(0.5 * (1.0 + np.tanh(0.5 * logits)))
    return np.concatenate(out, axis=0)


__all__ = [
    "ConvBlock", "ForwardCache", "ModelConfig", "OptimState", "adam_step", "backward_batch",
    "batch_gradients", "check_params", "decode", "desk_config", "encode", "fingerprint",
    "flatten", "forward_batch", "global_norm", "group_norm", "init_params", "init_state",
    "inverse_frequency_weights", "load_checkpoint", "mean_gradient", "model_backward",
    "model_forward", "nadam_step", "one_hot", "param_shapes", "per_example_gradients",
    "predict_scores", "save_checkpoint", "sigmoid_bce_loss", "softmax_ce_loss", "unflatten",
    "zeros_like",
]
