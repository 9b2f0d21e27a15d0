"""Output losses returning (loss, d loss / d logits).

Both accept a single logit vector (K,) or a batch (N, K); batched calls
return one loss per row.
"""
import numpy as np

from ..errors import NumericError, ParameterError


def _softplus(z):
    return np.logaddexp(0.0, z)


def _check(logits):
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits contain non-finite values")
    return logits


def sigmoid_bce_loss(logits, targets, class_weights=None):
    """Class-weighted binary cross-entropy over independent sigmoid outputs.

    loss = -sum_i w_i [y_i ln s(z_i) + (1 - y_i) ln(1 - s(z_i))] / K
    """
    z = _check(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ParameterError(f"targets shape {y.shape} != logits shape {z.shape}")
    k = z.shape[-1]
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (k,) or np.any(w <= 0):
        raise ParameterError("class_weights must be positive with one entry per class")
    per = y * _softplus(-z) + (1.0 - y) * _softplus(z)
    loss = (per * w).sum(axis=-1) / k
    grad = w * (0.5 * (1.0 + np.tanh(0.5 * z)) - y) / k
    return (float(loss) if z.ndim == 1 else loss), grad


def softmax_ce_loss(logits, labels):
    """Softmax cross-entropy against integer labels; grad = softmax - onehot."""
    z = _check(logits)
    single = z.ndim == 1
    z2 = z[None] if single else z
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (z2.shape[0],) or labels.min() < 0 or labels.max() >= z2.shape[1]:
        raise ParameterError("labels must be class indices, one per row")
    lse = np.logaddexp.reduce(z2, axis=1)
    loss = lse - z2[np.arange(z2.shape[0]), labels]
    grad = np.exp(z2 - lse[:, None])
    grad[np.arange(z2.shape[0]), labels] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def one_hot(label, n_classes):
    y = np.zeros(n_classes)
    y[int(label)] = 1.0
    return y


def inverse_frequency_weights(labels, n_classes):
    """Per-class weights proportional to 1/frequency, normalised to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(float)
    if np.any(counts == 0):
        raise ParameterError("every class needs at least one training example for weighting")
    w = 1.0 / counts
    return w * (n_classes / w.sum())
