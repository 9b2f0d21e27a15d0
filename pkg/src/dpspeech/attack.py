"""iDLG gradient inversion against a small victim network, plus reconstruction scores.

The attacker sees the parameter gradient of a single training example (or a
DP-noised version of it), infers the label from the output-bias gradient and
then optimises a dummy input with L-BFGS until its gradient matches.

The input gradient of the matching loss ``||g(x) - g*||^2`` is a
Jacobian-transpose-vector product ``J(x)^T v`` with ``v = 2 (g(x) - g*)``.
It equals the derivative of ``grad_x loss(theta + h v, x)`` in ``h``, which we
take by a central difference along the parameter direction ``v``: two extra
backward passes per evaluation, independent of the input size.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ParameterError
from .privacy import clip_gradient, dp_aggregate

SNR_CAP_DB = 120.0
HISTORY = 10
ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 40
FD_STEP = 1e-5


@dataclass
class LeakedGradient:
    param_grads: dict
    victim_config: nn.ModelConfig
    dp_applied: bool = False
    sigma: float = 0.0

    def __post_init__(self):
        nn.check_params(self.param_grads, self.victim_config)


@dataclass
class ReconstructionResult:
    recovered_input: np.ndarray
    inferred_label: int
    final_match_loss: float
    snr_db: float | None = None
    lsd: float | None = None
    iterations: int = 0
    line_search_failed: bool = False
    label_extracted: bool = True
    loss_history: list = field(default_factory=list)


def victim_config(input_shape=(1, 80, 180), n_classes=4, channels=4, seed=0):
    """LeNet-like victim: one unnormalised sigmoid conv layer and a flattened linear head."""
    block = nn.ConvBlock(channels, 3, 1, "none", "sigmoid", False)
    return nn.ModelConfig(tuple(input_shape), (block,), n_classes, seed, "flatten")


def config_hash(cfg: nn.ModelConfig):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- leakage --------------------------------------------------------------------

def _ce_grads(params, cfg, x, label, need_input_grad=False):
    logits, cache = nn.forward_batch(params, cfg, x[None], check=False)
    loss, gl = nn.softmax_ce_loss(logits, [label])
    g, dx = nn.backward_batch(params, cfg, cache, gl, need_input_grad=need_input_grad)
    return float(loss[0]), {k: v[0] for k, v in g.items()}, (None if dx is None else dx[0])


def leak_gradient(params, cfg, x, label, sigma=None, clip_norm=1.5, rng=None):
    """Gradient of one example's softmax cross-entropy, optionally DP-sanitised.

    With ``sigma`` given, the gradient goes through the same mechanism as one
    DP-SGD step on a single-member lot: clip to ``clip_norm``, add
    N(0, sigma^2 clip_norm^2) noise, divide by the expected lot size of 1.
    """
    _, g, _ = _ce_grads(params, cfg, np.asarray(x, dtype=np.float64), int(label))
    if sigma is None:
        return LeakedGradient(g, cfg, False, 0.0)
    if rng is None:
        raise ParameterError("a DP leak needs an explicit rng")
    noisy = dp_aggregate([clip_gradient(g, clip_norm)], clip_norm, sigma, 1.0, rng)
    return LeakedGradient(noisy, cfg, True, float(sigma))


def extract_label_idlg(bias_grad):
    """Index of the single negative output-bias gradient entry, or None.

    For softmax cross-entropy the bias gradient is ``p - onehot(y)``, so only
    the true class is negative.  Anything else (noise, aggregation) fails.
    """
    b = np.asarray(bias_grad, dtype=np.float64).ravel()
    neg = np.flatnonzero(b < 0)
    return int(neg[0]) if neg.size == 1 else None


def gradient_matching_loss(dummy_grads, leaked):
    """Squared L2 distance between two parameter-shaped gradients."""
    target = leaked.param_grads if isinstance(leaked, LeakedGradient) else leaked
    if list(dummy_grads) != list(target):
        raise ParameterError("gradient names differ")
    total = 0.0
    for k, v in target.items():
        if np.shape(dummy_grads[k]) != np.shape(v):
            raise ParameterError(f"{k}: shape {np.shape(dummy_grads[k])} != {np.shape(v)}")
        d = np.asarray(dummy_grads[k], dtype=np.float64) - v
        total += float(np.vdot(d, d))
    return total


def matching_objective(params, cfg, leaked, label):
    """Closure x -> (matching loss, d loss / d x)."""
    target = leaked.param_grads

    def fg(x):
        _, g, _ = _ce_grads(params, cfg, x, label)
        diff = {k: g[k] - target[k] for k in target}
        loss = sum(float(np.vdot(d, d)) for d in diff.values())
        vnorm = 2.0 * math.sqrt(loss)
        if vnorm == 0.0:
            return loss, np.zeros_like(x)
        # central difference along the unit direction u = v / |v|
        plus = {k: params[k] + FD_STEP * 2.0 * diff[k] / vnorm for k in params}
        minus = {k: params[k] - FD_STEP * 2.0 * diff[k] / vnorm for k in params}
        _, _, dxp = _ce_grads(plus, cfg, x, label, need_input_grad=True)
        _, _, dxm = _ce_grads(minus, cfg, x, label, need_input_grad=True)
        return loss, vnorm * (dxp - dxm) / (2.0 * FD_STEP)

    return fg


# -- L-BFGS -----------------------------------------------------------------------

@dataclass
class LBFGSResult:
    x: np.ndarray
    loss: float
    iterations: int
    line_search_failed: bool
    history: list


def lbfgs_minimize(fg, x0, iters=100, lr=0.1, history=HISTORY, c1=ARMIJO_C1, tol=0.0):
    """Minimise ``fg`` (returning value and gradient) with limited-memory BFGS.

    Every iteration uses an Armijo backtracking line search.  The first step
    (and the first step after a reset) tries ``lr * min(1, 1/|g|_1)`` along
    the negative gradient; quasi-Newton steps try the unit step.  Accepted
    losses never increase.  When no step length passes the sufficient
    decrease test, the search stops and returns the best iterate so far.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    f, g = fg(x)
    hist = [f]
    s_list, y_list = [], []
    failed = False
    k = 0
    for k in range(1, iters + 1):
        if f <= tol:
            k -= 1
            break
        gf = g.ravel()
        q = gf.copy()
        alphas = []
        for s, y in zip(reversed(s_list), reversed(y_list)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            q -= a * y
            alphas.append((rho, a))
        if s_list:
            gamma = float(s_list[-1] @ y_list[-1]) / float(y_list[-1] @ y_list[-1])
            q *= gamma
            for (rho, a), s, y in zip(reversed(alphas), s_list, y_list):
                q += (a - rho * float(y @ q)) * s
            d = -q
            t = 1.0
        else:
            d = -gf
            t = lr * min(1.0, 1.0 / max(float(np.abs(gf).sum()), 1e-300))
        slope = float(gf @ d)
        if not slope < 0:
            s_list.clear()
            y_list.clear()
            d = -gf
            slope = -float(gf @ gf)
            t = lr * min(1.0, 1.0 / max(float(np.abs(gf).sum()), 1e-300))
            if slope == 0:
                k -= 1
                break
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            x_new = x + t * d.reshape(x.shape)
            f_new, g_new = fg(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            failed = True
            k -= 1
            break
        s = (x_new - x).ravel()
        y = (g_new - g).ravel()
        if float(s @ y) > 1e-12 * float(y @ y):
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > history:
                s_list.pop(0)
                y_list.pop(0)
        x, f, g = x_new, f_new, g_new
        hist.append(f)
    return LBFGSResult(x, f, k if iters > 0 else 0, failed, hist)


# -- reconstruction ---------------------------------------------------------------

def lbfgs_reconstruct(leaked: LeakedGradient, victim_params, iters=100, lr=0.1, rng=None,
                      reference=None, label=None, probe_iters=10):
    """Recover an input whose gradient matches ``leaked``.

    The label comes from :func:`extract_label_idlg`.  When extraction fails,
    each class is tried for ``probe_iters`` iterations from the same dummy and
    the one with the lowest matching loss wins.  ``reference`` (the true
    input) is only used to score the result.
    """
    if rng is None:
        raise ParameterError("lbfgs_reconstruct needs a seeded rng")
    cfg = leaked.victim_config
    nn.check_params(victim_params, cfg)
    x0 = rng.standard_normal(cfg.input_shape)
    extracted = extract_label_idlg(leaked.param_grads["head.bias"]) if label is None else int(label)
    if extracted is None:
        probes = []
        for c in range(cfg.n_classes):
            r = lbfgs_minimize(matching_objective(victim_params, cfg, leaked, c), x0, probe_iters, lr)
            probes.append(r.loss)
        chosen = int(np.argmin(probes))
    else:
        chosen = extracted
    res = lbfgs_minimize(matching_objective(victim_params, cfg, leaked, chosen), x0, iters, lr)
    out = ReconstructionResult(res.x, chosen, res.loss, iterations=res.iterations,
                               line_search_failed=res.line_search_failed,
                               label_extracted=extracted is not None, loss_history=res.history)
    if reference is not None:
        ref = np.asarray(reference, dtype=np.float64).reshape(cfg.input_shape)
        out.snr_db = snr_db(ref, res.x)
        out.lsd = log_spectral_distance(ref[0], res.x[0])
    return out


def snr_db(reference, estimate):
    """10 log10(signal energy / error energy), capped at 120 dB."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ParameterError(f"shape mismatch {ref.shape} vs {est.shape}")
    sig = float(np.vdot(ref, ref))
    if sig == 0:
        raise ParameterError("reference is all zeros")
    err = float(np.vdot(ref - est, ref - est))
    if err == 0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(sig / err))


def log_spectral_distance(reference, estimate):
    """Mean over frames of the RMS log-energy difference across mel bins."""
    ref = getattr(reference, "values", reference)
    est = getattr(estimate, "values", estimate)
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape or ref.ndim != 2:
        raise ParameterError(f"need two equal (n_mels, n_frames) matrices, got {ref.shape}, {est.shape}")
    return float(np.sqrt(np.mean((ref - est) ** 2, axis=0)).mean())


# -- reports ----------------------------------------------------------------------

def attack_report(result: ReconstructionResult, leaked: LeakedGradient, seed):
    def num(v):
        return None if v is None else float(v)

    return {
        "victim_config_hash": config_hash(leaked.victim_config),
        "dp_applied": leaked.dp_applied,
        "sigma": leaked.sigma,
        "seed": int(seed),
        "inferred_label": result.inferred_label,
        "label_extracted": result.label_extracted,
        "final_match_loss": float(result.final_match_loss),
        "snr_db": num(result.snr_db),
        "lsd": num(result.lsd),
        "iterations": result.iterations,
        "line_search_failed": result.line_search_failed,
    }


def write_matrix_csv(path, matrix):
    """Dump a 2-D array with a header row of column indices."""
    m = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"frame{j}" for j in range(m.shape[1])])
        for row in m:
            w.writerow([repr(float(v)) for v in row])
