"""DP-SGD mechanics and a Renyi-DP accountant for the sampled Gaussian mechanism."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from . import nn
from .errors import CalibrationError, ContractViolation, NumericError, ParameterError

DEFAULT_CLIP = 1.5
DEFAULT_DELTA = 1e-3
DEFAULT_ORDERS = tuple(sorted([1.25, 1.5, 1.75] + list(range(2, 65)) + [128, 256]))
CLIP_TOL = 1e-9


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ParameterError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float
    clip_norm: float = DEFAULT_CLIP
    sample_rate_q: float = 1.0
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError("sigma must be positive")
        if not self.clip_norm > 0:
            raise ParameterError("clip_norm must be positive")
        if not 0 < self.sample_rate_q <= 1:
            raise ParameterError("sample_rate_q must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ParameterError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class AccountantState:
    orders: tuple = DEFAULT_ORDERS
    rdp: np.ndarray = field(default=None)
    steps: int = 0

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        if not orders or any(a <= 1 for a in orders) or any(b <= a for a, b in zip(orders, orders[1:])):
            raise ParameterError("orders must be non-empty, strictly increasing and > 1")
        object.__setattr__(self, "orders", orders)
        rdp = np.zeros(len(orders)) if self.rdp is None else np.asarray(self.rdp, dtype=np.float64)
        if rdp.shape != (len(orders),) or np.any(rdp < 0):
            raise ParameterError("rdp must hold one non-negative value per order")
        object.__setattr__(self, "rdp", rdp)


@dataclass
class GradientLot:
    member_indices: np.ndarray
    per_example_grads: list

    def __post_init__(self):
        idx = np.asarray(self.member_indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ParameterError("lot member indices must be unique")
        if len(self.per_example_grads) != len(idx):
            raise ParameterError("one gradient per lot member is required")
        self.member_indices = idx


# -- DP-SGD mechanics ---------------------------------------------------------

def clip_gradient(g, clip_norm):
    """Scale a parameter-shaped gradient so its global L2 norm is at most clip_norm."""
    if not clip_norm > 0:
        raise ParameterError("clip_norm must be positive")
    for v in g.values():
        if not np.all(np.isfinite(v)):
            raise NumericError("gradient contains non-finite values")
    norm = nn.global_norm(g)
    scale = 1.0 if norm <= clip_norm else clip_norm / norm
    return {k: v * scale for k, v in g.items()}


def clip_stacked(grads, clip_norm):
    """Clip every row of a stacked per-example gradient dict (leading axis N)."""
    n = next(iter(grads.values())).shape[0]
    sq = np.zeros(n)
    for v in grads.values():
        if not np.all(np.isfinite(v)):
            raise NumericError("gradient contains non-finite values")
        sq += np.square(v.reshape(n, -1)).sum(axis=1)
    norms = np.sqrt(sq)
    scale = np.where(norms > clip_norm, clip_norm / np.where(norms > 0, norms, 1.0), 1.0)
    return {k: v * scale.reshape((n,) + (1,) * (v.ndim - 1)) for k, v in grads.items()}, norms


def poisson_lot(n, q, rng):
    """Indices included independently with probability q (possibly empty)."""
    if n < 1:
        raise ParameterError("dataset size must be >= 1")
    if not 0 < q <= 1:
        raise ParameterError("q must lie in (0, 1]")
    return np.flatnonzero(rng.random(n) < q)


def noise_generator(seed, step):
    """Counter-based stream for the noise of one training step (Philox, key=seed)."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(step), 0]))


def dp_aggregate(grads, clip_norm, sigma, expected_lot, rng, template=None):
    """(sum of clipped grads + N(0, sigma^2 C^2 I)) / expected_lot.

    ``template`` supplies the parameter layout when the lot is empty.
    Noise is drawn tensor by tensor in parameter order.
    """
    if not expected_lot > 0:
        raise ParameterError("expected_lot must be positive")
    if template is None:
        if not grads:
            raise ParameterError("an empty lot needs a parameter template")
        template = grads[0]
    total = {k: np.zeros(np.shape(v)) for k, v in template.items()}
    for i, g in enumerate(grads):
        norm = nn.global_norm(g)
        if norm > clip_norm + CLIP_TOL:
            raise ContractViolation(f"lot member {i} has norm {norm:.6g} > clip norm {clip_norm}")
        for k in total:
            total[k] += g[k]
    std = sigma * clip_norm
    return {k: (v + std * rng.standard_normal(v.shape)) / expected_lot for k, v in total.items()}


# -- Renyi accountant -----------------------------------------------------------

def _is_integer(a):
    return float(a).is_integer()


def rdp_sampled_gaussian(q, sigma, alpha):
    """Per-step RDP of the Poisson-subsampled Gaussian mechanism at integer order alpha."""
    if not 0 < q <= 1:
        raise ParameterError("q must lie in (0, 1]")
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    if not _is_integer(alpha) or alpha < 2:
        raise ParameterError(f"closed form needs an integer order >= 2, got {alpha}")
    alpha = int(alpha)
    if q == 1.0:
        return alpha / (2.0 * sigma ** 2)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
                 + (alpha - k) * math.log1p(-q) + k * math.log(q)
                 + k * (k - 1) / (2.0 * sigma ** 2))
    m = log_terms.max()
    log_a = m + math.log(np.exp(log_terms - m).sum())
    return max(log_a, 0.0) / (alpha - 1)


def rdp_at_order(q, sigma, alpha):
    """RDP at any order > 1; fractional orders take the max over bracketing integers >= 2."""
    if _is_integer(alpha) and alpha >= 2:
        return rdp_sampled_gaussian(q, sigma, int(alpha))
    if alpha <= 1:
        raise ParameterError("orders must exceed 1")
    lo, hi = math.floor(alpha), math.ceil(alpha)
    vals = [rdp_sampled_gaussian(q, sigma, a) for a in (lo, hi) if a >= 2]
    return max(vals)


@lru_cache(maxsize=256)
def _rdp_vector(q, sigma, orders):
    return np.array([rdp_at_order(q, sigma, a) for a in orders])


def rdp_vector(q, sigma, orders=DEFAULT_ORDERS):
    return _rdp_vector(float(q), float(sigma), tuple(float(a) for a in orders)).copy()


def new_accountant(orders=DEFAULT_ORDERS):
    return AccountantState(tuple(orders))


def accountant_step(state: AccountantState, cfg: NoiseConfig, count=1):
    """Compose ``count`` more steps of cfg into the ledger (RDP adds across steps)."""
    inc = _rdp_vector(float(cfg.sample_rate_q), float(cfg.sigma), state.orders)
    return AccountantState(state.orders, state.rdp + count * inc, state.steps + count)


def rdp_to_epsilon(state: AccountantState, delta):
    """(epsilon, best order) via eps = min_a rdp(a) + ln(1/delta)/(a - 1)."""
    if not 0 < delta < 1:
        raise ParameterError("delta must lie in (0, 1)")
    orders = np.asarray(state.orders)
    eps = state.rdp + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.argmin(eps))
    return float(eps[i]), float(orders[i])


def compute_epsilon(q, sigma, steps, delta, orders=DEFAULT_ORDERS):
    state = AccountantState(tuple(orders), steps * rdp_vector(q, sigma, orders), int(steps))
    return rdp_to_epsilon(state, delta)[0]


def calibrate_sigma(target: PrivacyBudget, q, steps, orders=DEFAULT_ORDERS, lo=0.1, hi=100.0):
    """Smallest noise multiplier in [lo, hi] whose accounted epsilon is <= target."""
    if not target.epsilon > 0:
        raise ParameterError("target epsilon must be positive")
    if steps < 1:
        raise ParameterError("steps must be >= 1")

    def eps(s):
        return compute_epsilon(q, s, steps, target.delta, orders)

    if eps(hi) > target.epsilon:
        raise CalibrationError(f"epsilon={target.epsilon} unreachable with sigma in [{lo}, {hi}] "
                               f"(q={q}, steps={steps}, delta={target.delta})")
    if eps(lo) <= target.epsilon:
        return lo
    a, b = lo, hi
    while b - a > 1e-12 * b:
        mid = 0.5 * (a + b)
        if eps(mid) <= target.epsilon:
            b = mid
        else:
            a = mid
    return b


def write_audit_log(path, rows):
    """rows: iterable of (step, sigma, q, order_star, epsilon, delta)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "sigma", "q", "order_star", "epsilon", "delta"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def read_audit_log(path):
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# -- one DP-SGD step -------------------------------------------------------------

def unit_gradients(params, model_cfg, data, units, rng, loss="bce", class_weights=None):
    """Mean gradient over each privacy unit's examples, stacked on axis 0."""
    xs, ts, sizes = [], [], []
    for u in units:
        x, t = data.examples(int(u), rng)
        xs.append(x)
        ts.append(t)
        sizes.append(len(x))
    x = np.concatenate(xs)
    t = np.concatenate(ts)
    _, g = nn.batch_gradients(params, model_cfg, x, t, class_weights, loss)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    counts = np.asarray(sizes, dtype=np.float64)
    return {k: np.add.reduceat(v, starts, axis=0) / counts.reshape((-1,) + (1,) * (v.ndim - 1))
            for k, v in g.items()}


def dp_train_step(params, opt_state, cfg: NoiseConfig, data, state: AccountantState, rng,
                  model_cfg, lr=5e-4, noise_rng=None, loss="bce", class_weights=None):
    """Poisson lot -> per-unit gradients -> clip -> noisy aggregate -> NAdam.

    ``data`` exposes ``len(data)`` privacy units and ``data.examples(i, rng)``
    returning (inputs, targets) for unit i.  The accountant advances exactly
    once, including for empty lots.
    """
    if model_cfg.uses_batch_norm:
        raise ParameterError("DP training requires group normalisation; batch norm leaks across examples")
    noise_rng = rng if noise_rng is None else noise_rng
    n = len(data)
    lot = poisson_lot(n, cfg.sample_rate_q, rng)
    if len(lot):
        stacked = unit_gradients(params, model_cfg, data, lot, rng, loss, class_weights)
        clipped, _ = clip_stacked(stacked, cfg.clip_norm)
        members = [{k: v[i] for k, v in clipped.items()} for i in range(len(lot))]
    else:
        members = []
    noisy = dp_aggregate(members, cfg.clip_norm, cfg.sigma, cfg.sample_rate_q * n, noise_rng, template=params)
    new_params, new_opt = nn.nadam_step(params, noisy, opt_state, lr)
    return new_params, new_opt, accountant_step(state, cfg)
