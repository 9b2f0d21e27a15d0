import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpspeech import nn, privacy
from dpspeech.errors import (CalibrationError, ContractViolation, NumericError,
                             ParameterError)


def binomial_rdp(q, sigma, alpha):
    """Direct (linear-space) binomial expansion; fine for small alpha."""
    a = sum(math.comb(alpha, k) * (1 - q) ** (alpha - k) * q ** k * math.exp(k * (k - 1) / (2 * sigma ** 2))
            for k in range(alpha + 1))
    return math.log(a) / (alpha - 1)


# -- accountant ----------------------------------------------------------------------

def test_full_batch_reduces_to_gaussian():
    for sigma in (0.5, 1, 2, 4):
        for alpha in range(2, 65):
            assert abs(privacy.rdp_sampled_gaussian(1.0, sigma, alpha) - alpha / (2 * sigma ** 2)) < 1e-12


@pytest.mark.parametrize("q,sigma,alpha", [(0.01, 1.0, 2), (0.1, 0.8, 5), (0.0128, 0.7, 12), (0.3, 2.0, 30)])
def test_matches_direct_binomial_sum(q, sigma, alpha):
    ref = binomial_rdp(q, sigma, alpha)
    assert privacy.rdp_sampled_gaussian(q, sigma, alpha) == pytest.approx(ref, rel=1e-10)


def test_spot_value():
    assert abs(privacy.rdp_sampled_gaussian(0.01, 1.0, 2) - 1.718e-4) < 1e-7


def test_large_order_stays_finite():
    v = privacy.rdp_sampled_gaussian(0.0128, 0.3, 256)
    assert np.isfinite(v) and v > 0


def test_fractional_order_bracketing():
    lo = privacy.rdp_at_order(0.05, 1.0, 2)
    hi = privacy.rdp_at_order(0.05, 1.0, 3)
    assert privacy.rdp_at_order(0.05, 1.0, 2.5) == max(lo, hi)
    assert privacy.rdp_at_order(0.05, 1.0, 1.5) == lo
    with pytest.raises(ParameterError):
        privacy.rdp_at_order(0.05, 1.0, 1.0)
    with pytest.raises(ParameterError):
        privacy.rdp_sampled_gaussian(0.05, 1.0, 2.5)


@pytest.mark.parametrize("q,sigma", [(0.0, 1.0), (1.5, 1.0), (0.1, 0.0), (0.1, -1.0)])
def test_bad_mechanism_parameters(q, sigma):
    with pytest.raises(ParameterError):
        privacy.rdp_sampled_gaussian(q, sigma, 2)


def test_conversion_single_order():
    state = privacy.AccountantState((2.0,), np.array([1.0]))
    eps, order = privacy.rdp_to_epsilon(state, 0.001)
    assert abs(eps - 7.9078) < 1e-4
    assert eps == pytest.approx(1 + math.log(1000), abs=1e-12)
    assert order == 2.0


def test_conversion_picks_minimum_order():
    state = privacy.AccountantState((2.0, 10.0), np.array([5.0, 0.1]))
    eps, order = privacy.rdp_to_epsilon(state, 1e-3)
    assert order == 10.0 and eps == pytest.approx(0.1 + math.log(1000) / 9)


def test_accountant_composes_additively():
    cfg = privacy.NoiseConfig(1.1, 1.5, 0.02, 1e-3)
    s = privacy.new_accountant()
    for _ in range(7):
        s = privacy.accountant_step(s, cfg)
    batched = privacy.accountant_step(privacy.new_accountant(), cfg, count=7)
    assert s.steps == 7
    assert np.allclose(s.rdp, batched.rdp, rtol=1e-14)
    assert privacy.rdp_to_epsilon(s, 1e-3)[0] == pytest.approx(
        privacy.compute_epsilon(0.02, 1.1, 7, 1e-3), rel=1e-12)


def test_accountant_state_validation():
    with pytest.raises(ParameterError):
        privacy.AccountantState((3.0, 2.0))
    with pytest.raises(ParameterError):
        privacy.AccountantState((2.0,), np.array([-1.0]))
    with pytest.raises(ParameterError):
        privacy.rdp_to_epsilon(privacy.new_accountant(), 1.0)


def test_monotonicity_grid():
    ts, sigmas, qs = (100, 500, 2000), (0.7, 1.0, 2.0), (0.005, 0.0128, 0.05)
    e = np.array([[[privacy.compute_epsilon(q, s, t, 1e-3) for q in qs] for s in sigmas] for t in ts])
    assert np.all(np.diff(e, axis=0) >= 0)
    assert np.all(np.diff(e, axis=1) <= 0)
    assert np.all(np.diff(e, axis=2) >= 0)


# -- calibration ----------------------------------------------------------------------

@pytest.mark.parametrize("target", [1.0, 2.0, 8.0])
def test_calibration_round_trip(target):
    sigma = privacy.calibrate_sigma(privacy.PrivacyBudget(target, 1e-3), 0.0128, 2000)
    eps = privacy.compute_epsilon(0.0128, sigma, 2000, 1e-3)
    assert 0.999 * target <= eps <= target
    # and a slightly smaller sigma overshoots, so the result is tight
    assert privacy.compute_epsilon(0.0128, sigma * (1 - 1e-6), 2000, 1e-3) > target


def test_calibration_unreachable():
    with pytest.raises(CalibrationError):
        privacy.calibrate_sigma(privacy.PrivacyBudget(1e-6, 1e-3), 1.0, 10 ** 6)


def test_calibration_easy_target_returns_lower_bound():
    assert privacy.calibrate_sigma(privacy.PrivacyBudget(1e6, 1e-3), 0.01, 1) == 0.1


def test_budget_validation():
    with pytest.raises(ParameterError):
        privacy.PrivacyBudget(-1.0)
    with pytest.raises(ParameterError):
        privacy.PrivacyBudget(1.0, 0.0)
    with pytest.raises(ParameterError):
        privacy.calibrate_sigma(privacy.PrivacyBudget(0.0), 0.1, 10)


# -- clipping and aggregation --------------------------------------------------------------

def test_clip_invariant_many_gradients():
    rng = np.random.default_rng(0)
    scales = 10.0 ** rng.uniform(-4, 4, size=100_000)
    g = {"a": rng.standard_normal((100_000, 7)) * scales[:, None],
         "b": rng.standard_normal((100_000, 2, 3)) * scales[:, None, None]}
    clipped, norms = privacy.clip_stacked(g, 1.5)
    flat = np.concatenate([clipped["a"], clipped["b"].reshape(100_000, -1)], axis=1)
    post = np.linalg.norm(flat, axis=1)
    assert np.all(post <= 1.5 + 1e-9)
    small = norms <= 1.5
    assert np.array_equal(clipped["a"][small], g["a"][small])


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e6), st.floats(0.1, 10.0))
def test_clip_gradient_scales_only_when_needed(scale, c):
    g = {"w": np.array([3.0, 4.0]) * scale}
    out = privacy.clip_gradient(g, c)
    n = 5.0 * scale
    assert nn.global_norm(out) <= c + 1e-9
    if n <= c:
        assert np.array_equal(out["w"], g["w"])
    else:
        assert nn.global_norm(out) == pytest.approx(c, rel=1e-12)
        assert np.allclose(out["w"] / np.linalg.norm(out["w"]), [0.6, 0.8])


def test_clip_rejects_non_finite():
    with pytest.raises(NumericError):
        privacy.clip_gradient({"w": np.array([np.inf])}, 1.0)
    with pytest.raises(NumericError):
        privacy.clip_stacked({"w": np.array([[np.nan]])}, 1.0)
    with pytest.raises(ParameterError):
        privacy.clip_gradient({"w": np.ones(2)}, 0.0)


def test_aggregate_rejects_unclipped_member():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractViolation):
        privacy.dp_aggregate([{"w": np.array([2.0, 0.0])}], 1.5, 1.0, 1.0, rng)


def test_aggregate_empty_lot_is_pure_noise():
    rng = np.random.default_rng(3)
    out = privacy.dp_aggregate([], 1.5, 2.0, 10.0, rng, template={"w": np.zeros(200_000)})
    assert out["w"].std() == pytest.approx(2.0 * 1.5 / 10.0, rel=0.01)
    with pytest.raises(ParameterError):
        privacy.dp_aggregate([], 1.5, 2.0, 10.0, rng)


def test_aggregate_mean_and_spread():
    grads = [{"w": np.full(50_000, 0.001)} for _ in range(4)]
    out = privacy.dp_aggregate(grads, 1.5, 0.5, 8.0, np.random.default_rng(1))
    assert out["w"].mean() == pytest.approx(0.004 / 8.0, abs=3 * 0.75 / 8 / math.sqrt(50_000))
    assert out["w"].std() == pytest.approx(0.5 * 1.5 / 8.0, rel=0.02)


def test_noise_generator_is_counter_based():
    a = privacy.noise_generator(11, 5).standard_normal(4)
    privacy.noise_generator(11, 4).standard_normal(100)
    b = privacy.noise_generator(11, 5).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, privacy.noise_generator(11, 6).standard_normal(4))
    assert not np.array_equal(a, privacy.noise_generator(12, 5).standard_normal(4))


def test_poisson_lot_rate():
    rng = np.random.default_rng(2)
    sizes = [len(privacy.poisson_lot(1000, 0.03, rng)) for _ in range(400)]
    assert np.mean(sizes) == pytest.approx(30, rel=0.05)
    lot = privacy.poisson_lot(50, 1.0, rng)
    assert lot.tolist() == list(range(50))
    with pytest.raises(ParameterError):
        privacy.poisson_lot(0, 0.1, rng)


# -- one training step ------------------------------------------------------------------

class Units:
    """A toy dataset: unit i owns k_i constant-valued examples of one class."""

    def __init__(self, cfg, n, rng):
        self.cfg = cfg
        self.x = [rng.standard_normal((int(rng.integers(1, 4)),) + cfg.input_shape) for _ in range(n)]
        self.y = rng.integers(0, cfg.n_classes, n)

    def __len__(self):
        return len(self.x)

    def examples(self, i, rng):
        x = self.x[i]
        return x, np.tile(np.eye(self.cfg.n_classes)[self.y[i]], (len(x), 1))


def toy():
    rng = np.random.default_rng(5)
    cfg = nn.ModelConfig((1, 6, 6), (nn.ConvBlock(2, 3, 1),), 3, 1)
    return cfg, nn.init_params(cfg), Units(cfg, 12, rng)


def test_unit_gradient_is_mean_over_examples():
    cfg, p, data = toy()
    g = privacy.unit_gradients(p, cfg, data, [3, 7], None)
    for row, u in enumerate([3, 7]):
        x, t = data.examples(u, None)
        _, ref = nn.mean_gradient(p, cfg, x, t)
        for k in ref:
            assert np.allclose(g[k][row], ref[k], atol=1e-13)


def test_dp_step_is_deterministic_and_accounts_once():
    cfg, p, data = toy()
    nc = privacy.NoiseConfig(1.0, 1.5, 0.25, 1e-3)
    runs = []
    for _ in range(2):
        out = privacy.dp_train_step(p, nn.init_state(p), nc, data, privacy.new_accountant(),
                                    np.random.default_rng(9), cfg, 1e-3, privacy.noise_generator(4, 0))
        runs.append(out)
    assert nn.fingerprint(runs[0][0]) == nn.fingerprint(runs[1][0])
    assert runs[0][2].steps == 1 and runs[0][1].step == 1


def test_dp_step_with_empty_lot_still_advances():
    cfg, p, data = toy()
    nc = privacy.NoiseConfig(1.0, 1.5, 1e-9, 1e-3)
    new_p, opt, acct = privacy.dp_train_step(p, nn.init_state(p), nc, data, privacy.new_accountant(),
                                             np.random.default_rng(0), cfg, 1e-3)
    assert acct.steps == 1 and opt.step == 1
    assert nn.fingerprint(new_p) != nn.fingerprint(p)


def test_dp_step_refuses_batch_norm():
    cfg = nn.ModelConfig((1, 6, 6), (nn.ConvBlock(2, 3, 1, "batch"),), 3, 1)
    with pytest.raises(ParameterError):
        privacy.dp_train_step({}, None, privacy.NoiseConfig(1.0), [], privacy.new_accountant(),
                              np.random.default_rng(0), cfg)


def test_single_unit_sensitivity_is_bounded():
    # neighbouring lots differ by one unit; the noiseless sums differ by at most C
    cfg, p, data = toy()
    stacked = privacy.unit_gradients(p, cfg, data, range(len(data)), None)
    big = {k: v * 1e3 for k, v in stacked.items()}
    clipped, _ = privacy.clip_stacked(big, 1.5)
    members = [{k: v[i] for k, v in clipped.items()} for i in range(len(data))]
    zero = np.random.default_rng(0)
    full = privacy.dp_aggregate(members, 1.5, 1e-300, 1.0, zero)
    for drop in range(len(data)):
        rest = members[:drop] + members[drop + 1:]
        part = privacy.dp_aggregate(rest, 1.5, 1e-300, 1.0, zero, template=p)
        diff = {k: full[k] - part[k] for k in full}
        assert nn.global_norm(diff) <= 1.5 + 1e-9


def test_audit_log_round_trip(tmp_path):
    rows = [(1, 0.9, 0.0128, 12.0, 0.5, 1e-3), (2, 0.9, 0.0128, 11.0, 0.71, 1e-3)]
    privacy.write_audit_log(tmp_path / "a.csv", rows)
    back = privacy.read_audit_log(tmp_path / "a.csv")
    assert back[1] == {"step": 2, "sigma": 0.9, "q": 0.0128, "order_star": 11.0, "epsilon": 0.71, "delta": 1e-3}
