import json

import numpy as np
import pytest

from dpspeech import attack, dsp, nn, privacy, synth
from dpspeech.errors import ParameterError
from dpspeech.pipeline import model_input


@pytest.fixture(scope="module")
def sample():
    s = synth.CohortSpec(n_speakers=8, classes={"a": .25, "b": .25, "c": .25, "d": .25},
                         utterances_per_speaker=1, master_seed=0)
    spk = synth.generate_cohort(s)[1]
    x = model_input(dsp.extract_features(synth.render_utterance(spk, 0, s)).values, 0)
    cfg = attack.victim_config()
    return cfg, nn.init_params(cfg), x, spk.class_index


def small_victim(seed=0, n_classes=4):
    cfg = attack.victim_config((1, 8, 12), n_classes, 3, seed)
    return cfg, nn.init_params(cfg)


# -- label extraction -------------------------------------------------------------------

def test_bias_gradient_worked_case():
    p = np.array([0.2, 0.5, 0.3])
    assert attack.extract_label_idlg(p - np.eye(3)[0]) == 0


def test_extraction_failure_is_a_signal():
    assert attack.extract_label_idlg(np.array([-0.1, -0.2, 0.3])) is None
    assert attack.extract_label_idlg(np.array([0.1, 0.2])) is None


def test_sign_property_over_random_models():
    rng = np.random.default_rng(0)
    for i in range(1000):
        k = int(rng.integers(2, 6))
        cfg, p = small_victim(i, k)
        y = int(rng.integers(0, k))
        leak = attack.leak_gradient(p, cfg, rng.standard_normal(cfg.input_shape) * 3, y)
        b = leak.param_grads["head.bias"]
        assert np.sum(b < 0) == 1 and attack.extract_label_idlg(b) == y


def test_noised_gradients_mostly_defeat_extraction():
    cfg, p = small_victim()
    rng = np.random.default_rng(1)
    fails = 0
    for t in range(100):
        leak = attack.leak_gradient(p, cfg, rng.standard_normal(cfg.input_shape), t % 4, sigma=1.0,
                                    rng=privacy.noise_generator(3, t))
        fails += attack.extract_label_idlg(leak.param_grads["head.bias"]) is None
    assert fails > 50


def test_dp_leak_needs_rng():
    cfg, p = small_victim()
    with pytest.raises(ParameterError):
        attack.leak_gradient(p, cfg, np.zeros(cfg.input_shape), 0, sigma=1.0)


# -- matching loss ------------------------------------------------------------------------

def test_matching_loss_examples():
    cfg, p = small_victim()
    rng = np.random.default_rng(2)
    g = attack.leak_gradient(p, cfg, rng.standard_normal(cfg.input_shape), 1)
    assert attack.gradient_matching_loss(g.param_grads, g) == 0.0
    bumped = {k: v.copy() for k, v in g.param_grads.items()}
    bumped["head.bias"][2] += 1.0
    assert attack.gradient_matching_loss(bumped, g) == pytest.approx(1.0, abs=1e-12)
    other = attack.leak_gradient(p, cfg, rng.standard_normal(cfg.input_shape), 3).param_grads
    naive = 0.0
    for k in other:
        for a, b in zip(other[k].ravel(), g.param_grads[k].ravel()):
            naive += (a - b) ** 2
    assert abs(attack.gradient_matching_loss(other, g) - naive) < 1e-12


def test_matching_loss_shape_mismatch():
    cfg, p = small_victim()
    g = attack.leak_gradient(p, cfg, np.zeros(cfg.input_shape), 0)
    bad = dict(g.param_grads)
    bad["head.bias"] = np.zeros(5)
    with pytest.raises(ParameterError):
        attack.gradient_matching_loss(bad, g)


def test_matching_objective_gradient_matches_fd():
    cfg, p = small_victim()
    rng = np.random.default_rng(4)
    leak = attack.leak_gradient(p, cfg, rng.standard_normal(cfg.input_shape), 2)
    fg = attack.matching_objective(p, cfg, leak, 2)
    x = rng.standard_normal(cfg.input_shape)
    _, g = fg(x)
    for idx in [(0, 0, 0), (0, 4, 5), (0, 7, 11)]:
        e = np.zeros_like(x)
        e[idx] = 1e-6
        fd = (fg(x + e)[0] - fg(x - e)[0]) / 2e-6
        assert fd == pytest.approx(g[idx], rel=1e-4, abs=1e-9)


# -- L-BFGS -------------------------------------------------------------------------------

def test_lbfgs_on_rosenbrock():
    def fg(x):
        a, b = x
        f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        return f, np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])

    res = attack.lbfgs_minimize(fg, np.array([-1.2, 1.0]), iters=200, lr=1.0)
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_lbfgs_flags_line_search_failure():
    calls = {"n": 0}

    def fg(x):  # the reported gradient points uphill, so no step can decrease f
        calls["n"] += 1
        return float(x @ x), -2 * x

    res = attack.lbfgs_minimize(fg, np.ones(3), iters=10)
    assert res.line_search_failed and res.iterations == 0
    assert np.array_equal(res.x, np.ones(3))


def test_zero_iterations_returns_seeded_init():
    cfg, p = small_victim()
    leak = attack.leak_gradient(p, cfg, np.ones(cfg.input_shape), 0)
    res = attack.lbfgs_reconstruct(leak, p, iters=0, rng=np.random.default_rng(9))
    assert np.array_equal(res.recovered_input, np.random.default_rng(9).standard_normal(cfg.input_shape))
    assert res.iterations == 0


def test_reconstruction_is_deterministic_and_monotone():
    cfg, p = small_victim()
    x = np.random.default_rng(5).standard_normal(cfg.input_shape)
    leak = attack.leak_gradient(p, cfg, x, 1)
    a = attack.lbfgs_reconstruct(leak, p, iters=30, rng=np.random.default_rng(0), reference=x)
    b = attack.lbfgs_reconstruct(leak, p, iters=30, rng=np.random.default_rng(0), reference=x)
    assert np.array_equal(a.recovered_input, b.recovered_input)
    assert all(v2 <= v1 for v1, v2 in zip(a.loss_history, a.loss_history[1:]))
    assert a.final_match_loss >= 0 and np.all(np.isfinite(a.recovered_input))


def test_joint_label_search_when_extraction_fails():
    cfg, p = small_victim()
    x = np.random.default_rng(6).standard_normal(cfg.input_shape)
    leak = attack.leak_gradient(p, cfg, x, 3)
    leak.param_grads["head.bias"] = np.abs(leak.param_grads["head.bias"])  # hide the sign
    res = attack.lbfgs_reconstruct(leak, p, iters=5, rng=np.random.default_rng(0))
    assert not res.label_extracted and 0 <= res.inferred_label < 4


def test_known_sample_is_recovered(sample):
    cfg, p, x, y = sample
    leak = attack.leak_gradient(p, cfg, x, y)
    res = attack.lbfgs_reconstruct(leak, p, iters=600, rng=np.random.default_rng(0), reference=x)
    assert res.inferred_label == y
    assert res.final_match_loss < 1e-4
    assert res.snr_db >= 10.0


def test_dp_leak_degrades_reconstruction(sample):
    cfg, p, x, y = sample
    sigma = privacy.calibrate_sigma(privacy.PrivacyBudget(8.0, 1e-3), 0.0128, 2000)
    raw = attack.lbfgs_reconstruct(attack.leak_gradient(p, cfg, x, y), p, iters=100,
                                   rng=np.random.default_rng(0), reference=x)
    leak = attack.leak_gradient(p, cfg, x, y, sigma=sigma, rng=privacy.noise_generator(0, 0))
    dp = attack.lbfgs_reconstruct(leak, p, iters=100, rng=np.random.default_rng(0), reference=x)
    assert raw.snr_db - dp.snr_db >= 10.0


# -- scores ---------------------------------------------------------------------------------

def test_snr_examples():
    r = np.random.default_rng(0).standard_normal((4, 5))
    assert attack.snr_db(r, r) == 120.0
    assert attack.snr_db(r, np.zeros_like(r)) == pytest.approx(0.0, abs=1e-12)
    assert attack.snr_db(r, -r) == pytest.approx(-6.0206, abs=1e-4)
    with pytest.raises(ParameterError):
        attack.snr_db(np.zeros(3), np.ones(3))
    with pytest.raises(ParameterError):
        attack.snr_db(np.ones(3), np.ones(4))


def test_lsd_examples():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((6, 9))
    assert attack.log_spectral_distance(a, a) == 0.0
    assert attack.log_spectral_distance(a, a + 2.5) == pytest.approx(2.5, abs=1e-12)
    b = rng.standard_normal((6, 9))
    naive = 0.0
    for j in range(9):
        naive += np.sqrt(sum((a[i, j] - b[i, j]) ** 2 for i in range(6)) / 6)
    assert abs(attack.log_spectral_distance(dsp.LogMelSpectrogram(a), b) - naive / 9) < 1e-12
    with pytest.raises(ParameterError):
        attack.log_spectral_distance(a, b[:, :3])


def test_report_fields(tmp_path):
    cfg, p = small_victim()
    x = np.ones(cfg.input_shape)
    leak = attack.leak_gradient(p, cfg, x, 0)
    res = attack.lbfgs_reconstruct(leak, p, iters=2, rng=np.random.default_rng(0), reference=x)
    rep = attack.attack_report(res, leak, 0)
    assert set(rep) >= {"victim_config_hash", "dp_applied", "sigma", "seed", "final_match_loss",
                        "snr_db", "lsd", "iterations"}
    json.dumps(rep)
    attack.write_matrix_csv(tmp_path / "m.csv", res.recovered_input[0])
    assert np.loadtxt(tmp_path / "m.csv", delimiter=",", skiprows=1).shape == (8, 12)
