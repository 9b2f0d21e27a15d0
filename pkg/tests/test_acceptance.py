"""Acceptance criteria, one test each, with a PASS/FAIL line printed per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s`` to see the lines
interleaved with pytest's own output.  Runtime budgets are asserted too.
"""
import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from dpspeech import attack, cli, dsp, evaluation as ev, nn, privacy, synth
from dpspeech.pipeline import model_input

from oracles import (batch_mean_gradient, brute_auroc, brute_wilcoxon_p, fd_param_gradient,
                     random_small_config, randomize, relative_error, smooth_point)


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(number, title, budget_s):
        start = time.perf_counter()
        ok, detail, notes = False, "", []
        try:
            yield notes
            ok = True
        except AssertionError as exc:
            detail = str(exc).splitlines()[0] if str(exc) else "assertion failed"
            raise
        finally:
            elapsed = time.perf_counter() - start
            slow = elapsed >= budget_s
            verdict = "PASS" if ok and not slow else "FAIL"
            note = " [over budget]" if slow else (f" [{detail}]" if detail else "")
            with capsys.disabled():
                print(f"\ncriterion {number:2d} {verdict}  {title}  ({elapsed:.1f}s / {budget_s:g}s){note}")
                for line in notes:
                    print(f"    {line}")
        assert elapsed < budget_s, f"criterion {number} took {elapsed:.1f}s, budget {budget_s}s"
    return run


# -- accountant ------------------------------------------------------------------------

def test_criterion_01_full_batch_reduction(criterion):
    with criterion(1, "accountant reduces to alpha/(2 sigma^2) at q=1", 1):
        worst = max(abs(privacy.rdp_sampled_gaussian(1.0, s, a) - a / (2 * s * s))
                    for s in (0.5, 1, 2, 4) for a in range(2, 65))
        assert worst < 1e-12, worst


def test_criterion_02_spot_value(criterion):
    with criterion(2, "rdp(q=0.01, sigma=1, alpha=2) = 1.718e-4", 1):
        v = privacy.rdp_sampled_gaussian(0.01, 1.0, 2)
        assert abs(v - 1.718e-4) < 1e-7, v


def test_criterion_03_conversion(criterion):
    with criterion(3, "single order conversion gives 1 + ln 1000", 1):
        eps, _ = privacy.rdp_to_epsilon(privacy.AccountantState((2.0,), np.array([1.0]), 1), 1e-3)
        assert abs(eps - 7.9078) < 1e-4, eps


def test_criterion_04_calibration(criterion):
    with criterion(4, "calibrated sigma lands within [0.999 eps*, eps*]", 10):
        for target in (1.0, 2.0, 8.0):
            s = privacy.calibrate_sigma(privacy.PrivacyBudget(target, 1e-3), 0.0128, 2000)
            eps = privacy.compute_epsilon(0.0128, s, 2000, 1e-3)
            assert 0.999 * target <= eps <= target, (target, eps)


def test_criterion_05_clipping(criterion):
    with criterion(5, "clipped norms never exceed C over 1e5 gradients", 10):
        rng = np.random.default_rng(5)
        n = 100_000
        scale = 10.0 ** rng.uniform(-3, 3, n)
        g = {"w": rng.standard_normal((n, 5, 3)) * scale[:, None, None],
             "b": rng.standard_normal((n, 4)) * scale[:, None]}
        clipped, _ = privacy.clip_stacked(g, 1.5)
        norms = np.sqrt((clipped["w"].reshape(n, -1) ** 2).sum(1) + (clipped["b"] ** 2).sum(1))
        assert norms.max() <= 1.5 + 1e-9, norms.max()


# -- model -----------------------------------------------------------------------------

def test_criterion_06_gradient_check(criterion):
    with criterion(6, "analytic vs central-difference gradients on 100 models", 120) as notes:
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(100):
            cfg = random_small_config(rng)
            p = randomize(nn.init_params(cfg), rng)
            x = smooth_point(p, cfg, rng)
            y = (rng.random(cfg.n_classes) < 0.5).astype(float)
            logits, cache = nn.model_forward(p, cfg, x)
            _, gl = nn.sigmoid_bce_loss(logits, y)
            g, _ = nn.model_backward(p, cfg, cache, gl)
            worst = max(worst, relative_error(g, fd_param_gradient(p, cfg, x, y)))
        notes.append(f"worst relative error {worst:.2e}")
        assert worst < 1e-4, worst


def test_criterion_07_per_example_consistency(criterion):
    with criterion(7, "mean of per-example gradients equals full-batch gradient", 30) as notes:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            cfg = random_small_config(rng)
            p = randomize(nn.init_params(cfg), rng)
            n = int(rng.integers(2, 17))
            x = rng.standard_normal((n,) + cfg.input_shape)
            t = (rng.random((n, cfg.n_classes)) < 0.5).astype(float)
            per = nn.per_example_gradients(p, cfg, list(zip(x, t)))
            full = batch_mean_gradient(p, cfg, x, t)
            for k in full:
                worst = max(worst, float(np.abs(np.mean([g[k] for g in per], axis=0) - full[k]).max()))
        notes.append(f"worst absolute difference {worst:.2e}")
        assert worst < 1e-9, worst


# -- end-to-end experiment ------------------------------------------------------------------

COHORT = {"n_speakers": 200, "classes": ["healthy", "dysarthria", "dysphonia", "aphasia"],
          "utterances_per_speaker": 4, "utterance_seconds": 3.0, "master_seed": 2024}
NON_DP = {"lr": 3e-3, "epochs": 3, "batch_speakers": 16}
DP = {"lr": 3e-3, "epochs": 10, "batch_speakers": 35, "epsilon": 8.0, "delta": 1e-3}


def end_to_end(root):
    """synth -> train (non-DP and DP) -> evaluate through the command line."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "cohort.json").write_text(json.dumps(COHORT))
    assert cli.main(["synth", "--config", str(root / "cohort.json"), "--out", str(root / "data")]) == 0
    for name, training in (("non_dp", NON_DP), ("dp", DP)):
        cfg = {"manifest": "data/manifest.csv", "mode": name, "master_seed": 7, "training": training}
        path = root / f"{name}.json"
        path.write_text(json.dumps(cfg))
        assert cli.main(["train", "--config", str(path), "--out", str(root / f"run_{name}")]) == 0
        assert cli.main(["evaluate", "--run", str(root / f"run_{name}"), "--out", str(root / f"eval_{name}")]) == 0
    return root


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    start = time.perf_counter()
    root = end_to_end(tmp_path_factory.mktemp("e2e") / "first")
    return root, time.perf_counter() - start


def _top1(root, name):
    rep = json.loads((root / f"eval_{name}" / "report.json").read_text())
    return rep["overall"]["top1_accuracy"]["mean"]


def test_criterion_08_privacy_utility(experiment, criterion):
    root, elapsed = experiment
    with criterion(8, "synthetic trade-off: non-DP >= 95%, DP within 10 pp and above chance", 1800) as notes:
        notes.append(f"synth, train and evaluate took {elapsed:.1f}s in the session fixture")
        assert elapsed < 1800, f"end-to-end run took {elapsed:.0f}s"
        acc_np, acc_dp = _top1(root, "non_dp"), _top1(root, "dp")
        rec = json.loads((root / "run_dp" / "run.json").read_text())
        notes.append(f"non-DP top-1 {acc_np:.4f}, DP top-1 {acc_dp:.4f} at epsilon {rec['epsilon']:.4f} "
                     f"(sigma {rec['sigma']:.4f}, {rec['steps']} steps)")
        assert rec["epsilon"] <= 8.0 and rec["delta"] == 1e-3
        assert acc_np >= 0.95, acc_np
        assert acc_np - acc_dp <= 0.10, (acc_np, acc_dp)
        assert acc_dp > 0.25, acc_dp


# -- attack -----------------------------------------------------------------------------

def test_criterion_09_attack_separation(criterion):
    with criterion(9, "median SNR gap raw vs DP reconstruction >= 10 dB (20 pairs)", 1200) as notes:
        spec = synth.CohortSpec(n_speakers=20, classes={"a": .25, "b": .25, "c": .25, "d": .25},
                                utterances_per_speaker=1, master_seed=9)
        sigma = privacy.calibrate_sigma(privacy.PrivacyBudget(8.0, 1e-3), 0.0128, 2000)
        raw, dp = [], []
        for i, spk in enumerate(synth.generate_cohort(spec)):
            x = model_input(dsp.extract_features(synth.render_utterance(spk, 0, spec)).values, 0)
            cfg = attack.victim_config(seed=i)
            p = nn.init_params(cfg)
            clear = attack.leak_gradient(p, cfg, x, spk.class_index)
            noisy = attack.leak_gradient(p, cfg, x, spk.class_index, sigma=sigma,
                                         rng=privacy.noise_generator(i, 0))
            raw.append(attack.lbfgs_reconstruct(clear, p, 100, 0.1, np.random.default_rng(i), reference=x).snr_db)
            dp.append(attack.lbfgs_reconstruct(noisy, p, 100, 0.1, np.random.default_rng(i), reference=x).snr_db)
        gap = float(np.median(raw) - np.median(dp))
        notes.append(f"median SNR raw {np.median(raw):.2f} dB, DP {np.median(dp):.2f} dB (sigma {sigma:.4f})")
        assert gap >= 10.0, gap


def test_criterion_10_label_extraction(criterion):
    with criterion(10, "iDLG recovers 100/100 labels", 60):
        rng = np.random.default_rng(10)
        hits = 0
        for i in range(100):
            k = int(rng.integers(2, 9))
            cfg = attack.victim_config(n_classes=k, seed=i)
            y = int(rng.integers(0, k))
            leak = attack.leak_gradient(nn.init_params(cfg), cfg, rng.standard_normal(cfg.input_shape), y)
            hits += attack.extract_label_idlg(leak.param_grads["head.bias"]) == y
        assert hits == 100, hits


# -- evaluation -------------------------------------------------------------------------------

def test_criterion_11_fairness_arithmetic(criterion):
    with criterion(11, "PtD golden values +1.02 and +6.51", 1):
        assert f"{ev.statistical_parity_difference(99.58, 98.56):+.2f}" == "+1.02"
        assert f"{ev.statistical_parity_difference(89.09, 82.58):+.2f}" == "+6.51"


def test_criterion_12_auroc_oracle(criterion):
    with criterion(12, "AUROC equals O(n^2) pair counting on 1000 instances", 10):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            n = int(rng.integers(2, 21))
            labels = rng.integers(0, 2, n)
            labels[rng.choice(n, 2, replace=False)] = [0, 1]
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))
            assert ev.auroc(scores, labels) == brute_auroc(scores, labels)


def test_criterion_13_wilcoxon(criterion):
    with criterion(13, "exact Wilcoxon p matches 2^n enumeration; worked case 0.0625", 30):
        rng = np.random.default_rng(13)
        for _ in range(200):
            n = int(rng.integers(5, 11))
            d = rng.choice([-3, -2, -1, -0.5, 0.5, 1, 2, 3, 4], n)
            _, p = ev.wilcoxon_signed_rank([(v, 0.0) for v in d])
            assert abs(p - brute_wilcoxon_p(d)[1]) < 1e-12
        w, p = ev.wilcoxon_signed_rank([(v, 0) for v in (1, 2, 3, 4, 5)])
        assert w == 15 and abs(p - 0.0625) < 1e-15, p


def test_criterion_14_monotonicity(criterion):
    with criterion(14, "epsilon monotone in T, sigma and q over a 3x3x3 grid", 10):
        ts, sigmas, qs = (200, 1000, 4000), (0.6, 1.0, 3.0), (0.004, 0.0128, 0.04)
        e = np.array([[[privacy.compute_epsilon(q, s, t, 1e-3) for q in qs] for s in sigmas] for t in ts])
        assert np.all(np.diff(e, axis=0) >= 0)
        assert np.all(np.diff(e, axis=1) <= 0)
        assert np.all(np.diff(e, axis=2) >= 0)


# -- determinism -----------------------------------------------------------------------------

def test_criterion_15_determinism(experiment, criterion, tmp_path_factory):
    first, elapsed = experiment
    with criterion(15, "repeat end-to-end run is byte-identical", 2 * 1800):
        second = end_to_end(tmp_path_factory.mktemp("e2e") / "second")
        for name in ("non_dp", "dp"):
            for rel in (f"run_{name}/checkpoint.dpsm", f"run_{name}/losses.csv",
                        f"eval_{name}/metrics.csv", f"eval_{name}/fairness.csv", f"eval_{name}/scores.csv"):
                assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel
        assert (first / "run_dp/accountant.csv").read_bytes() == (second / "run_dp/accountant.csv").read_bytes()
        assert math.isfinite(elapsed)
