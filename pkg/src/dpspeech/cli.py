"""Command-line entry points: synth, train, evaluate, attack, report.

Exit codes: 0 success, 2 configuration error, 3 refusal to overwrite an
existing output directory, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attack, evaluation, nn, pipeline, privacy, reporting, synth
from .config import ExperimentConfig, load_config, parse_config
from .errors import DPSpeechError, ParameterError, SpecError

EXIT_OK, EXIT_CONFIG, EXIT_OVERWRITE, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("dpspeech")


class OverwriteRefused(Exception):
    pass


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise OverwriteRefused(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _timing(out, started):
    reporting.dump_json(out / "timing.json", {"wall_clock_s": round(time.perf_counter() - started, 3)})


def _apply_overrides(cfg: ExperimentConfig, args):
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = int(args.seed)
    training = dict(cfg.training)
    if getattr(args, "epsilon", None) is not None:
        training.update(epsilon=float(args.epsilon), sigma=None)
        cfg.mode = "dp"
    if getattr(args, "sigma", None) is not None:
        training.update(sigma=float(args.sigma), epsilon=None)
        cfg.mode = "dp"
    if getattr(args, "delta", None) is not None:
        training["delta"] = float(args.delta)
    cfg.training = {k: v for k, v in training.items() if v is not None}
    if getattr(args, "repeats", None) is not None:
        cfg.evaluation = replace(cfg.evaluation, repeats=int(args.repeats))
    cfg.settings()
    return cfg


# -- commands ---------------------------------------------------------------------

def cmd_synth(args):
    started = time.perf_counter()
    spec = synth.CohortSpec.load(args.config)
    if args.seed is not None:
        spec = replace(spec, master_seed=int(args.seed))
    out = _prepare_out(args.out, args.force)
    cohort = synth.generate_cohort(spec)
    manifest = synth.export_manifest(cohort, spec, out)
    log.info("wrote %d speakers to %s", len(cohort), manifest)
    _timing(out, started)


def _split(cfg, store):
    return evaluation.speaker_split(store.speaker_classes(), cfg.split.train_frac, cfg.seeds()["split"])


def cmd_train(args):
    started = time.perf_counter()
    cfg = _apply_overrides(load_config(args.config), args)
    settings = cfg.settings()
    store = pipeline.FeatureStore(cfg.manifest_path())
    out = _prepare_out(args.out, args.force)
    train_ids, test_ids = _split(cfg, store)
    model_cfg = cfg.model_config(len(store.class_ids))
    data = pipeline.SpeakerDataset(store, train_ids, settings.utterances, cfg.model.n_frames)
    seeds = cfg.seeds()
    log.info("training %s on %d speakers", cfg.mode, len(train_ids))
    if cfg.mode == "dp":
        result = pipeline.train_dp(data, model_cfg, settings, seeds["train"], seeds["noise"])
        privacy.write_audit_log(out / "accountant.csv", result.audit_rows)
    else:
        result = pipeline.train_non_dp(data, model_cfg, settings, seeds["train"])
    nn.save_checkpoint(out / "checkpoint.dpsm", result.params)
    reporting.write_csv(out / "losses.csv", ("epoch", "loss"), result.loss_rows)
    record = {
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "manifest": str(cfg.manifest_path().resolve()),
        "mode": cfg.mode,
        "model": model_cfg.to_dict(),
        "classes": store.class_ids,
        "checkpoint": "checkpoint.dpsm",
        "losses": "losses.csv",
        "accountant_log": "accountant.csv" if cfg.mode == "dp" else None,
        "sigma": result.sigma,
        "epsilon": result.epsilon,
        "delta": settings.delta if cfg.mode == "dp" else None,
        "steps": result.steps,
        "seeds": seeds,
        "train_ids": train_ids,
        "test_ids": test_ids,
    }
    reporting.dump_json(out / "run.json", record)
    _timing(out, started)
    if result.epsilon is not None:
        log.info("final epsilon %.4f at delta %g", result.epsilon, settings.delta)


def cmd_evaluate(args):
    started = time.perf_counter()
    run_dir = Path(args.run)
    try:
        record = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SpecError(f"{run_dir}: not a training run (run.json missing)") from exc
    if args.split == "train":
        raise SpecError("refusing to evaluate a run on its own training split")
    cfg = _apply_overrides(load_config_dict(record), args)
    store = pipeline.FeatureStore(record["manifest"])
    train_ids, test_ids = _split(cfg, store)
    if train_ids != record["train_ids"] or test_ids != record["test_ids"]:
        raise SpecError("test split derived from the split seed does not match the run record")
    if set(test_ids) & set(record["train_ids"]):
        raise SpecError("test speakers overlap the training split")
    out = _prepare_out(args.out, args.force)
    model_cfg = nn.ModelConfig.from_dict(record["model"])
    params = nn.load_checkpoint(run_dir / record["checkpoint"])
    nn.check_params(params, model_cfg)
    classes = record["classes"]
    repeats = cfg.evaluation.repeats
    preds, hashes = pipeline.evaluate_repeats(params, model_cfg, store, test_ids, repeats,
                                              cfg.seeds()["crop"])
    pairs = [tuple(p) for p in cfg.evaluation.pairs]
    metric_rows, fair_rows, top1, score_rows = [], [], [], []
    for pred in preds:
        rows, acc = evaluation.repeat_metrics(pred, classes)
        for r in rows:
            metric_rows.append({"repeat": pred.repeat_id, **r})
        for f in evaluation.fairness_rows(rows, pairs):
            fair_rows.append({"repeat": pred.repeat_id, **f})
        top1.append(acc)
        for sid, s, y in zip(pred.speaker_ids, pred.scores, pred.labels):
            score_rows.append([pred.repeat_id, sid, int(y)] + [float(v) for v in s])
    reporting.write_csv(out / "scores.csv", ["repeat", "speaker_id", "true_class"] +
                        [f"score_{c}" for c in classes], score_rows)
    reporting.write_csv(out / "metrics.csv", reporting.METRIC_COLUMNS, metric_rows)
    reporting.write_csv(out / "fairness.csv", reporting.FAIRNESS_COLUMNS, fair_rows)
    reporting.write_csv(out / "crops.csv", ("repeat", "crop_hash"), list(enumerate(hashes)))
    report = reporting.build_fairness_report(metric_rows, fair_rows, top1, classes, record["epsilon"])
    reporting.dump_json(out / "report.json", reporting.report_to_dict(report))
    reporting.write_csv(out / "flat.csv", reporting.FLAT_COLUMNS, reporting.flat_rows(report))
    _timing(out, started)
    log.info("top-1 accuracy %.4f over %d repeats", float(np.mean(top1)), repeats)


def load_config_dict(record):
    data = dict(record["config"])
    data["manifest"] = record["manifest"]
    return parse_config(data)


def cmd_attack(args):
    started = time.perf_counter()
    cfg = _apply_overrides(load_config(args.config), args)
    settings = cfg.settings()
    store = pipeline.FeatureStore(cfg.manifest_path())
    sid, _, utt = args.sample.partition(":")
    if sid not in store.speakers:
        raise SpecError(f"sample {args.sample!r}: unknown speaker id")
    feats = store.features(sid)
    u = int(utt) if utt else 0
    if not 0 <= u < len(feats):
        raise SpecError(f"sample {args.sample!r}: utterance index out of range")
    out = _prepare_out(args.out, args.force)
    seeds = cfg.seeds()
    a = cfg.attack
    victim = attack.victim_config((1, 80, cfg.model.n_frames), len(store.class_ids), a.channels, seeds["init"])
    params = nn.init_params(victim)
    x = pipeline.model_input(feats[u], 0, cfg.model.n_frames)
    label = store.speakers[sid].class_index
    if args.mode == "dp":
        if settings.sigma is not None:
            sigma = settings.sigma
        else:
            eps = settings.epsilon if settings.epsilon is not None else 8.0
            sigma = privacy.calibrate_sigma(privacy.PrivacyBudget(eps, settings.delta), a.lot_q, a.steps)
        leak = attack.leak_gradient(params, victim, x, label, sigma, a.clip_norm,
                                    privacy.noise_generator(seeds["noise"], 0))
    else:
        leak = attack.leak_gradient(params, victim, x, label)
    res = attack.lbfgs_reconstruct(leak, params, a.iters, a.lr, np.random.default_rng(seeds["master"]),
                                   reference=x)
    report = attack.attack_report(res, leak, seeds["master"])
    report.update(sample=args.sample, true_label=label)
    reporting.dump_json(out / "attack.json", report)
    attack.write_matrix_csv(out / "recovered.csv", res.recovered_input[0])
    _timing(out, started)
    log.info("%s attack: snr %.2f dB, lsd %.3f", args.mode, res.snr_db, res.lsd)


def cmd_report(args):
    started = time.perf_counter()
    for d in args.runs:
        if not (Path(d) / "report.json").exists():
            raise SpecError(f"{d}: not an evaluation directory (report.json missing)")
    out = _prepare_out(args.out, args.force)
    reporting.build_run_report(args.runs, out)
    _timing(out, started)


# -- parser -----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dpspeech", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", required=True, type=Path)
        sp.add_argument("--force", action="store_true")

    def privacy_flags(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--epsilon", type=float)
        g.add_argument("--sigma", type=float)
        sp.add_argument("--delta", type=float)

    sp = sub.add_parser("synth", help="generate a synthetic cohort and manifest")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a non-DP or DP diagnostic model")
    common(sp)
    sp.add_argument("--seed", type=int)
    privacy_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="repeated test-set evaluation with fairness metrics")
    common(sp, config=False)
    sp.add_argument("--run", required=True, type=Path)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("attack", help="gradient inversion against the victim model")
    common(sp)
    sp.add_argument("--sample", required=True, help="speaker id, optionally ':utterance'")
    sp.add_argument("--mode", choices=("raw", "dp"), default="raw")
    sp.add_argument("--seed", type=int)
    privacy_flags(sp)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("report", help="figure data across evaluation runs")
    common(sp, config=False)
    sp.add_argument("--runs", required=True, nargs="+", type=Path)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except OverwriteRefused as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OVERWRITE
    except (SpecError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DPSpeechError, OSError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
