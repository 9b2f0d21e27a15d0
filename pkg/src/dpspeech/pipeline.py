"""Training and evaluation drivers over a synthetic corpus manifest."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import dsp, nn, privacy
from .evaluation import PredictionSet
from .errors import ParameterError
from .synth import read_manifest


class FeatureStore:
    """Log-Mel features of every utterance in a manifest, extracted once."""

    def __init__(self, manifest_path):
        self.manifest = read_manifest(manifest_path)
        self.class_ids = list(self.manifest.class_ids)
        self.speakers = {s.id: s for s in self.manifest.speakers}
        self._feats = {}

    def features(self, speaker_id):
        if speaker_id not in self._feats:
            paths = self.manifest.utterances[speaker_id]
            self._feats[speaker_id] = [
                dsp.extract_features(dsp.read_wav(p), origin_id=f"{speaker_id}/{i}").values
                for i, p in enumerate(paths)]
        return self._feats[speaker_id]

    def speaker_classes(self):
        return [(s.id, s.class_id) for s in self.manifest.speakers]


def model_input(values, offset, n_frames=dsp.CROP_FRAMES):
    """Standardised (1, n_mels, n_frames) crop starting at ``offset`` (cyclic)."""
    idx = (offset + np.arange(n_frames)) % values.shape[1]
    return dsp.standardize(values[:, idx])[None]


def crop_offset(n_total, rng, n_frames=dsp.CROP_FRAMES):
    return int(dsp.crop_indices(n_total, n_frames, rng)[0])


class SpeakerDataset:
    """Privacy units are speakers; each yields up to ``utterances`` random crops."""

    def __init__(self, store: FeatureStore, speaker_ids, utterances=4, n_frames=dsp.CROP_FRAMES):
        self.store = store
        self.ids = list(speaker_ids)
        self.utterances = int(utterances)
        self.n_frames = n_frames
        self.n_classes = len(store.class_ids)

    def __len__(self):
        return len(self.ids)

    def label(self, i):
        return self.store.speakers[self.ids[i]].class_index

    def examples(self, i, rng):
        feats = self.store.features(self.ids[i])
        if len(feats) > self.utterances:
            pick = np.sort(rng.choice(len(feats), self.utterances, replace=False))
        else:
            pick = np.arange(len(feats))
        xs = [model_input(feats[u], crop_offset(feats[u].shape[1], rng, self.n_frames), self.n_frames)
              for u in pick]
        y = nn.one_hot(self.label(i), self.n_classes)
        return np.stack(xs), np.tile(y, (len(xs), 1))


@dataclass
class TrainSettings:
    mode: str = "non_dp"
    lr: float | None = None  # None -> 5e-5 (Adam) or 5e-4 (NAdam)
    epochs: int = 10
    batch_speakers: int = 16  # non-DP batch size, or the DP expected lot size
    utterances: int = 4
    class_weighting: bool | None = None  # None -> on for non-DP, off for DP
    clip_norm: float = 1.5
    epsilon: float | None = None
    sigma: float | None = None
    delta: float = 1e-3
    audit_stride: int = 1

    def __post_init__(self):
        if self.mode not in ("non_dp", "dp"):
            raise ParameterError("mode must be 'non_dp' or 'dp'")
        if self.epochs < 1 or self.batch_speakers < 1 or self.utterances < 1:
            raise ParameterError("epochs, batch_speakers and utterances must be >= 1")
        if not 0 < self.delta < 1:
            raise ParameterError("delta must lie in (0, 1)")
        if self.mode == "dp" and (self.epsilon is None) == (self.sigma is None):
            raise ParameterError("dp mode needs exactly one of epsilon or sigma")

    @property
    def learning_rate(self):
        if self.lr is not None:
            return self.lr
        return 5e-4 if self.mode == "dp" else 5e-5

    @property
    def weighted(self):
        return self.mode == "non_dp" if self.class_weighting is None else bool(self.class_weighting)


@dataclass
class TrainResult:
    params: dict
    loss_rows: list  # (epoch, mean loss)
    audit_rows: list  # (step, sigma, q, order_star, epsilon, delta), DP only
    sigma: float | None = None
    epsilon: float | None = None
    steps: int = 0


def _class_weights(data: SpeakerDataset, enabled):
    if not enabled:
        return None
    return nn.inverse_frequency_weights([data.label(i) for i in range(len(data))], data.n_classes)


def train_non_dp(data: SpeakerDataset, model_cfg, settings: TrainSettings, seed):
    """Adam on shuffled speaker batches with class-weighted sigmoid BCE."""
    rng = np.random.default_rng(seed)
    params = nn.init_params(model_cfg)
    state = nn.init_state(params)
    weights = _class_weights(data, settings.weighted)
    n, b = len(data), settings.batch_speakers
    rows, steps = [], 0
    for epoch in range(settings.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, b):
            xs, ts = zip(*(data.examples(int(i), rng) for i in order[s:s + b]))
            loss, g = nn.mean_gradient(params, model_cfg, np.concatenate(xs), np.concatenate(ts), weights)
            params, state = nn.adam_step(params, g, state, settings.learning_rate)
            losses.append(loss)
            steps += 1
        rows.append((epoch, float(np.mean(losses))))
    return TrainResult(params, rows, [], steps=steps)


def dp_schedule(n_units, settings: TrainSettings):
    """(q, steps): expected lot of ``batch_speakers`` units, epochs / q steps."""
    q = min(1.0, settings.batch_speakers / n_units)
    return q, int(math.ceil(settings.epochs / q))


def train_dp(data: SpeakerDataset, model_cfg, settings: TrainSettings, seed, noise_seed):
    """DP-SGD with speaker-level Poisson lots, clipping, Gaussian noise and NAdam."""
    if model_cfg.uses_batch_norm:
        raise ParameterError("DP training requires group normalisation; batch norm leaks across examples")
    q, steps = dp_schedule(len(data), settings)
    if settings.sigma is not None:
        sigma = float(settings.sigma)
    else:
        sigma = privacy.calibrate_sigma(privacy.PrivacyBudget(settings.epsilon, settings.delta), q, steps)
    cfg = privacy.NoiseConfig(sigma, settings.clip_norm, q, settings.delta)
    rng = np.random.default_rng(seed)
    params = nn.init_params(model_cfg)
    opt = nn.init_state(params)
    acct = privacy.new_accountant()
    weights = _class_weights(data, settings.weighted)
    audit, rows = [], []
    per_epoch = max(1, int(round(1.0 / q)))
    losses = []
    for t in range(steps):
        params, opt, acct = privacy.dp_train_step(
            params, opt, cfg, data, acct, rng, model_cfg, settings.learning_rate,
            noise_rng=privacy.noise_generator(noise_seed, t), class_weights=weights)
        if (t + 1) % settings.audit_stride == 0 or t + 1 == steps:
            eps, order = privacy.rdp_to_epsilon(acct, settings.delta)
            audit.append((t + 1, sigma, q, order, eps, settings.delta))
        if (t + 1) % per_epoch == 0 or t + 1 == steps:
            losses.append(_probe_loss(params, model_cfg, data, weights, t))
            rows.append((len(rows), losses[-1]))
    eps, _ = privacy.rdp_to_epsilon(acct, settings.delta)
    return TrainResult(params, rows, audit, sigma, eps, steps)


def _probe_loss(params, model_cfg, data, weights, t):
    # loss on a few random training speakers, for monitoring only (not privatised)
    rng = np.random.default_rng([7, t])
    idx = rng.choice(len(data), min(8, len(data)), replace=False)
    xs, ts = zip(*(data.examples(int(i), rng) for i in idx))
    loss, _ = nn.mean_gradient(params, model_cfg, np.concatenate(xs), np.concatenate(ts), weights)
    return float(loss)


# -- evaluation ---------------------------------------------------------------------

class Scorer:
    """Memoises per-crop scores; an utterance has only a few distinct crop offsets."""

    def __init__(self, params, model_cfg, store: FeatureStore):
        self.params = params
        self.cfg = model_cfg
        self.store = store
        self._cache = {}

    def scores(self, requests):
        """requests: list of (speaker_id, utterance, offset) -> (len, n_classes)."""
        todo = [r for r in dict.fromkeys(requests) if r not in self._cache]
        if todo:
            n_frames = self.cfg.input_shape[2]
            x = np.stack([model_input(self.store.features(s)[u], o, n_frames) for s, u, o in todo])
            for r, row in zip(todo, nn.predict_scores(self.params, self.cfg, x)):
                self._cache[r] = row
        return np.stack([self._cache[r] for r in requests])


def crop_plan(store, speaker_ids, crop_seed, repeat, n_frames=dsp.CROP_FRAMES):
    """Crop offset of every test utterance for one repeat, plus a hash of the plan."""
    rng = np.random.default_rng([crop_seed, repeat])
    plan = []
    for sid in speaker_ids:
        for u, v in enumerate(store.features(sid)):
            plan.append((sid, u, crop_offset(v.shape[1], rng, n_frames)))
    h = hashlib.sha256(repr(plan).encode()).hexdigest()[:16]
    return plan, h


def evaluate_repeats(params, model_cfg, store, test_ids, repeats, crop_seed):
    """One PredictionSet per repeat; a speaker's score is the mean over its utterances."""
    scorer = Scorer(params, model_cfg, store)
    n_frames = model_cfg.input_shape[2]
    out, hashes = [], []
    for r in range(repeats):
        plan, h = crop_plan(store, test_ids, crop_seed, r, n_frames)
        s = scorer.scores(plan)
        owner = np.array([test_ids.index(p[0]) for p in plan])
        per = np.stack([s[owner == i].mean(axis=0) for i in range(len(test_ids))])
        spk = [store.speakers[i] for i in test_ids]
        out.append(PredictionSet(list(test_ids), per, [k.class_index for k in spk],
                                 {"sex": [k.sex for k in spk], "age_band": [k.age_band for k in spk]}, r))
        hashes.append(h)
    return out, hashes
