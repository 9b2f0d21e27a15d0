"""Deterministic synthetic cohorts standing in for restricted clinical corpora.

Each class has a signature of three formant-like tones gated by a
class-specific amplitude envelope; each speaker adds a harmonic
series on its own fundamental; each demographic subgroup adds white noise
at the SNR given in the cohort's difficulty profile.  Nothing produced here
is clinical data.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, AudioSignal, write_wav
from .errors import SpecError

SEXES = ("F", "M")
AGE_BANDS = ("child", "young", "early_adult", "middle", "older")

# formant triplets (Hz) per class index
CLASS_FORMANTS = (
    (500.0, 1500.0, 2500.0),
    (750.0, 1150.0, 3100.0),
    (320.0, 2100.0, 2900.0),
    (950.0, 1800.0, 3700.0),
    (420.0, 1000.0, 2300.0),
    (650.0, 2400.0, 3400.0),
)
# envelope per class: (modulation rate Hz, duty cycle); rate 0 means steady
CLASS_ENVELOPE = ((0.0, 1.0), (3.0, 0.5), (10.0, 0.5), (5.0, 0.15), (7.0, 0.3), (1.5, 0.8))
FORMANT_AMP = 0.2
HARMONIC_AMP = 0.05
FORMANT_JITTER = 0.03

DEFAULT_DIFFICULTY = {
    "F": 20.0, "M": 8.0,
    "child": 10.0, "young": 25.0, "early_adult": 25.0, "middle": 15.0, "older": 6.0,
}


@dataclass
class CohortSpec:
    n_speakers: int
    classes: dict  # class id -> prevalence, in declaration order
    sex: dict = field(default_factory=lambda: {"F": 0.5, "M": 0.5})
    age_band: dict = field(default_factory=lambda: {b: 0.2 for b in AGE_BANDS})
    utterances_per_speaker: int = 4
    utterance_seconds: float = 3.0
    difficulty_profile: dict = field(default_factory=lambda: dict(DEFAULT_DIFFICULTY))
    master_seed: int = 0

    def __post_init__(self):
        if not isinstance(self.n_speakers, int) or self.n_speakers < 1:
            raise SpecError("n_speakers: must be an integer >= 1")
        if not isinstance(self.utterances_per_speaker, int) or self.utterances_per_speaker < 1:
            raise SpecError("utterances_per_speaker: must be an integer >= 1")
        if not self.utterance_seconds > 0:
            raise SpecError("utterance_seconds: must be positive")
        if len(self.classes) < 2 or len(self.classes) > len(CLASS_FORMANTS):
            raise SpecError(f"classes: need between 2 and {len(CLASS_FORMANTS)} classes")
        for name, table, allowed in (("classes", self.classes, None), ("sex", self.sex, SEXES),
                                     ("age_band", self.age_band, AGE_BANDS)):
            if allowed is not None and set(table) - set(allowed):
                raise SpecError(f"{name}: unknown categories {sorted(set(table) - set(allowed))}")
            probs = list(table.values())
            if any((not isinstance(p, (int, float))) or p < 0 for p in probs):
                raise SpecError(f"{name}: proportions must be non-negative numbers")
            if abs(sum(probs) - 1.0) > 1e-9:
                raise SpecError(f"{name}: proportions sum to {sum(probs)}, expected 1")
        for key, snr in self.difficulty_profile.items():
            if key not in SEXES and key not in AGE_BANDS:
                raise SpecError(f"difficulty_profile: unknown subgroup {key!r}")
            if snr is not None and not isinstance(snr, (int, float)):
                raise SpecError(f"difficulty_profile: SNR for {key!r} must be a number or null")

    @property
    def class_ids(self):
        return list(self.classes)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise SpecError("cohort spec must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"{sorted(unknown)[0]}: unknown field in cohort spec")
        for req in ("n_speakers", "classes"):
            if req not in d:
                raise SpecError(f"{req}: required field missing")
        d = dict(d)
        if isinstance(d["classes"], list):
            d["classes"] = {str(c): 1.0 / len(d["classes"]) for c in d["classes"]}
        if not isinstance(d["classes"], dict):
            raise SpecError("classes: must be an object of class id -> prevalence")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(f"cohort spec: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SpeakerRecord:
    id: str
    class_id: str
    class_index: int
    sex: str
    age_band: str
    fundamental_hz: float
    seed: int


def allocate_counts(proportions, n):
    """Largest-remainder rounding; ties go to the earlier category."""
    props = np.asarray(proportions, dtype=np.float64)
    raw = props * n
    counts = np.floor(raw + 1e-9).astype(int)
    rem = raw - counts
    order = sorted(range(len(props)), key=lambda i: (-round(rem[i], 12), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts


def speaker_seed(master_seed, speaker_id):
    digest = hashlib.blake2b(f"{master_seed}:{speaker_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _labels(table, n, field_name):
    names = list(table)
    counts = allocate_counts(list(table.values()), n)
    if any(c == 0 and table[k] > 0 for k, c in zip(names, counts)):
        raise SpecError(f"{field_name}: {n} speakers cannot represent every category with positive proportion")
    return [name for name, c in zip(names, counts) for _ in range(c)]


def generate_cohort(spec: CohortSpec):
    rng = np.random.default_rng(spec.master_seed)
    n = spec.n_speakers
    classes = _labels(spec.classes, n, "classes")
    if len(set(classes)) < len(spec.classes):
        raise SpecError(f"classes: {n} speakers cannot cover every class")
    sexes = _labels(spec.sex, n, "sex")
    ages = _labels(spec.age_band, n, "age_band")
    classes = [classes[i] for i in rng.permutation(n)]
    sexes = [sexes[i] for i in rng.permutation(n)]
    ages = [ages[i] for i in rng.permutation(n)]
    f0_u = rng.uniform(-1.0, 1.0, size=n)
    cls_index = {c: i for i, c in enumerate(spec.classes)}
    out = []
    for i in range(n):
        sid = f"spk{i:04d}"
        if ages[i] == "child":
            f0 = 260.0 + 30.0 * f0_u[i]
        elif sexes[i] == "F":
            f0 = 205.0 + 25.0 * f0_u[i]
        else:
            f0 = 120.0 + 20.0 * f0_u[i]
        out.append(SpeakerRecord(sid, classes[i], cls_index[classes[i]], sexes[i], ages[i],
                                 float(f0), speaker_seed(spec.master_seed, sid)))
    return out


def _snr_to_noise_ratio(snr):
    if snr is None or math.isinf(snr):
        return 0.0
    return 10.0 ** (-float(snr) / 10.0)


def noise_ratio(speaker: SpeakerRecord, spec: CohortSpec):
    """Noise power relative to clean power; sex and age contributions add."""
    prof = spec.difficulty_profile
    return _snr_to_noise_ratio(prof.get(speaker.sex)) + _snr_to_noise_ratio(prof.get(speaker.age_band))


def class_signature(speaker: SpeakerRecord):
    """Speaker-jittered formant frequencies and the class envelope (rate, duty)."""
    jit = np.random.default_rng([speaker.seed, 0xF0]).uniform(-FORMANT_JITTER, FORMANT_JITTER, 3)
    freqs = np.asarray(CLASS_FORMANTS[speaker.class_index]) * (1.0 + jit)
    return freqs, CLASS_ENVELOPE[speaker.class_index]


def envelope(t, rate, duty, phase):
    """Raised-cosine gated pulse train; steady when rate is 0."""
    if rate <= 0:
        return np.ones_like(t)
    cyc = np.mod(rate * t + phase / (2.0 * np.pi), 1.0)
    on = cyc < duty
    return np.where(on, 0.5 * (1.0 - np.cos(2.0 * np.pi * cyc / duty)), 0.0)


def clean_utterance(speaker: SpeakerRecord, index: int, spec: CohortSpec):
    n = int(round(spec.utterance_seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    rng = np.random.default_rng([speaker.seed, int(index)])
    freqs, (rate, duty) = class_signature(speaker)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    env = envelope(t, rate, duty, rng.uniform(0.0, 2.0 * np.pi))
    x = np.zeros(n)
    for f, ph in zip(freqs, phases):
        x += FORMANT_AMP * np.sin(2.0 * np.pi * f * t + ph)
    x *= env
    h_phases = rng.uniform(0.0, 2.0 * np.pi, size=16)
    for h in range(1, 17):
        fh = h * speaker.fundamental_hz
        if fh >= 7000.0:
            break
        x += HARMONIC_AMP / h * np.sin(2.0 * np.pi * fh * t + h_phases[h - 1])
    return x, rng


def render_utterance(speaker: SpeakerRecord, index: int, spec: CohortSpec) -> AudioSignal:
    if not 0 <= index < spec.utterances_per_speaker:
        raise SpecError(f"utterance index {index} outside [0, {spec.utterances_per_speaker})")
    x, rng = clean_utterance(speaker, index, spec)
    ratio = noise_ratio(speaker, spec)
    if ratio > 0:
        power = float(np.mean(x * x))
        x = x + rng.standard_normal(x.size) * math.sqrt(power * ratio)
    return AudioSignal(x, SAMPLE_RATE)


MANIFEST_COLUMNS = ("speaker_id", "class", "sex", "age_band", "utterance", "wav_path",
                    "fundamental_hz", "speaker_seed")


def export_manifest(cohort, spec: CohortSpec, out_dir):
    """Write corpus/<speaker>/<utt>.wav files and manifest.csv; returns the manifest path."""
    out_dir = Path(out_dir)
    rows = []
    for spk in cohort:
        d = out_dir / "corpus" / spk.id
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"{d}: cannot create directory ({exc})") from exc
        for u in range(spec.utterances_per_speaker):
            rel = f"corpus/{spk.id}/{u}.wav"
            try:
                write_wav(out_dir / rel, render_utterance(spk, u, spec))
            except OSError as exc:
                raise OSError(f"{out_dir / rel}: write failed ({exc})") from exc
            rows.append((spk.id, spk.class_id, spk.sex, spk.age_band, u, rel,
                         repr(spk.fundamental_hz), spk.seed))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    (out_dir / "cohort_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class Manifest:
    root: Path
    speakers: list  # SpeakerRecord, manifest order
    utterances: dict  # speaker id -> list of wav paths
    class_ids: list


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: manifest not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise SpecError(f"{path}: manifest header {reader.fieldnames} != {list(MANIFEST_COLUMNS)}")
        rows = list(reader)
    spec_path = path.parent / "cohort_spec.json"
    if spec_path.exists():
        class_ids = list(json.loads(spec_path.read_text())["classes"])
    else:
        class_ids = sorted({r["class"] for r in rows})
    speakers, utts = {}, {}
    for r in rows:
        sid = r["speaker_id"]
        if sid not in speakers:
            speakers[sid] = SpeakerRecord(sid, r["class"], class_ids.index(r["class"]), r["sex"],
                                          r["age_band"], float(r["fundamental_hz"]), int(r["speaker_seed"]))
            utts[sid] = []
        utts[sid].append(path.parent / r["wav_path"])
    return Manifest(path.parent, list(speakers.values()), utts, class_ids)
