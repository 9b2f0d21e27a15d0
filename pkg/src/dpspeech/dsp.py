"""Audio front end: drift removal, STFT power, mel filterbank, log-Mel features.

Default configuration mirrors the speech-disorder recipe: 16 kHz audio,
1024-point FFT with a 1024-sample (64 ms) Hann window, 256-sample hop,
80 HTK-style mel filters over 0-8 kHz, natural log with a 1e-10 floor.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as _signal

from .errors import FormatError, ParameterError

SAMPLE_RATE = 16000
FFT_SIZE = 1024
WIN_LENGTH = 1024
HOP = 256
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-10
CROP_FRAMES = 180
HIGHPASS_HZ = 50.0
HIGHPASS_ORDER = 2


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ParameterError("audio samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ParameterError("audio samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_bins)
    fft_size: int
    sample_rate: int
    fmin: float
    fmax: float
    edges_hz: np.ndarray = field(repr=False)  # (n_mels + 2,) left/center/right points

    @property
    def n_mels(self):
        return self.weights.shape[0]

    @property
    def n_bins(self):
        return self.weights.shape[1]

    @property
    def centers_hz(self):
        return self.edges_hz[1:-1]


@dataclass(frozen=True)
class LogMelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames)
    frame_hop: int = HOP
    origin_id: str = ""

    @property
    def n_mels(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def zero_phase_highpass(sig: AudioSignal, cutoff_hz: float = HIGHPASS_HZ,
                        order: int = HIGHPASS_ORDER) -> AudioSignal:
    """Butterworth high-pass run forward and backward (zero net phase).

    The result is the mean of the forward-backward and backward-forward
    passes, so filtering a time-reversed signal and reversing the output
    reproduces the original result exactly.
    """
    nyq = sig.sample_rate / 2.0
    if not 0.0 < cutoff_hz < nyq:
        raise ParameterError(f"cutoff_hz must lie in (0, {nyq}), got {cutoff_hz}")
    padlen = 3 * order
    if len(sig) < padlen + 1:
        raise ParameterError(f"signal of {len(sig)} samples too short for order-{order} filtering")
    b, a = _signal.butter(order, cutoff_hz, btype="highpass", fs=sig.sample_rate)
    x = sig.samples
    fb = _signal.filtfilt(b, a, x, padtype="odd", padlen=padlen)
    bf = _signal.filtfilt(b, a, x[::-1], padtype="odd", padlen=padlen)[::-1]
    return AudioSignal(0.5 * (fb + bf), sig.sample_rate)


def stft_power(sig: AudioSignal, fft_size: int = FFT_SIZE, win_length: int = WIN_LENGTH,
               hop: int = HOP) -> np.ndarray:
    """Power spectrogram |DFT|^2 of Hann-windowed frames, shape (fft_size//2+1, n_frames)."""
    if hop <= 0:
        raise ParameterError("hop must be positive")
    if win_length > fft_size or win_length <= 0:
        raise ParameterError("win_length must be in [1, fft_size]")
    x = sig.samples
    if x.size < win_length:
        raise ParameterError(f"signal of {x.size} samples is shorter than one window ({win_length})")
    n_frames = 1 + (x.size - win_length) // hop
    window = _signal.get_window("hann", win_length, fftbins=True)
    frames = np.lib.stride_tricks.sliding_window_view(x, win_length)[::hop][:n_frames]
    spec = np.fft.rfft(frames * window, n=fft_size, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T.copy()


def build_mel_filterbank(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX,
                         fft_size: int = FFT_SIZE, sample_rate: int = SAMPLE_RATE) -> MelFilterbank:
    if n_mels < 1:
        raise ParameterError("n_mels must be >= 1")
    if not 0.0 <= fmin < fmax <= sample_rate / 2.0:
        raise ParameterError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got [{fmin}, {fmax}]")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - left) / (center - left)
    down = (right - bins[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(up, down))
    if np.any(weights.max(axis=1) <= 0.0):
        raise ParameterError("FFT resolution too coarse: some mel filters cover no bins")
    return MelFilterbank(weights, fft_size, sample_rate, float(fmin), float(fmax), edges)


def log_mel(power: np.ndarray, fb: MelFilterbank, floor: float = LOG_FLOOR,
            origin_id: str = "", hop: int = HOP) -> LogMelSpectrogram:
    power = np.asarray(power, dtype=np.float64)
    if floor <= 0:
        raise ParameterError("floor must be positive")
    if power.ndim != 2 or power.shape[0] != fb.n_bins:
        raise ParameterError(f"power has {power.shape[0] if power.ndim == 2 else '?'} bins, "
                             f"filterbank expects {fb.n_bins}")
    return LogMelSpectrogram(np.log(np.maximum(fb.weights @ power, floor)), hop, origin_id)


def frame_crop(lms: LogMelSpectrogram, n_frames: int = CROP_FRAMES,
               rng: np.random.Generator | None = None) -> LogMelSpectrogram:
    """Contiguous random crop; short inputs wrap around cyclically."""
    if n_frames < 1:
        raise ParameterError("n_frames must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    return LogMelSpectrogram(lms.values[:, crop_indices(lms.n_frames, n_frames, rng)],
                             lms.frame_hop, lms.origin_id)


def crop_indices(total: int, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    if total >= n_frames:
        start = int(rng.integers(0, total - n_frames + 1))
        return np.arange(start, start + n_frames)
    start = int(rng.integers(0, total))
    return (start + np.arange(n_frames)) % total


def standardize(values: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance scaling of one spectrogram (model input convention)."""
    values = np.asarray(values, dtype=np.float64)
    sd = values.std()
    return (values - values.mean()) / (sd if sd > 0 else 1.0)


_FILTERBANK_CACHE: dict = {}


def _default_filterbank():
    key = (N_MELS, FMIN, FMAX, FFT_SIZE, SAMPLE_RATE)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = build_mel_filterbank(*key)
    return _FILTERBANK_CACHE[key]


def extract_features(sig: AudioSignal, origin_id: str = "") -> LogMelSpectrogram:
    """Full front end: drift removal -> STFT power -> 80-band log-Mel."""
    if sig.sample_rate != SAMPLE_RATE:
        raise ParameterError(f"expected {SAMPLE_RATE} Hz audio, got {sig.sample_rate} Hz")
    clean = zero_phase_highpass(sig)
    return log_mel(stft_power(clean), _default_filterbank(), origin_id=origin_id)


def read_wav(path) -> AudioSignal:
    """Read 16-bit PCM mono 16 kHz WAV; anything else is a FormatError."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            nch, width, rate, nframes = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            raw = fh.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if nch != 1:
        raise FormatError(f"{path}: expected mono, found {nch} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate} Hz")
    if nframes == 0:
        raise FormatError(f"{path}: no audio frames")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioSignal(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, sig: AudioSignal) -> None:
    if sig.sample_rate != SAMPLE_RATE:
        raise ParameterError(f"only {SAMPLE_RATE} Hz output is supported")
    pcm = np.clip(np.round(sig.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sig.sample_rate)
        fh.writeframes(pcm.tobytes())
