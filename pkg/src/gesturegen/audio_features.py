"""Speech feature extraction: MFCC, log band spectrogram and prosody.

All analysis windows lie fully inside the signal, so a signal of N samples
with window W and hop H yields floor((N - W) / H) + 1 frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile

from . import kernels

EPS = 1e-10

FEATURE_DIMS = {"mfcc": 26, "spectrogram": 64, "prosodic": 4}

MFCC_WINDOW_S = 0.02
MFCC_HOP_S = 0.01
SPEC_WINDOW_S = 0.046
SPEC_HOP_S = 0.005
PROSODY_WINDOW_S = 0.04
PROSODY_HOP_S = 0.005


class AudioError(ValueError):
    pass


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("samples must be one-dimensional (mono)")
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("samples contain non-finite values")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    kind: str
    fps: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("feature data must be (frames, dim)")
        expected = FEATURE_DIMS.get(self.kind)
        if expected is not None and self.data.shape[1] != expected:
            raise ValueError(f"{self.kind} features have {expected} dims, got {self.data.shape[1]}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature data contain non-finite values")

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


# ---------------------------------------------------------------- WAV I/O

def read_wav(path) -> AudioSignal:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    sr, data = wavfile.read(path)
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported WAV sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioSignal(x, int(sr))


def write_wav(path, signal: AudioSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, signal.sample_rate, pcm)


# ---------------------------------------------------------------- framing

def _frames(x, win, hop):
    n = len(x)
    if win <= 0 or hop <= 0:
        raise AudioError("window and hop must be positive")
    if n < win:
        raise AudioError(f"signal of {n} samples is shorter than one {win}-sample window")
    count = (n - win) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:count]


def _samples(seconds, sr):
    return int(round(seconds * sr))


def _next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def hann(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(signal: AudioSignal, window_s: float, hop_s: float) -> np.ndarray:
    """Power spectra, (frames, nfft // 2 + 1), nfft the next power of two >= window."""
    if not (window_s >= hop_s > 0):
        raise AudioError("need window_s >= hop_s > 0")
    win = _samples(window_s, signal.sample_rate)
    hop = _samples(hop_s, signal.sample_rate)
    frames = _frames(signal.samples, win, hop)
    nfft = _next_pow2(win)
    spec = np.fft.rfft(frames * hann(win), n=nfft, axis=1)
    return spec.real**2 + spec.imag**2


def fft_bin_frequencies(nfft, sample_rate):
    return np.arange(nfft // 2 + 1) * sample_rate / nfft


# ---------------------------------------------------------------- filterbanks

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def triangular_filters(edges_hz, nfft, sample_rate, normalize=False):
    """Triangles over FFT bins with corners at consecutive triples of ``edges_hz``.

    A triangle too narrow to cover any bin gets its nearest bin instead, so no
    band is identically empty.
    """
    freqs = fft_bin_frequencies(nfft, sample_rate)
    n_filters = len(edges_hz) - 2
    fb = np.zeros((n_filters, len(freqs)))
    for k in range(n_filters):
        lo, mid, hi = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[k] = np.maximum(0.0, np.minimum(up, down))
        if not fb[k].any():
            fb[k, np.argmin(np.abs(freqs - mid))] = 1.0
    if normalize:
        fb /= fb.sum(axis=1, keepdims=True)
    return fb


def mel_filterbank(n_filters, nfft, sample_rate, fmin=0.0, fmax=8000.0):
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    return triangular_filters(edges, nfft, sample_rate)


def mel_band_energies(signal: AudioSignal, n_filters=26) -> np.ndarray:
    """Mel filterbank energies (frames, n_filters) before the log and DCT."""
    power = stft_power(signal, MFCC_WINDOW_S, MFCC_HOP_S)
    nfft = 2 * (power.shape[1] - 1)
    return power @ mel_filterbank(n_filters, nfft, signal.sample_rate).T


def mfcc(signal: AudioSignal) -> FeatureSequence:
    if signal.sample_rate < 16000:
        raise AudioError(f"MFCC needs sample_rate >= 16000, got {signal.sample_rate}")
    energies = mel_band_energies(signal, 26)
    coeffs = dct(np.log(np.maximum(energies, EPS)), type=2, norm="ortho", axis=1)
    return FeatureSequence("mfcc", int(round(1.0 / MFCC_HOP_S)), coeffs)


def spectrogram64(signal: AudioSignal) -> FeatureSequence:
    if signal.sample_rate < 16000:
        raise AudioError(f"spectrogram needs sample_rate >= 16000 to reach 8 kHz, got {signal.sample_rate}")
    power = stft_power(signal, SPEC_WINDOW_S, SPEC_HOP_S)
    nfft = 2 * (power.shape[1] - 1)
    edges = np.geomspace(20.0, 8000.0, 64 + 2)
    bands = power @ triangular_filters(edges, nfft, signal.sample_rate, normalize=True).T
    return FeatureSequence("spectrogram", int(round(1.0 / SPEC_HOP_S)), np.log(np.maximum(bands, EPS)))


# ---------------------------------------------------------------- prosody

def energy_contour(signal: AudioSignal, hop_s=PROSODY_HOP_S, window_s=PROSODY_WINDOW_S) -> np.ndarray:
    frames = _frames(signal.samples, _samples(window_s, signal.sample_rate), _samples(hop_s, signal.sample_rate))
    return np.sqrt(np.mean(frames**2, axis=1))


def nccf(frames: np.ndarray, min_lag: int, max_lag: int) -> np.ndarray:
    """Normalised cross-correlation of each frame with itself for lags min_lag..max_lag.

    For lag k: sum x[n] x[n+k] over the overlap, divided by the geometric mean
    of the two overlapping segments' energies. Lies in [-1, 1].
    """
    n_frames, win = frames.shape
    nfft = _next_pow2(2 * win)
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(spec.real**2 + spec.imag**2, n=nfft, axis=1)[:, : max_lag + 1]
    lags = np.arange(min_lag, max_lag + 1)
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    head = sq[:, win - lags]
    tail = sq[:, -1:] - sq[:, lags]
    denom = np.sqrt(head * tail)
    num = acf[:, lags]
    out = np.zeros_like(num)
    ok = denom > 1e-12
    out[ok] = num[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def f0_contour(
    signal: AudioSignal,
    hop_s=PROSODY_HOP_S,
    window_s=PROSODY_WINDOW_S,
    fmin=60.0,
    fmax=400.0,
    voicing_threshold=0.45,
) -> np.ndarray:
    """Autocorrelation pitch track in Hz; unvoiced frames are 0."""
    sr = signal.sample_rate
    frames = _frames(signal.samples, _samples(window_s, sr), _samples(hop_s, sr))
    # one spare lag either side so boundary periods can still be local maxima
    min_lag = max(int(np.floor(sr / fmax)) - 1, 1)
    max_lag = min(int(np.ceil(sr / fmin)) + 1, frames.shape[1] - 2)
    corr = nccf(frames, min_lag, max_lag)
    lag, _ = kernels.pick_period(corr, min_lag, voicing_threshold, 0.9)
    f0 = np.zeros(len(lag))
    voiced = lag > 0
    f0[voiced] = sr / lag[voiced]
    f0[(f0 < fmin) | (f0 > fmax)] = 0.0
    return f0


def normalize_pitch(f0):
    return np.maximum(np.log(np.asarray(f0) + 1.0) - 4.0, 0.0)


def normalize_intensity(intensity):
    return np.log(np.maximum(np.asarray(intensity), EPS)) - 3.0


def _first_difference(x, dt):
    d = np.zeros_like(x)
    d[1:] = np.diff(x) / dt
    return d


def prosodic_features(signal: AudioSignal) -> FeatureSequence:
    energy = normalize_intensity(energy_contour(signal))
    pitch = normalize_pitch(f0_contour(signal))
    data = np.stack(
        [energy, _first_difference(energy, PROSODY_HOP_S), pitch, _first_difference(pitch, PROSODY_HOP_S)],
        axis=1,
    )
    return FeatureSequence("prosodic", int(round(1.0 / PROSODY_HOP_S)), data)


# ---------------------------------------------------------------- resampling

def downsample_average(f: FeatureSequence, factor: int) -> FeatureSequence:
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    n_out = f.n_frames // factor
    if n_out < 1:
        raise ValueError(f"{f.n_frames} frames cannot form one output frame at factor {factor}")
    if f.fps % factor:
        raise ValueError(f"fps {f.fps} is not divisible by factor {factor}")
    blocks = f.data[: n_out * factor].reshape(n_out, factor, f.dim)
    return FeatureSequence(f.kind, f.fps // factor, blocks.mean(axis=1))


def concat_features(seqs) -> FeatureSequence:
    seqs = list(seqs)
    if not seqs:
        raise ValueError("nothing to concatenate")
    if len(seqs) == 1:
        return seqs[0]
    fps = {s.fps for s in seqs}
    if len(fps) != 1:
        raise ValueError(f"feature rates differ: {sorted(fps)}")
    n = min(s.n_frames for s in seqs)
    return FeatureSequence("combined", seqs[0].fps, np.concatenate([s.data[:n] for s in seqs], axis=1))


# feature-set names used on the command line, in concatenation order
FEATURE_SETS = {
    "mfcc": ("mfcc",),
    "spectrogram": ("spectrogram",),
    "prosodic": ("prosodic",),
    "spec+pros": ("spectrogram", "prosodic"),
    "mfcc+pros": ("mfcc", "prosodic"),
    "mfcc+spec": ("mfcc", "spectrogram"),
    "all": ("mfcc", "spectrogram", "prosodic"),
}

_EXTRACTORS = {"mfcc": mfcc, "spectrogram": spectrogram64, "prosodic": prosodic_features}


def feature_set_dim(name):
    return sum(FEATURE_DIMS[k] for k in FEATURE_SETS[name])


def extract(signal: AudioSignal, feature_set: str, target_fps: int = 20) -> FeatureSequence:
    """Extract a named feature set and average it down to ``target_fps``."""
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}; choose from {sorted(FEATURE_SETS)}")
    parts = []
    for kind in FEATURE_SETS[feature_set]:
        f = _EXTRACTORS[kind](signal)
        if f.fps % target_fps:
            raise ValueError(f"{kind} rate {f.fps} is not a multiple of {target_fps}")
        parts.append(downsample_average(f, f.fps // target_fps))
    return concat_features(parts)


# ---------------------------------------------------------------- CSV

def write_feature_csv(f: FeatureSequence, path) -> None:
    lines = [f"# kind={f.kind} fps={f.fps} dim={f.dim}"]
    lines += [",".join(repr(float(v)) for v in row) for row in f.data]
    Path(path).write_text("\n".join(lines) + "\n")


def read_feature_csv(path) -> FeatureSequence:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing '# kind=... fps=... dim=...' header")
    meta = dict(kv.split("=", 1) for kv in lines[0][1:].split() if "=" in kv)
    try:
        kind, fps, dim = meta["kind"], int(meta["fps"]), int(meta["dim"])
    except (KeyError, ValueError):
        raise ValueError(f"{path}: bad header {lines[0]!r}") from None
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    if any(len(r) != dim for r in rows):
        raise ValueError(f"{path}: rows must have {dim} values")
    return FeatureSequence(kind, fps, np.array(rows).reshape(len(rows), dim))
