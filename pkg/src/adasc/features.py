"""Log mel-band energies: periodic-Hamming framing, power spectra, Slaney mel filterbank."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 44100
N_FFT = 2048
HOP = 1024
N_MELS = 64
LOG_FLOOR = 1e-10


class EmptyOutputError(ValueError):
    """The clip is shorter than one analysis window."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    clip_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = np.asarray(self.samples, dtype=np.float64)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    edges_hz: np.ndarray  # (n_mels + 2,) lower edge, centers, upper edge

    @property
    def centers_hz(self) -> np.ndarray:
        return self.edges_hz[1:-1]


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n_mels, n_frames)
    clip_id: str = ""
    device: str = ""


def hamming(n: int, periodic: bool = True) -> np.ndarray:
    denom = n if periodic else n - 1
    return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / denom)


def n_frames(length: int, window: int = N_FFT, hop: int = HOP) -> int:
    return 1 + (length - window) // hop


def frame_signal(clip: AudioClip | np.ndarray, window: int = N_FFT, hop: int = HOP,
                 window_fn: str = "hamming") -> np.ndarray:
    """Overlapping windowed frames, shape (n_frames, window).

    ``window_fn="rect"`` skips the taper; it exists for spectral tests.
    """
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if len(x) < window:
        raise EmptyOutputError(f"clip has {len(x)} samples, needs at least {window}")
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop]
    if window_fn == "hamming":
        return frames * hamming(window)
    if window_fn == "rect":
        return frames.copy()
    raise ValueError(f"unknown window {window_fn!r}")


def power_spectrum(frames: np.ndarray) -> np.ndarray:
    """|rfft|^2 per frame, returned as (n_fft // 2 + 1, n_frames)."""
    return (np.abs(np.fft.rfft(frames, axis=-1)) ** 2).T


# Slaney mel scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(f, htk: bool = False):
    f = np.asarray(f, dtype=np.float64)
    if htk:
        return 2595.0 * np.log10(1.0 + f / 700.0)
    safe = np.maximum(f, _MIN_LOG_HZ)
    return np.where(f >= _MIN_LOG_HZ, _MIN_LOG_MEL + np.log(safe / _MIN_LOG_HZ) / _LOGSTEP, f / _F_SP)


def mel_to_hz(m, htk: bool = False):
    m = np.asarray(m, dtype=np.float64)
    if htk:
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return np.where(m >= _MIN_LOG_MEL, _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL)), _F_SP * m)


def mel_filterbank(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT,
                   f_min: float = 0.0, f_max: float | None = None, htk: bool = False) -> MelFilterbank:
    """Area-normalized triangular filters on ``n_mels + 2`` equally spaced mel points."""
    if f_max is None:
        f_max = sample_rate / 2
    if n_mels < 1 or not 0 <= f_min < f_max <= sample_rate / 2:
        raise ValueError(f"invalid filterbank request: n_mels={n_mels}, f_min={f_min}, f_max={f_max}")
    fft_hz = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min, htk), hz_to_mel(f_max, htk), n_mels + 2), htk)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_hz[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return MelFilterbank(weights, edges)


def log_mel(clip: AudioClip, n_mels: int = N_MELS, n_fft: int = N_FFT, hop: int = HOP,
            htk: bool = False, device: str = "") -> FeatureMatrix:
    spec = power_spectrum(frame_signal(clip, n_fft, hop))
    bank = _cached_bank(n_mels, clip.sample_rate, n_fft, htk)
    return FeatureMatrix(np.log(bank.weights @ spec + LOG_FLOOR), clip.clip_id, device)


_BANKS: dict[tuple, MelFilterbank] = {}


def _cached_bank(n_mels, sample_rate, n_fft, htk) -> MelFilterbank:
    key = (n_mels, sample_rate, n_fft, htk)
    if key not in _BANKS:
        _BANKS[key] = mel_filterbank(n_mels, sample_rate, n_fft, htk=htk)
    return _BANKS[key]


def read_wav(path: str | Path, clip_id: str | None = None) -> AudioClip:
    """PCM 16/24/32-bit integer or 32-bit float WAV; channels are averaged to mono."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32.
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, rate, clip_id if clip_id is not None else Path(path).stem)
