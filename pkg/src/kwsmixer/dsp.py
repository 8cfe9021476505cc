"""Waveform-to-feature front end: STFT, log-Mel filterbank, augmentations.

All transforms are stateless; seeded randomness comes in as an explicit
``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import ContractError

LOG_FLOOR_POWER = 1e-10
LOG_FLOOR = float(np.log(LOG_FLOOR_POWER))

DEFAULT_SAMPLE_RATE = 16_000
FRAME_LEN_MS = 32
FRAME_SHIFT_MS = 10
N_MELS = 40
CLIP_SECONDS = 2.0


class ConfigurationError(ValueError):
    pass


@dataclass
class Waveform:
    """Multi-channel PCM audio, samples shaped (channels, length) in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate_hz <= 0:
            raise ContractError("sample_rate_hz must be positive")
        if self.samples.ndim != 2:
            raise ContractError("samples must be (channels, length)")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class MelFilterbank:
    matrix: np.ndarray          # (n_mels, n_fft//2 + 1)
    mel_breakpoints_hz: np.ndarray


@dataclass
class FBankFeature:
    """Per-channel log-Mel cube (channels x frames x mels)."""

    cube: np.ndarray
    frame_shift_ms: int = FRAME_SHIFT_MS
    frame_len_ms: int = FRAME_LEN_MS


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def stft(w: Waveform, win_ms: int = FRAME_LEN_MS, hop_ms: int = FRAME_SHIFT_MS,
         window_fn=hann_periodic) -> np.ndarray:
    """Complex spectrogram per channel, shape (channels, frames, n_fft//2+1).

    frames = 1 + (len - win) // hop; the FFT size is the next power of two
    at or above the window length.
    """
    sr = w.sample_rate_hz
    win = int(round(win_ms * sr / 1000))
    hop = int(round(hop_ms * sr / 1000))
    if w.n_samples < win:
        raise ContractError(
            f"waveform of {w.n_samples} samples shorter than one {win}-sample window"
        )
    n_fft = next_pow2(win)
    frames = 1 + (w.n_samples - win) // hop
    window = window_fn(win)
    idx = np.arange(win)[None, :] + hop * np.arange(frames)[:, None]
    segs = w.samples[:, idx] * window  # (C, frames, win)
    return np.fft.rfft(segs, n=n_fft, axis=-1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(n_mels: int = N_MELS, sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
                         n_fft: int = 512) -> MelFilterbank:
    """Triangular filters with centers equally spaced on the mel scale."""
    if n_mels < 2:
        raise ConfigurationError("need at least 2 mel filters")
    nyquist = sample_rate_hz / 2.0
    mels = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz = mel_to_hz(mels)
    bin_hz = sample_rate_hz / n_fft
    bins = hz / bin_hz
    if np.any(np.diff(np.round(bins[1:-1])) < 1):
        raise ConfigurationError(
            f"n_fft={n_fft} cannot separate adjacent mel centers at {sample_rate_hz} Hz"
        )
    n_bins = n_fft // 2 + 1
    fft_bin = np.arange(n_bins)
    mat = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, ctr, hi = bins[m], bins[m + 1], bins[m + 2]
        up = (fft_bin - lo) / (ctr - lo)
        down = (hi - fft_bin) / (hi - ctr)
        mat[m] = np.maximum(0.0, np.minimum(up, down))
    return MelFilterbank(matrix=mat, mel_breakpoints_hz=hz)


def log_mel_fbank(w: Waveform, n_mels: int = N_MELS,
                  clip_seconds: float = CLIP_SECONDS) -> FBankFeature:
    """Fixed-length log-Mel cube: right-pad with zeros (or trim) to the clip
    length, then stft -> power -> mel -> floored log."""
    if w.n_channels == 0:
        raise ContractError("waveform has zero channels")
    sr = w.sample_rate_hz
    target = int(round(clip_seconds * sr))
    x = w.samples
    if x.shape[1] < target:
        x = np.pad(x, ((0, 0), (0, target - x.shape[1])))
    elif x.shape[1] > target:
        x = x[:, :target]
    spec = stft(Waveform(x, sr))
    power = np.abs(spec) ** 2
    win = int(round(FRAME_LEN_MS * sr / 1000))
    fb = build_mel_filterbank(n_mels, sr, next_pow2(win))
    mel = power @ fb.matrix.T
    cube = np.log(np.maximum(mel, LOG_FLOOR_POWER))
    return FBankFeature(cube=cube)


def expected_frames(sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
                    clip_seconds: float = CLIP_SECONDS) -> int:
    win = int(round(FRAME_LEN_MS * sample_rate_hz / 1000))
    hop = int(round(FRAME_SHIFT_MS * sample_rate_hz / 1000))
    return 1 + (int(round(clip_seconds * sample_rate_hz)) - win) // hop


def random_time_shift(w: Waveform, rng: np.random.Generator,
                      max_shift_ms: float = 100.0) -> Waveform:
    """Shift every channel by one uniform draw in [-max, +max] ms, zero-filling
    the vacated end."""
    shift_ms = rng.uniform(-max_shift_ms, max_shift_ms)
    n = int(round(shift_ms * w.sample_rate_hz / 1000))
    if n == 0:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    out = np.zeros_like(w.samples)
    if n > 0:
        out[:, n:] = w.samples[:, :-n]
    else:
        out[:, :n] = w.samples[:, -n:]
    return Waveform(out, w.sample_rate_hz)


def spec_augment(f: FBankFeature, rng: np.random.Generator,
                 freq_param: int = 25, time_param: int = 7) -> FBankFeature:
    """One frequency mask and one time mask, widths uniform in [0, param],
    identical across audio channels; masked cells get the log floor."""
    cube = f.cube.copy()
    _, n_frames, n_mels = cube.shape
    if freq_param > n_mels:
        raise ContractError(f"freq_param {freq_param} exceeds {n_mels} mel bins")
    if time_param > n_frames:
        raise ContractError(f"time_param {time_param} exceeds {n_frames} frames")
    fw = int(rng.integers(0, freq_param + 1))
    f0 = int(rng.integers(0, n_mels - fw + 1)) if fw else 0
    tw = int(rng.integers(0, time_param + 1))
    t0 = int(rng.integers(0, n_frames - tw + 1)) if tw else 0
    if fw:
        cube[:, :, f0:f0 + fw] = LOG_FLOOR
    if tw:
        cube[:, t0:t0 + tw, :] = LOG_FLOOR
    return FBankFeature(cube=cube, frame_shift_ms=f.frame_shift_ms,
                        frame_len_ms=f.frame_len_ms)
