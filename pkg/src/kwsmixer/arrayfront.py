"""Multi-channel preprocessing: WPE dereverberation, mask-based MVDR
beamforming at fixed look directions, and multi-look stacking.

Everything here is deterministic; no randomness enters this module.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dsp import Waveform, hann_periodic
from .numeric import ContractError

SPEED_OF_SOUND = 343.0
DEFAULT_SPACING_M = 0.04
DEFAULT_LOOKS_DEG = (10.0, 90.0, 170.0)

BEAM_WIN = 512
BEAM_HOP = 128  # 75% overlap for COLA-consistent resynthesis


class NumericError(RuntimeError):
    pass


@dataclass
class ArrayGeometry:
    """1-D linear array; element positions in meters along the array axis."""

    positions_m: np.ndarray
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        self.positions_m = np.asarray(self.positions_m, dtype=np.float64)
        if self.positions_m.size < 2:
            raise ContractError("array needs at least 2 elements")
        if not np.all(np.diff(self.positions_m) > 0):
            raise ContractError("element positions must be strictly increasing")

    @property
    def n_mics(self) -> int:
        return self.positions_m.size

    @classmethod
    def uniform(cls, n: int, spacing_m: float = DEFAULT_SPACING_M) -> "ArrayGeometry":
        return cls(np.arange(n) * spacing_m)


@dataclass
class LookDirection:
    """Azimuth in degrees from the array axis, endfire 0 to endfire 180."""

    azimuth_deg: float

    def __post_init__(self):
        if not 0.0 <= self.azimuth_deg <= 180.0:
            raise ContractError(f"azimuth {self.azimuth_deg} outside [0, 180]")


@dataclass
class TFMask:
    """Speech/noise weights per (frame, bin); the two always sum to one."""

    speech: np.ndarray

    def __post_init__(self):
        self.speech = np.clip(np.asarray(self.speech, dtype=np.float64), 0.0, 1.0)

    @property
    def noise(self) -> np.ndarray:
        return 1.0 - self.speech


def stft_frames(x: np.ndarray, win: int = BEAM_WIN, hop: int = BEAM_HOP) -> np.ndarray:
    """(C, L) time signal -> (C, T, win//2+1) complex frames, Hann analysis."""
    c, n = x.shape
    if n < win:
        raise ContractError(f"signal of {n} samples shorter than window {win}")
    frames = 1 + (n - win) // hop
    window = hann_periodic(win)
    idx = np.arange(win)[None, :] + hop * np.arange(frames)[:, None]
    return np.fft.rfft(x[:, idx] * window, n=win, axis=-1)


def istft_frames(spec: np.ndarray, n_samples: int, win: int = BEAM_WIN,
                 hop: int = BEAM_HOP) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_frames`."""
    c, frames, _ = spec.shape
    window = hann_periodic(win)
    segs = np.fft.irfft(spec, n=win, axis=-1) * window
    length = win + hop * (frames - 1)
    out = np.zeros((c, length))
    wsum = np.zeros(length)
    for t in range(frames):
        out[:, t * hop : t * hop + win] += segs[:, t]
        wsum[t * hop : t * hop + win] += window**2
    # only normalize where the synthesis windows give real support; edge
    # samples with negligible window sum are zeroed instead of amplified
    good = wsum > 1e-3 * wsum.max()
    out[:, good] /= wsum[good]
    out[:, ~good] = 0.0
    if length < n_samples:
        out = np.pad(out, ((0, 0), (0, n_samples - length)))
    return out[:, :n_samples]


def steering_vector(direction: LookDirection, geom: ArrayGeometry,
                    freq_hz: float) -> np.ndarray:
    """Far-field plane-wave phases, referenced to element 0; unit modulus."""
    p = geom.positions_m - geom.positions_m[0]
    tau = p * np.cos(np.deg2rad(direction.azimuth_deg)) / geom.speed_of_sound
    return np.exp(-2j * np.pi * freq_hz * tau)


def estimate_covariances(stft_multi: np.ndarray, mask: TFMask):
    """Mask-weighted spatial covariances per bin.

    stft_multi is (C, T, F); returns (R_speech, R_noise, degenerate_bins)
    with R_* shaped (F, C, C). Bins whose mask weights sum to zero fall
    back to identity and are flagged.
    """
    c, t, f = stft_multi.shape
    if mask.speech.shape != (t, f):
        raise ContractError(
            f"mask {mask.speech.shape} does not match spectrogram frames ({t},{f})"
        )
    x = np.transpose(stft_multi, (2, 1, 0))  # (F, T, C)
    degenerate = {"speech": [], "noise": []}
    out = []
    for name, weights in (("speech", mask.speech), ("noise", mask.noise)):
        num = np.einsum("ft,fti,ftj->fij", weights.T, x, x.conj(), optimize=True)
        den = weights.T.sum(axis=1)
        R = np.empty((f, c, c), dtype=complex)
        for k in range(f):
            if den[k] <= 0:
                R[k] = np.eye(c)
                degenerate[name].append(k)
            else:
                R[k] = num[k] / den[k]
        R = 0.5 * (R + np.conj(np.transpose(R, (0, 2, 1))))
        out.append(R)
    return out[0], out[1], degenerate


def diagonal_loading(R: np.ndarray) -> np.ndarray:
    """1e-6 x trace/channels added to the diagonal of each bin's covariance."""
    c = R.shape[-1]
    load = 1e-6 * np.real(np.trace(R, axis1=-2, axis2=-1)) / c
    return R + np.maximum(load, 1e-12)[..., None, None] * np.eye(c)


def mvdr_weights(R_noise: np.ndarray, d: np.ndarray, bin_index: int | None = None) -> np.ndarray:
    """w = R^-1 d / (d^H R^-1 d); unit response toward the steering vector."""
    try:
        rinv_d = np.linalg.solve(R_noise, d)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"MVDR solve failed at bin {bin_index}: {e}") from e
    denom = np.vdot(d, rinv_d)
    if abs(denom) < 1e-30:
        raise NumericError(f"MVDR denominator vanished at bin {bin_index}")
    return rinv_d / denom


def wpe_dereverb(stft_multi: np.ndarray, taps: int = 10, delay: int = 3,
                 iterations: int = 3, eps: float = 1e-10) -> np.ndarray:
    """Iterative long-term linear prediction per frequency bin.

    iterations=0 returns the input untouched (bit-identical).
    """
    if taps < 1 or delay < 1 or iterations < 0:
        raise ContractError("need taps >= 1, delay >= 1, iterations >= 0")
    if iterations == 0:
        return stft_multi.copy()
    c, t, f = stft_multi.shape
    out = np.empty_like(stft_multi)
    k = c * taps
    for fb in range(f):
        x = stft_multi[:, :, fb]  # (C, T)
        # stacked delayed frames: rows are taps x channels, columns frames
        xt = np.zeros((k, t), dtype=complex)
        for tap in range(taps):
            shift = delay + tap
            if shift < t:
                xt[tap * c : (tap + 1) * c, shift:] = x[:, : t - shift]
        z = x
        for _ in range(iterations):
            lam = np.mean(np.abs(z) ** 2, axis=0)  # (T,)
            # relative floor: silent frames must not dominate the weighting
            lam = np.maximum(lam, np.maximum(eps, 1e-6 * lam.max()))
            xw = xt / lam
            A = xw @ xt.conj().T
            B = xw @ x.conj().T
            A += 1e-8 * np.trace(A).real / k * np.eye(k)
            try:
                G = np.linalg.solve(A, B)  # (K, C)
            except np.linalg.LinAlgError:
                warnings.warn(f"WPE normal equations singular at bin {fb}; "
                              "increasing regularization")
                G = np.linalg.solve(A + 1e-4 * np.eye(k), B)
            z = x - G.conj().T @ xt
        out[:, :, fb] = z
    return out


def oracle_mask(stft_clean_ref: np.ndarray, stft_mix_ref: np.ndarray) -> TFMask:
    """Wiener-style speech presence from a known clean component (test mode)."""
    s = np.abs(stft_clean_ref) ** 2
    n = np.abs(stft_mix_ref - stft_clean_ref) ** 2
    return TFMask(s / np.maximum(s + n, 1e-20))


def heuristic_mask(stft_multi: np.ndarray, floor_quantile: float = 0.2,
                   over: float = 2.0) -> TFMask:
    """SNR-threshold speech mask from a per-bin noise-floor estimate."""
    p = np.mean(np.abs(stft_multi) ** 2, axis=0)  # (T, F)
    floor = np.quantile(p, floor_quantile, axis=0, keepdims=True)
    snr = p / np.maximum(over * floor, 1e-20)
    return TFMask(snr / (1.0 + snr))


@dataclass
class FrontEndConfig:
    geometry: ArrayGeometry = field(default_factory=lambda: ArrayGeometry.uniform(6))
    looks_deg: tuple = DEFAULT_LOOKS_DEG
    use_wpe: bool = False
    wpe_taps: int = 10
    wpe_delay: int = 3
    wpe_iterations: int = 3
    mask_mode: str = "heuristic"  # or "oracle"


def beamform_looks(w: Waveform, cfg: FrontEndConfig,
                   clean_ref: np.ndarray | None = None) -> list[np.ndarray]:
    """One time-domain beam output per configured look direction."""
    sr = w.sample_rate_hz
    spec = stft_frames(w.samples)
    if cfg.use_wpe:
        spec = wpe_dereverb(spec, cfg.wpe_taps, cfg.wpe_delay, cfg.wpe_iterations)
    if cfg.mask_mode == "oracle":
        if clean_ref is None:
            raise ContractError("oracle mask mode requires a clean reference")
        ref_spec = stft_frames(clean_ref.reshape(1, -1))[0]
        mask = oracle_mask(ref_spec, spec[0])
    else:
        mask = heuristic_mask(spec)
    _, rn, _ = estimate_covariances(spec, mask)
    rn = diagonal_loading(rn)
    n_bins = spec.shape[2]
    freqs = np.arange(n_bins) * sr / BEAM_WIN
    beams = []
    for az in cfg.looks_deg:
        look = LookDirection(az)
        y = np.empty(spec.shape[1:], dtype=complex)  # (T, F)
        for fb in range(n_bins):
            d = steering_vector(look, cfg.geometry, freqs[fb])
            wv = mvdr_weights(rn[fb], d, bin_index=fb)
            y[:, fb] = wv.conj() @ spec[:, :, fb]
        beams.append(istft_frames(y[None], w.n_samples)[0])
    return beams


def multi_look_stack(w: Waveform, cfg: FrontEndConfig | None = None,
                     clean_ref: np.ndarray | None = None) -> Waveform:
    """6-channel array in, 4 channels out: three MVDR beams plus raw ch0."""
    cfg = cfg or FrontEndConfig()
    if w.n_channels != 6:
        raise ContractError(f"multi-look front end expects 6 channels, got {w.n_channels}")
    if len(cfg.looks_deg) != 3:
        raise ContractError("multi-look stacking expects exactly 3 look directions")
    beams = beamform_looks(w, cfg, clean_ref=clean_ref)
    out = np.stack(beams + [w.samples[0]])
    return Waveform(out, w.sample_rate_hz)
