"""WAV files, dataset manifests, synthetic multi-channel scenes, and
checkpoint persistence.

Formats are deliberately strict: every reader accounts for each byte and
rejects trailing garbage rather than guessing.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .arrayfront import ArrayGeometry
from .dsp import DEFAULT_SAMPLE_RATE, Waveform
from .numeric import ContractError


class ParseError(ValueError):
    """Malformed file content. The message names the byte offset or line."""


# mic counts per recording condition
EXPECTED_CHANNELS = {"near": 1, "mid": 2, "far": 6}

PCM16_SCALE = 32768.0


# ---------------------------------------------------------------- WAV I/O

def read_wav(path) -> Waveform:
    """Read a RIFF WAV file holding 16-bit PCM or 32-bit float samples.

    PCM16 values are scaled by 1/32768, so full positive scale maps to
    1 - 2**-15. Samples come back as (channels, length).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF":
        raise ParseError(f"{path}: missing RIFF tag at offset 0")
    riff_size = struct.unpack_from("<I", raw, 4)[0]
    if raw[8:12] != b"WAVE":
        raise ParseError(f"{path}: missing WAVE tag at offset 8")
    if 8 + riff_size != len(raw):
        raise ParseError(
            f"{path}: RIFF size {riff_size} at offset 4 does not match "
            f"file length {len(raw)}"
        )
    fmt = None
    data = None
    pos = 12
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise ParseError(f"{path}: truncated chunk header at offset {pos}")
        tag = raw[pos:pos + 4]
        size = struct.unpack_from("<I", raw, pos + 4)[0]
        body = raw[pos + 8:pos + 8 + size]
        if len(body) != size:
            raise ParseError(f"{path}: chunk {tag!r} at offset {pos} claims "
                             f"{size} bytes but the file ends early")
        if tag == b"fmt ":
            if size < 16:
                raise ParseError(f"{path}: fmt chunk too short at offset {pos}")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif tag == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None:
        raise ParseError(f"{path}: no fmt chunk")
    if data is None:
        raise ParseError(f"{path}: no data chunk")
    audio_format, n_channels, sample_rate, _, _, bits = fmt
    if n_channels < 1:
        raise ParseError(f"{path}: zero channels in fmt chunk")
    if audio_format == 1 and bits == 16:
        flat = np.frombuffer(data, dtype="<i2").astype(np.float64) / PCM16_SCALE
    elif audio_format == 3 and bits == 32:
        flat = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise ParseError(f"{path}: unsupported codec (format={audio_format}, "
                         f"bits={bits}); only PCM16 and float32 are handled")
    if flat.size % n_channels:
        raise ParseError(f"{path}: data chunk length not divisible by "
                         f"{n_channels} channels")
    samples = flat.reshape(-1, n_channels).T.copy()
    return Waveform(samples, sample_rate)


def write_wav(w: Waveform, path, codec: str = "pcm16") -> None:
    """Write (channels, length) samples as interleaved PCM16 or float32."""
    samples = np.asarray(w.samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ContractError("waveform samples must be (channels, length)")
    inter = samples.T.reshape(-1)
    if codec == "pcm16":
        audio_format, bits = 1, 16
        pcm = np.clip(np.round(inter * PCM16_SCALE), -32768, 32767)
        payload = pcm.astype("<i2").tobytes()
    elif codec == "float32":
        audio_format, bits = 3, 32
        payload = inter.astype("<f4").tobytes()
    else:
        raise ContractError(f"unknown codec {codec!r}")
    n_channels = samples.shape[0]
    block = n_channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", audio_format, n_channels,
                            w.sample_rate_hz, w.sample_rate_hz * block,
                            block, bits)
    pad = b"\x00" if len(payload) & 1 else b""
    body = (b"WAVE"
            + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
            + b"data" + struct.pack("<I", len(payload)) + payload + pad)
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# --------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    audio: tuple[str, ...]  # one multi-channel file or a per-channel list
    label: int
    field_tag: str

    @property
    def expected_channels(self) -> int:
        return EXPECTED_CHANNELS[self.field_tag]


def load_manifest(path, check_paths: bool = True) -> list[ManifestEntry]:
    """Parse a line-delimited JSON manifest.

    Each line is an object with fields id, audio, label, field. Audio paths
    are resolved relative to the manifest's directory.
    """
    base = Path(path).parent
    entries = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})")
            if not isinstance(rec, dict):
                raise ParseError(f"{path}:{lineno}: record must be an object")
            for key in ("id", "audio", "label", "field"):
                if key not in rec:
                    raise ParseError(f"{path}:{lineno}: missing field {key!r}")
            uid = rec["id"]
            if not isinstance(uid, str) or not uid:
                raise ParseError(f"{path}:{lineno}: id must be a nonempty string")
            if uid in seen:
                raise ParseError(f"{path}:{lineno}: duplicate id {uid!r}")
            seen.add(uid)
            if rec["label"] not in (0, 1):
                raise ParseError(f"{path}:{lineno}: label must be 0 or 1, "
                                 f"got {rec['label']!r}")
            tag = rec["field"]
            if tag not in EXPECTED_CHANNELS:
                raise ParseError(f"{path}:{lineno}: field must be one of "
                                 f"{sorted(EXPECTED_CHANNELS)}, got {tag!r}")
            audio = rec["audio"]
            paths = [audio] if isinstance(audio, str) else list(audio)
            if not paths or not all(isinstance(p, str) for p in paths):
                raise ParseError(f"{path}:{lineno}: audio must be a path or a "
                                 "list of paths")
            resolved = tuple(str(base / p) for p in paths)
            if check_paths:
                for p in resolved:
                    if not Path(p).is_file():
                        raise ParseError(f"{path}:{lineno}: audio file not "
                                         f"found: {p}")
            entries.append(ManifestEntry(uid, resolved, int(rec["label"]), tag))
    return entries


def write_manifest(entries, path) -> None:
    import os

    base = Path(path).parent
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            audio = [os.path.relpath(p, base) for p in e.audio]
            rec = {"id": e.id, "audio": audio[0] if len(audio) == 1 else audio,
                   "label": int(e.label), "field": e.field_tag}
            fh.write(json.dumps(rec) + "\n")


def load_entry_audio(entry: ManifestEntry) -> Waveform:
    """Read an entry's audio and enforce the channel count for its field tag."""
    parts = [read_wav(p) for p in entry.audio]
    rates = {p.sample_rate_hz for p in parts}
    if len(rates) != 1:
        raise ParseError(f"{entry.id}: mixed sample rates {sorted(rates)}")
    samples = np.concatenate([p.samples for p in parts], axis=0)
    if samples.shape[0] != entry.expected_channels:
        raise ParseError(
            f"{entry.id}: {samples.shape[0]} channels but field "
            f"{entry.field_tag!r} expects {entry.expected_channels}"
        )
    return Waveform(samples, rates.pop())


# ---------------------------------------------------------- scene synthesis

@dataclass
class SceneConfig:
    """A single synthetic far-field scene.

    The keyword is a seeded two-syllable tone sweep; interferers are
    band-limited babble-like noise from other azimuths; diffuse noise is
    mixed to the target SNR measured against the direct-path keyword.
    """

    seed: int
    keyword_present: bool = True
    source_azimuth_deg: float = 90.0
    source_distance_m: float = 3.0
    interferer_azimuths_deg: tuple[float, ...] = ()
    interferer_gain: float = 0.5
    snr_db: float = 10.0
    reverb_rt_s: float = 0.0  # tail decay time; 0 disables the tail
    reverb_level: float = 0.3
    duration_s: float = 1.0
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    geometry: ArrayGeometry | None = None
    occluded_mics: tuple[int, ...] = ()

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ContractError("SNR must be finite")
        if not 0.0 <= self.source_azimuth_deg <= 180.0:
            raise ContractError("azimuth must lie in [0, 180] degrees")
        for az in self.interferer_azimuths_deg:
            if not 0.0 <= az <= 180.0:
                raise ContractError("interferer azimuth out of [0, 180]")
        if self.duration_s <= 0:
            raise ContractError("duration must be positive")
        if self.geometry is None:
            self.geometry = ArrayGeometry.uniform(6)
        for mic in self.occluded_mics:
            if not 0 <= mic < self.geometry.n_mics:
                raise ContractError(f"occluded mic index {mic} out of range")


def keyword_template(rng: np.random.Generator, sr: int,
                     duration_s: float = 0.5) -> np.ndarray:
    """Two-syllable tone sweep with slight per-instance jitter.

    Syllable one sweeps upward, syllable two downward, separated by a short
    gap; a second harmonic gives it some spectral texture.
    """
    n = int(round(duration_s * sr))
    half = n // 2
    gap = int(0.04 * sr)
    out = np.zeros(n)
    jitter = rng.uniform(0.95, 1.05, size=4)
    specs = [(0, half - gap, 500.0 * jitter[0], 1100.0 * jitter[1]),
             (half, n, 1300.0 * jitter[2], 600.0 * jitter[3])]
    for start, stop, f0, f1 in specs:
        t = np.arange(stop - start) / sr
        dur = max(t[-1], 1e-6)
        phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / dur * t**2)
        env = np.sin(np.pi * np.arange(stop - start) / (stop - start)) ** 0.5
        out[start:stop] = env * (np.sin(phase) + 0.3 * np.sin(2 * phase))
    return out * 0.5


def _babble(rng: np.random.Generator, n: int) -> np.ndarray:
    """Low-passed noise with a slow amplitude modulation, vaguely speech-like."""
    x = rng.normal(size=n + 16)
    kernel = np.hanning(17)
    x = np.convolve(x, kernel / kernel.sum(), mode="valid")[:n]
    mod = 0.5 + 0.5 * np.abs(np.convolve(rng.normal(size=n), np.ones(800) / 800,
                                         mode="same"))
    x = x * mod
    return x / (np.sqrt(np.mean(x**2)) + 1e-12)


def _spatialize(sig: np.ndarray, azimuth_deg: float, geom: ArrayGeometry,
                sr: int) -> np.ndarray:
    """Delay a plane wave onto every mic via frequency-domain fractional delay."""
    n = len(sig)
    taus = ((geom.positions_m - geom.positions_m[0])
            * np.cos(np.deg2rad(azimuth_deg)) / geom.speed_of_sound)
    spec = np.fft.rfft(sig)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    out = np.empty((len(taus), n))
    for i, tau in enumerate(taus):
        out[i] = np.fft.irfft(spec * np.exp(-2j * np.pi * freqs * tau), n=n)
    return out


def _reverb_tail(rng: np.random.Generator, sigs: np.ndarray, rt_s: float,
                 level: float, sr: int) -> np.ndarray:
    """Add an exponentially decaying diffuse tail per channel.

    The tail is drawn from rng whether or not it is applied, so scenes with
    and without reverb stay aligned on later random draws.
    """
    c, n = sigs.shape
    ir_len = max(int(3 * rt_s * sr), 1)
    tails = rng.normal(size=(c, ir_len))
    if rt_s <= 0:
        return sigs
    start = int(0.005 * sr)
    decay = np.exp(-3.0 * np.arange(ir_len) / (rt_s * sr))
    out = sigs.copy()
    for ch in range(c):
        ir = level * tails[ch] * decay
        echo = signal.fftconvolve(sigs[ch], ir)[:n - start]
        out[ch, start:] += echo
    return out


def synthesize_scene(cfg: SceneConfig) -> tuple[Waveform, int, np.ndarray]:
    """Build one 6-channel scene; returns (waveform, label, clean reference).

    The clean reference is the direct-path keyword at mic 0 (used for oracle
    masks). Every random quantity is drawn in a fixed order regardless of
    keyword presence, so the negative scene for a seed equals the positive
    scene minus the keyword component.
    """
    sr = cfg.sample_rate_hz
    n = int(round(cfg.duration_s * sr))
    rng = np.random.default_rng(cfg.seed)
    geom = cfg.geometry

    kw = keyword_template(rng, sr)
    kw = kw[:n]
    offset = int(rng.integers(0, max(n - len(kw), 0) + 1))
    dry = np.zeros(n)
    dry[offset:offset + len(kw)] = kw
    gain = 1.0 / max(cfg.source_distance_m, 0.1)
    kw_direct = gain * _spatialize(dry, cfg.source_azimuth_deg, geom, sr)
    clean_ref = kw_direct[0].copy()
    kw_component = _reverb_tail(rng, kw_direct, cfg.reverb_rt_s,
                                cfg.reverb_level, sr)

    interference = np.zeros((geom.n_mics, n))
    for az in cfg.interferer_azimuths_deg:
        src = cfg.interferer_gain * gain * _babble(rng, n)
        spat = _spatialize(src, az, geom, sr)
        interference += _reverb_tail(rng, spat, cfg.reverb_rt_s,
                                     cfg.reverb_level, sr)

    noise = rng.normal(size=(geom.n_mics, n))
    sig_power = np.mean(clean_ref**2)
    noise_power = np.mean(noise**2)
    target = sig_power / 10 ** (cfg.snr_db / 10)
    noise *= np.sqrt(target / noise_power)

    mix = interference + noise
    if cfg.keyword_present:
        mix = mix + kw_component
    if cfg.occluded_mics:
        # a blocked element hears only its own self-noise, matched in level
        # so occlusion is not detectable from channel energy alone; drawn
        # from a separate stream so unoccluded scenes are unaffected
        occ = np.random.default_rng([cfg.seed, 1013])
        for mic in cfg.occluded_mics:
            rms = float(np.sqrt(np.mean(mix[mic] ** 2))) or 1.0
            mix[mic] = occ.normal(0.0, rms, size=n)
    label = 1 if cfg.keyword_present else 0
    return Waveform(mix, sr), label, clean_ref


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"KWSM"
CKPT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"),
           "<i8": np.dtype("<i8")}


def _ckpt_body(meta: dict, tensors: dict) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    meta_blob = json.dumps(meta).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_blob)))
    parts.append(meta_blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = arr.dtype.newbyteorder("<").str[1:]
        dtype_str = "<" + code
        if dtype_str not in _DTYPES:
            raise ContractError(f"tensor {name!r} has unsupported dtype "
                                f"{arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(dtype_str.encode("ascii"))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = np.ascontiguousarray(arr).astype(dtype_str, copy=False).tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    return b"".join(parts)


def save_checkpoint(state: dict, path) -> None:
    """Serialize {"meta": json-able dict, "tensors": {name: array}}.

    Tensors roundtrip bitwise; a crc32 trailer guards the whole file.
    """
    body = _ckpt_body(state["meta"], state["tensors"])
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic at offset 0)")
    body, trailer = raw[:-4], raw[-4:]
    if struct.unpack("<I", trailer)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise ParseError(f"{path}: checksum mismatch, file is corrupt")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CKPT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    (meta_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_tensors,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dtype_str = raw[pos:pos + 3].decode("ascii")
        pos += 3
        if dtype_str not in _DTYPES:
            raise ParseError(f"{path}: tensor {name!r} has unknown dtype "
                             f"{dtype_str!r} at offset {pos - 3}")
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype_str].itemsize
        if nbytes != expected:
            raise ParseError(f"{path}: tensor {name!r} length prefix {nbytes} "
                             f"disagrees with shape {shape} at offset {pos - 8}")
        if pos + nbytes > len(body):
            raise ParseError(f"{path}: tensor {name!r} payload runs past end "
                             f"of file at offset {pos}")
        tensors[name] = np.frombuffer(
            raw[pos:pos + nbytes], dtype=_DTYPES[dtype_str]).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise ParseError(f"{path}: {len(body) - pos} trailing bytes after the "
                         f"last tensor at offset {pos}")
    return {"meta": meta, "tensors": tensors}


def rng_state_to_meta(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def rng_from_meta(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng
