"""Command-line entry points: corpus simulation, training, evaluation,
single-file prediction, beamforming, dereverberation, histogram export.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .arrayfront import FrontEndConfig, multi_look_stack, stft_frames, \
    istft_frames, wpe_dereverb
from .centroid import KeywordCentroids
from .data import (ManifestEntry, SceneConfig, load_entry_audio, load_manifest,
                   read_wav, synthesize_scene, write_manifest, write_wav)
from .dsp import Waveform, log_mel_fbank
from .evaluation import export_histograms, evaluate
from .model import (MixerModel, config_to_dict, reference_config,
                    reference_config_names)
from .numeric import ContractError
from .trainer import (Example, TrainerConfig, adapt_channels, evaluate_model,
                      model_from_checkpoint, normalize_cube, train)

SPLIT_SEED_OFFSETS = {"train": 0, "dev": 1_000_000, "eval": 2_000_000}
FIELD_CHANNELS = {"near": 1, "mid": 2, "far": 6}


def echo_config(label: str, cfg: dict, out_dir: Path | None = None):
    text = json.dumps({label: cfg}, indent=2, default=str)
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "config.json", "a", encoding="utf-8") as fh:
            fh.write(text + "\n")


# ----------------------------------------------------------------- simulate

def scene_for(split: str, field_tag: str, index: int, base_seed: int,
              snr_lo: float, snr_hi: float, duration_s: float):
    """Deterministic per-item scene parameters; split seed ranges disjoint."""
    seed = base_seed + SPLIT_SEED_OFFSETS[split] + index
    knobs = np.random.default_rng([seed, 424242])
    snr = float(knobs.uniform(snr_lo, snr_hi))
    azimuth = float(knobs.uniform(20.0, 160.0))
    n_interferers = int(knobs.integers(1, 3))
    intf = tuple(float(a) for a in knobs.uniform(0.0, 180.0, n_interferers))
    label = index % 2 == 0
    if field_tag == "far":
        cfg = SceneConfig(seed=seed, keyword_present=label,
                          source_azimuth_deg=azimuth, source_distance_m=float(
                              knobs.uniform(3.0, 5.0)),
                          interferer_azimuths_deg=intf, snr_db=snr,
                          reverb_rt_s=0.2, duration_s=duration_s)
    elif field_tag == "mid":
        cfg = SceneConfig(seed=seed, keyword_present=label,
                          source_azimuth_deg=azimuth, source_distance_m=float(
                              knobs.uniform(1.0, 1.5)),
                          interferer_azimuths_deg=intf[:1], snr_db=snr + 10.0,
                          reverb_rt_s=0.1, duration_s=duration_s)
    elif field_tag == "near":
        cfg = SceneConfig(seed=seed, keyword_present=label,
                          source_azimuth_deg=90.0, source_distance_m=0.3,
                          snr_db=snr + 20.0, duration_s=duration_s)
    else:
        raise ContractError(f"unknown field tag {field_tag!r}")
    return cfg


def build_corpus(out_dir: Path, counts: dict, fields, base_seed: int,
                 snr_lo: float, snr_hi: float, duration_s: float,
                 force: bool = False) -> dict:
    out_dir = Path(out_dir)
    leftovers = [p for p in out_dir.iterdir()
                 if p.name != "config.json"] if out_dir.exists() else []
    if leftovers and not force:
        raise ContractError(f"{out_dir} is not empty; pass --force to reuse it")
    written = {}
    for split, n in counts.items():
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for field_tag in fields:
            n_ch = FIELD_CHANNELS[field_tag]
            for i in range(n):
                cfg = scene_for(split, field_tag, i, base_seed, snr_lo,
                                snr_hi, duration_s)
                w, label, _ = synthesize_scene(cfg)
                uid = f"{split}-{field_tag}-{i:05d}"
                wav_path = split_dir / f"{uid}.wav"
                write_wav(Waveform(w.samples[:n_ch], w.sample_rate_hz),
                          wav_path, codec="float32")
                entries.append(ManifestEntry(uid, (str(wav_path),), label,
                                             field_tag))
        write_manifest(entries, split_dir / "manifest.jsonl")
        written[split] = len(entries)
    return written


def cmd_simulate(args) -> int:
    counts = {"train": args.n_train, "dev": args.n_dev, "eval": args.n_eval}
    fields = args.fields.split(",")
    echo_config("simulate", {"out": str(args.out), "seed": args.seed,
                             "counts": counts, "fields": fields,
                             "snr_db": [args.snr_lo, args.snr_hi],
                             "duration_s": args.duration}, Path(args.out))
    written = build_corpus(Path(args.out), counts, fields, args.seed,
                           args.snr_lo, args.snr_hi, args.duration,
                           force=args.force)
    for split, n in written.items():
        print(f"{split}: {n} scenes")
    return 0


# -------------------------------------------------------------------- train

def features_for_entries(entries) -> list:
    out = []
    for e in entries:
        w = load_entry_audio(e)
        cube = log_mel_fbank(w).cube.astype(np.float32)
        out.append(Example(cube, e.label))
    return out


def load_split(corpus: Path, split: str):
    return load_manifest(Path(corpus) / split / "manifest.jsonl")


def cmd_train(args) -> int:
    model_cfg = reference_config(args.model)
    if args.channels is not None:
        model_cfg = reference_config(args.model, n_channels=args.channels)
    model = MixerModel(model_cfg, np.random.default_rng(args.seed))
    centroids = KeywordCentroids.zeros(model_cfg.latent_dim)

    train_entries = load_split(args.corpus, "train")
    dev_entries = load_split(args.corpus, "dev")
    by_field = {}
    for e in train_entries:
        by_field.setdefault(e.field_tag, []).append(e)
    epoch_list = [int(x) for x in args.epochs.split(",")]
    order = [t for t in ("near", "mid", "far") if t in by_field]
    if len(epoch_list) == 1:
        epoch_list = epoch_list * len(order)
    if len(epoch_list) != len(order):
        raise ContractError(f"--epochs needs {len(order)} entries for phases "
                            f"{order}")
    phases = tuple(zip(order, epoch_list))

    tcfg = TrainerConfig(batch_size=args.batch_size, lr0=args.lr,
                         phases=phases, seed=args.seed, augment=not args.no_augment)
    out_dir = Path(args.out)
    echo_config("train", {"model": config_to_dict(model_cfg),
                          "trainer": asdict(tcfg), "corpus": str(args.corpus),
                          "resume": args.resume}, out_dir)
    print(f"parameter count: {model.parameter_count()}")

    datasets = {tag: features_for_entries(v) for tag, v in by_field.items()}
    dev_set = features_for_entries(dev_entries)
    res = train(model, centroids, datasets, dev_set, tcfg, out_dir,
                resume_from=args.resume, log_print=print)
    print("final dev:", res["last_report"].as_text())
    print(f"checkpoints: {out_dir / 'best.ckpt'} {out_dir / 'last.ckpt'}")
    return 0


# ------------------------------------------------------ eval / predict / hist

def _load_model(checkpoint):
    model, centroids, meta = model_from_checkpoint(checkpoint)
    if model.config.centroid_aware and centroids is None:
        raise ContractError("checkpoint lacks centroid state for an aware head")
    return model, centroids, meta


def _check_channels(model, entries, tile: bool):
    if tile:
        return
    for e in entries:
        if e.expected_channels != model.config.n_channels:
            raise ContractError(
                f"entry {e.id}: {e.expected_channels} channels but the model "
                f"expects {model.config.n_channels}; pass --tile-channels to "
                "adapt")


def cmd_eval(args) -> int:
    model, centroids, _ = _load_model(args.checkpoint)
    entries = load_manifest(args.manifest)
    _check_channels(model, entries, args.tile_channels)
    echo_config("eval", {"checkpoint": str(args.checkpoint),
                         "manifest": str(args.manifest),
                         "threshold": args.threshold})
    examples = features_for_entries(entries)
    fwd_cents = centroids if model.config.centroid_aware else None
    rep = evaluate_model(model, examples, fwd_cents, threshold=args.threshold)
    print(rep.as_text())
    if args.out:
        Path(args.out).write_text(rep.as_record() + "\n")
    if args.export_hist:
        if centroids is None:
            raise ContractError("histogram export needs centroid state")
        dists = []
        labels = []
        for e in examples:
            x = normalize_cube(adapt_channels(e.features,
                                              model.config.n_channels))
            _, latent = model.forward(x[None].astype(model.config.np_dtype),
                                      fwd_cents)
            d0 = np.linalg.norm(latent.data[0] - centroids.v0)
            d1 = np.linalg.norm(latent.data[0] - centroids.v1)
            dists.append([d0, d1])
            labels.append(e.label)
        export_histograms(np.array(dists), np.array(labels), args.export_hist)
        print(f"histograms written to {args.export_hist}")
    return 0


def cmd_predict(args) -> int:
    model, centroids, _ = _load_model(args.checkpoint)
    w = read_wav(args.audio)
    cube = log_mel_fbank(w).cube.astype(np.float32)
    if cube.shape[0] != model.config.n_channels and not args.tile_channels:
        raise ContractError(f"{args.audio}: {cube.shape[0]} channels but the "
                            f"model expects {model.config.n_channels}")
    x = normalize_cube(adapt_channels(cube, model.config.n_channels))
    fwd_cents = centroids if model.config.centroid_aware else None
    probs, _ = model.forward(x[None].astype(model.config.np_dtype), fwd_cents)
    p = float(probs.data[0, 1])
    print(f"p(keyword) = {p:.6f}")
    return 0


# ------------------------------------------------------- beamform / wpe

def cmd_beamform(args) -> int:
    w = read_wav(args.audio)
    looks = tuple(float(x) for x in args.looks.split(","))
    cfg = FrontEndConfig(looks_deg=looks, use_wpe=args.wpe)
    echo_config("beamform", {"in": str(args.audio), "out": str(args.out),
                             "looks_deg": list(looks), "wpe": args.wpe})
    out = multi_look_stack(w, cfg=cfg)
    write_wav(out, args.out, codec="float32")
    print(f"wrote {out.n_channels} channels to {args.out}")
    return 0


def cmd_wpe(args) -> int:
    w = read_wav(args.audio)
    spec = stft_frames(w.samples)
    out = wpe_dereverb(spec, taps=args.taps, delay=args.delay,
                       iterations=args.iterations)
    y = istft_frames(out, w.n_samples)
    write_wav(Waveform(y, w.sample_rate_hz), args.out, codec="float32")
    print(f"wrote {args.out}")
    return 0


# ----------------------------------------------------------------- plumbing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kwsmixer",
                                 description=__doc__.strip().splitlines()[0])
    ap.add_argument("--threads", type=int, default=None,
                    help="cap BLAS threads (best effort via env)")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic corpus")
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--force", action="store_true")
    sim.add_argument("--n-train", type=int, default=2000)
    sim.add_argument("--n-dev", type=int, default=200)
    sim.add_argument("--n-eval", type=int, default=400)
    sim.add_argument("--fields", default="far")
    sim.add_argument("--snr-lo", type=float, default=0.0)
    sim.add_argument("--snr-hi", type=float, default=10.0)
    sim.add_argument("--duration", type=float, default=1.0)
    sim.set_defaults(fn=cmd_simulate)

    tr = sub.add_parser("train", help="run the training curriculum")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--model", default="mini",
                    choices=reference_config_names())
    tr.add_argument("--channels", type=int, default=None)
    tr.add_argument("--epochs", default="10,10,30",
                    help="comma list, one count per present phase")
    tr.add_argument("--batch-size", type=int, default=64)
    tr.add_argument("--lr", type=float, default=6e-4)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--no-augment", action="store_true")
    tr.add_argument("--resume", default=None)
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint against a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--out", default=None)
    ev.add_argument("--export-hist", default=None)
    ev.add_argument("--tile-channels", action="store_true")
    ev.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="probability for a single file")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("audio")
    pr.add_argument("--tile-channels", action="store_true")
    pr.set_defaults(fn=cmd_predict)

    bf = sub.add_parser("beamform", help="6-ch input to 3 beams + raw ch0")
    bf.add_argument("audio")
    bf.add_argument("--out", required=True)
    bf.add_argument("--looks", default="10,90,170")
    bf.add_argument("--wpe", action="store_true")
    bf.set_defaults(fn=cmd_beamform)

    wp = sub.add_parser("wpe", help="long-term prediction dereverberation")
    wp.add_argument("audio")
    wp.add_argument("--out", required=True)
    wp.add_argument("--taps", type=int, default=10)
    wp.add_argument("--delay", type=int, default=3)
    wp.add_argument("--iterations", type=int, default=3)
    wp.set_defaults(fn=cmd_wpe)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.fn(args)
    except (ContractError, ValueError, OSError, KeyError) as exc:
        print(f"error [{type(exc).__module__}.{type(exc).__name__}]: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
