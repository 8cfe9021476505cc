"""Training recipe: BCE loss, Adam, one cosine-annealed learning rate
schedule, positive-class oversampling, and a near -> mid -> far curriculum.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numeric as nm
from .centroid import centroid_sgd_step
from .data import load_checkpoint, rng_from_meta, rng_state_to_meta, save_checkpoint
from .dsp import FBankFeature, spec_augment
from .evaluation import evaluate
from .model import config_to_dict
from .numeric import ContractError, Tape, Tensor


class TrainingError(RuntimeError):
    """Raised when optimization goes numerically bad (NaN/inf loss)."""


@dataclass
class TrainerConfig:
    batch_size: int = 64
    lr0: float = 6e-4
    lr_min: float = 1e-12
    total_steps: int | None = None  # derived from the phase schedule if None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    oversample_target: float = 0.5
    phases: tuple = (("near", 10), ("mid", 10), ("far", 30))
    seed: int = 0
    augment: bool = True
    freq_mask_param: int = 25
    time_mask_param: int = 7
    restart_schedule_per_phase: bool = False

    def __post_init__(self):
        if not 0 < self.lr_min < self.lr0:
            raise ContractError("need 0 < lr_min < lr0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if not self.phases:
            raise ContractError("phase schedule must be nonempty")
        if not 0 < self.oversample_target < 1:
            raise ContractError("oversample target must lie in (0, 1)")


@dataclass
class Example:
    """One training item: a (channels, frames, mels) feature cube plus label."""

    features: np.ndarray
    label: int


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def bce_loss(p_pos: Tensor, labels: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Batch-averaged binary cross-entropy on positive-class probabilities."""
    y = np.asarray(labels, dtype=p_pos.dtype)
    if y.shape != tuple(p_pos.shape):
        raise ContractError("labels must match probability vector shape")
    p = nm.clamp(p_pos, eps, 1.0 - eps)
    one = Tensor(np.ones_like(y))
    yt = Tensor(y)
    pos_term = nm.mul(yt, nm.log(p))
    neg_term = nm.mul(nm.sub(one, yt), nm.log(nm.sub(one, p)))
    return nm.scale(nm.reduce_mean(nm.add(pos_term, neg_term)), -1.0)


def adam_step(params: dict, state: AdamState, lr: float,
              cfg: TrainerConfig) -> None:
    """In-place Adam update with bias correction; reads each param's .grad."""
    state.t += 1
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = g.astype(p.data.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(
            p.data.dtype, copy=False)


def cosine_lr(step: int, lr0: float, lr_min: float, total_steps: int) -> float:
    """lr_min + 0.5*(lr0 - lr_min)*(1 + cos(pi*step/T)); clamped past T."""
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(
        math.pi * step / total_steps))


def oversample(labels, target: float, rng: np.random.Generator) -> np.ndarray:
    """Index sequence for one epoch: every negative once, positives repeated
    until their fraction reaches the target, order shuffled."""
    y = np.asarray(labels)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ContractError("oversampling needs both classes present")
    needed = max(len(pos), int(round(len(neg) * target / (1.0 - target))))
    reps, rem = divmod(needed, len(pos))
    extra = rng.choice(pos, size=rem, replace=False) if rem else np.empty(0, int)
    seq = np.concatenate([neg, np.tile(pos, reps), extra])
    rng.shuffle(seq)
    return seq


def epoch_length(labels, target: float, batch_size: int) -> int:
    """Steps per epoch under oversampling; depends only on class counts."""
    y = np.asarray(labels)
    n_pos, n_neg = int(np.sum(y == 1)), int(np.sum(y == 0))
    needed = max(n_pos, int(round(n_neg * target / (1.0 - target))))
    return -(-(n_neg + needed) // batch_size)


def normalize_cube(x: np.ndarray) -> np.ndarray:
    """Per-utterance mean/variance normalization of a log-Mel cube.

    Raw features sit near the log floor (about -23) with a large offset;
    without this the encoder starts deep in the GELU tail and cannot learn.
    """
    m = x.mean()
    s = x.std()
    return ((x - m) / (s + 1e-5)).astype(x.dtype, copy=False)


def adapt_channels(features: np.ndarray, n_channels: int) -> np.ndarray:
    """Tile (or trim) the channel axis to the model's channel count."""
    c = features.shape[0]
    if c == n_channels:
        return features
    if c > n_channels:
        return features[:n_channels]
    reps = -(-n_channels // c)
    return np.tile(features, (reps, 1, 1))[:n_channels]


def _batch(examples, indices, model, cfg, rng):
    cubes = []
    labels = []
    for i in indices:
        ex = examples[i]
        feat = ex.features
        if cfg.augment:
            feat = spec_augment(FBankFeature(feat), rng,
                                cfg.freq_mask_param, cfg.time_mask_param).cube
        cubes.append(normalize_cube(adapt_channels(feat, model.config.n_channels)))
        labels.append(ex.label)
    x = np.stack(cubes).astype(model.config.np_dtype)
    return x, np.asarray(labels)


def evaluate_model(model, examples, centroids=None, batch_size: int = 64,
                   threshold: float = 0.5):
    """Dev/eval pass: forward in batches, no augmentation, fixed threshold."""
    probs = []
    labels = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        x = np.stack([normalize_cube(adapt_channels(e.features,
                                                    model.config.n_channels))
                      for e in chunk]).astype(model.config.np_dtype)
        p, _ = model.forward(x, centroids)
        probs.append(p.data[:, 1].astype(np.float64))
        labels.extend(e.label for e in chunk)
    return evaluate(np.clip(np.concatenate(probs), 0.0, 1.0),
                    np.asarray(labels), threshold)


def _trainable_state(model, centroids, adam):
    tensors = {}
    for k, p in model.params.items():
        tensors[f"param/{k}"] = p.data
        tensors[f"adam_m/{k}"] = adam.m[k]
        tensors[f"adam_v/{k}"] = adam.v[k]
    if centroids is not None:
        tensors["centroid/v0"] = centroids.v0
        tensors["centroid/v1"] = centroids.v1
    return tensors


def _restore_trainable(model, centroids, adam, tensors):
    for k, p in model.params.items():
        p.data = tensors[f"param/{k}"].astype(p.data.dtype, copy=True)
        adam.m[k] = tensors[f"adam_m/{k}"].copy()
        adam.v[k] = tensors[f"adam_v/{k}"].copy()
    if centroids is not None:
        centroids.v0 = tensors["centroid/v0"].copy()
        centroids.v1 = tensors["centroid/v1"].copy()


def model_from_checkpoint(path):
    """Rebuild (model, centroids, meta) from a training checkpoint."""
    from .centroid import KeywordCentroids
    from .model import MixerModel, config_from_dict

    ckpt = load_checkpoint(path)
    meta = ckpt["meta"]
    model = MixerModel(config_from_dict(meta["model"]))
    centroids = None
    if "centroid/v0" in ckpt["tensors"]:
        centroids = KeywordCentroids(ckpt["tensors"]["centroid/v0"],
                                     ckpt["tensors"]["centroid/v1"])
        centroids.initialized = meta.get("centroid_initialized", True)
    for k, p in model.params.items():
        p.data = ckpt["tensors"][f"param/{k}"].astype(p.data.dtype, copy=True)
    return model, centroids, meta


def train(model, centroids, datasets: dict, dev_set, cfg: TrainerConfig,
          out_dir, resume_from=None, log_print=None) -> dict:
    """Run the full curriculum; returns {"best_score", "last_report", ...}.

    datasets maps field tag -> list of Example; dev_set is a list of Example.
    Writes metrics.jsonl, last.ckpt, and best.ckpt under out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    for tag, _ in cfg.phases:
        if not datasets.get(tag):
            raise ContractError(f"no data for curriculum phase {tag!r}")

    phase_steps = []
    for tag, n_epochs in cfg.phases:
        labels = [e.label for e in datasets[tag]]
        phase_steps.append(n_epochs * epoch_length(
            labels, cfg.oversample_target, cfg.batch_size))
    total_steps = cfg.total_steps or sum(phase_steps)

    adam = AdamState.zeros(model.params)
    rng = np.random.default_rng(cfg.seed)
    global_step = 0
    epochs_done = 0
    best_score = math.inf

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        meta = ckpt["meta"]
        _restore_trainable(model, centroids, adam, ckpt["tensors"])
        adam.t = meta["adam_t"]
        global_step = meta["global_step"]
        epochs_done = meta["epochs_done"]
        best_score = meta["best_score"]
        if centroids is not None:
            centroids.initialized = meta["centroid_initialized"]
        rng = rng_from_meta(meta["rng"])
    else:
        log_path.write_text("")

    def checkpoint_meta():
        return {"adam_t": adam.t, "global_step": global_step,
                "epochs_done": epochs_done, "best_score": best_score,
                "rng": rng_state_to_meta(rng),
                "centroid_initialized":
                    bool(centroids.initialized) if centroids is not None else False,
                "trainer": {"seed": cfg.seed, "batch_size": cfg.batch_size,
                            "lr0": cfg.lr0, "total_steps": total_steps},
                "model": config_to_dict(model.config)}

    def save(path):
        save_checkpoint({"meta": checkpoint_meta(),
                         "tensors": _trainable_state(model, centroids, adam)},
                        path)

    fwd_centroids = centroids if model.config.centroid_aware else None
    epoch_index = 0
    last_report = None
    for phase_idx, (tag, n_epochs) in enumerate(cfg.phases):
        examples = datasets[tag]
        labels = [e.label for e in examples]
        phase_offset = sum(phase_steps[:phase_idx])
        for epoch in range(n_epochs):
            if epoch_index < epochs_done:
                epoch_index += 1
                continue
            seq = oversample(labels, cfg.oversample_target, rng)
            losses = []
            lr = cfg.lr0
            for start in range(0, len(seq), cfg.batch_size):
                x, y = _batch(examples, seq[start:start + cfg.batch_size],
                              model, cfg, rng)
                if cfg.restart_schedule_per_phase:
                    lr = cosine_lr(global_step - phase_offset, cfg.lr0,
                                   cfg.lr_min, phase_steps[phase_idx])
                else:
                    lr = cosine_lr(global_step, cfg.lr0, cfg.lr_min, total_steps)
                with Tape() as tape:
                    probs, latent = model.forward(x, fwd_centroids)
                    loss = bce_loss(nm.index_last(probs, 1), y)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise TrainingError(
                        f"non-finite loss at step {global_step} (phase {tag})")
                nm.backward(tape, loss, params=model.params.values())
                adam_step(model.params, adam, lr, cfg)
                if centroids is not None:
                    centroid_sgd_step(latent.data.astype(np.float64), y, centroids)
                losses.append(loss_val)
                global_step += 1
            report = evaluate_model(model, dev_set, fwd_centroids,
                                    cfg.batch_size)
            record = {"step": global_step, "phase": tag, "epoch": epoch_index,
                      "loss": float(np.mean(losses)), "lr": lr,
                      "dev_far": report.far, "dev_frr": report.frr,
                      "dev_score": report.score}
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
            if log_print is not None:
                log_print(json.dumps(record))
            epoch_index += 1
            epochs_done = epoch_index
            last_report = report
            if report.score < best_score:
                best_score = report.score
                save(out_dir / "best.ckpt")
            save(out_dir / "last.ckpt")
    return {"best_score": best_score, "last_report": last_report,
            "total_steps": total_steps, "global_step": global_step,
            "log_path": str(log_path)}
