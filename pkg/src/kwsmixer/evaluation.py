"""Detection metrics: confusion counts, false-alarm and false-reject rates,
their sum as a single Score, threshold sweeps, and margin histogram export.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import ContractError

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ContractError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class EvalReport:
    """Rates may be NaN when the corresponding denominator is zero; the
    undefined flags say which ones. Score is NaN if either rate is.
    """

    far: float
    frr: float
    score: float
    accuracy: float
    threshold: float
    far_undefined: bool = False
    frr_undefined: bool = False

    def as_text(self) -> str:
        def fmt(v, undef):
            return "undefined" if undef else f"{v:.3f}"

        return (f"FAR={fmt(self.far, self.far_undefined)} "
                f"FRR={fmt(self.frr, self.frr_undefined)} "
                f"Score={fmt(self.score, self.far_undefined or self.frr_undefined)} "
                f"accuracy={self.accuracy:.3f} threshold={self.threshold:g}")

    def as_record(self) -> str:
        """Tab-separated full-precision record: far frr score acc threshold."""
        return "\t".join(repr(v) for v in
                         (self.far, self.frr, self.score, self.accuracy,
                          self.threshold))


def confusion(probabilities, labels, threshold: float = DEFAULT_THRESHOLD
              ) -> ConfusionCounts:
    """Tally hard decisions p >= threshold against 0/1 labels."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 1 or p.shape != y.shape:
        raise ContractError("probabilities and labels must be equal-length vectors")
    if p.size == 0:
        raise ContractError("cannot evaluate an empty set")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ContractError("probabilities must lie in [0, 1]")
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def report(c: ConfusionCounts, threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """FAR = FP/(FP+TN), FRR = FN/(FN+TP), Score = FAR + FRR.

    A zero denominator marks the rate undefined instead of reporting 0.
    """
    far_undef = (c.fp + c.tn) == 0
    frr_undef = (c.fn + c.tp) == 0
    far = math.nan if far_undef else c.fp / (c.fp + c.tn)
    frr = math.nan if frr_undef else c.fn / (c.fn + c.tp)
    score = far + frr
    acc = (c.tp + c.tn) / c.total if c.total else math.nan
    return EvalReport(far=far, frr=frr, score=score, accuracy=acc,
                      threshold=threshold, far_undefined=far_undef,
                      frr_undefined=frr_undef)


def evaluate(probabilities, labels, threshold: float = DEFAULT_THRESHOLD
             ) -> EvalReport:
    return report(confusion(probabilities, labels, threshold), threshold)


def threshold_sweep(probabilities, labels, grid) -> list[tuple[float, EvalReport]]:
    """One report per threshold over an ascending grid."""
    grid = [float(t) for t in grid]
    if not grid:
        raise ContractError("threshold grid must be nonempty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractError("threshold grid must be strictly ascending")
    return [(t, evaluate(probabilities, labels, t)) for t in grid]


def signed_margins(l2_distances) -> np.ndarray:
    """||x - V0|| - ||x - V1||; positive when the latent sits nearer V1."""
    d = np.asarray(l2_distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 2:
        raise ContractError("expected an (n, 2) array of centroid distances")
    return d[:, 0] - d[:, 1]


def export_histograms(l2_distances, labels, path, n_bins: int = 40) -> None:
    """Write per-class margin histograms as tab-separated text.

    Columns: bin_lo, bin_hi, count_neg, count_pos. Both classes share one
    bin grid so the rows line up for plotting.
    """
    margins = signed_margins(l2_distances)
    y = np.asarray(labels)
    if y.shape != margins.shape:
        raise ContractError("labels must align with distances")
    lo, hi = margins.min(), margins.max()
    if hi <= lo:
        # all margins identical: one occupied bin around the value
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    neg, _ = np.histogram(margins[y == 0], bins=edges)
    pos, _ = np.histogram(margins[y == 1], bins=edges)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_lo\tbin_hi\tcount_neg\tcount_pos\n")
        for i in range(n_bins):
            fh.write(f"{edges[i]:.8g}\t{edges[i + 1]:.8g}\t{neg[i]}\t{pos[i]}\n")
