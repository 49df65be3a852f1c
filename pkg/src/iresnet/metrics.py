"""Disparity error metrics and dataset-level evaluation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .data import unpad
from .errors import FormatError, IResNetError

BAD_THRESHOLDS = (1, 2, 3, 4, 5)


def _valid(pred, gt, mask):
    pred, gt, mask = np.asarray(pred), np.asarray(gt), np.asarray(mask)
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise FormatError(f"metric shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    valid = mask > 0
    if not valid.any():
        raise FormatError("metric undefined: mask has no valid pixels")
    err = np.abs(pred[valid].astype(np.float64) - gt[valid].astype(np.float64))
    return err, gt[valid].astype(np.float64)


def epe(pred, gt, mask):
    """Mean absolute disparity error over valid pixels, in pixels."""
    err, _ = _valid(pred, gt, mask)
    return float(err.mean())


def bad_pixels(pred, gt, mask, t):
    """Percentage of valid pixels whose error exceeds ``t`` pixels."""
    if t <= 0:
        raise ValueError(f"threshold must be positive, got {t}")
    err, _ = _valid(pred, gt, mask)
    return 100.0 * float((err > t).sum()) / err.size


def d1(pred, gt, mask):
    """Percentage of valid pixels with error > 3 px and > 5% of the true disparity."""
    err, g = _valid(pred, gt, mask)
    return 100.0 * float(((err > 3.0) & (err > 0.05 * np.abs(g))).sum()) / err.size


@dataclass
class ErrorCounts:
    """Additive error statistics; metrics are ratios of these sums."""

    count: int = 0
    abs_sum: float = 0.0
    bad: dict = field(default_factory=lambda: {t: 0 for t in BAD_THRESHOLDS})
    d1: int = 0

    @classmethod
    def from_arrays(cls, pred, gt, mask):
        err, g = _valid(pred, gt, mask)
        return cls(err.size, float(err.sum()),
                   {t: int((err > t).sum()) for t in BAD_THRESHOLDS},
                   int(((err > 3.0) & (err > 0.05 * np.abs(g))).sum()))

    def __iadd__(self, other):
        self.count += other.count
        self.abs_sum += other.abs_sum
        for t in BAD_THRESHOLDS:
            self.bad[t] += other.bad[t]
        self.d1 += other.d1
        return self

    @property
    def epe(self):
        return self.abs_sum / self.count if self.count else float("nan")

    def bad_pct(self, t):
        return 100.0 * self.bad[t] / self.count if self.count else float("nan")

    @property
    def d1_pct(self):
        return 100.0 * self.d1 / self.count if self.count else float("nan")


@dataclass
class IterationRow:
    iteration: int
    all: ErrorCounts
    noc: ErrorCounts | None = None


@dataclass
class EvalReport:
    rows: list                                       # one IterationRow per iteration 0..K
    per_sample: list = field(default_factory=list)   # (id, iteration, epe, valid count)
    faults: list = field(default_factory=list)       # (id, message)

    def row(self, k):
        return self.rows[k]

    def epe(self, k=-1):
        return self.rows[k].all.epe

    @property
    def valid_count(self):
        return self.rows[0].all.count if self.rows else 0


def predict_iterations(model, sample, iters):
    """Unpadded (H, W) float64 predictions for iterations 0..iters."""
    pyr = model(sample.left, sample.right, iters=iters)
    size = sample.orig_size or sample.size
    return [unpad(pyr.at_iteration(k).data[0, 0], size).astype(np.float64) for k in range(iters + 1)]


def evaluate_dataset(model, samples, refine_iters):
    """Aggregate metrics over ``samples`` for iterations 0..refine_iters.

    Sums are pooled over valid pixels, so the aggregate EPE is the
    valid-count weighted mean of per-sample EPEs.  Occlusion-aware (Noc)
    statistics are added when every evaluated sample carries an occlusion map.
    A sample that fails is recorded in ``faults`` and skipped.
    """
    rows = [IterationRow(k, ErrorCounts(), ErrorCounts()) for k in range(refine_iters + 1)]
    has_noc = True
    per_sample, faults = [], []
    for s in samples:
        try:
            preds = predict_iterations(model, s, refine_iters)
            size = s.orig_size or s.size
            gt = unpad(s.gt[0, 0], size)
            mask = unpad(s.mask[0, 0], size)
            occ = None if s.occ is None else unpad(s.occ[0, 0], size)
            stats = []
            for pred in preds:
                a = ErrorCounts.from_arrays(pred, gt, mask)
                n = None
                if occ is not None:
                    noc_mask = mask * (occ == 0)
                    n = ErrorCounts.from_arrays(pred, gt, noc_mask) if noc_mask.any() else ErrorCounts()
                stats.append((a, n))
        except IResNetError as exc:
            faults.append((s.id, str(exc)))
            continue
        has_noc = has_noc and occ is not None
        for k, (a, n) in enumerate(stats):
            rows[k].all += a
            if n is not None:
                rows[k].noc += n
            per_sample.append((s.id, k, a.epe, a.count))
    if not has_noc:
        for r in rows:
            r.noc = None
    return EvalReport(rows, per_sample, faults)


def report_lines(report):
    """``key=value`` lines in a fixed order."""
    lines = [f"samples={len({p[0] for p in report.per_sample})}", f"faults={len(report.faults)}"]
    for r in report.rows:
        for tag, c in (("", r.all), ("noc.", r.noc)):
            if c is None:
                continue
            p = f"iter{r.iteration}.{tag}"
            lines.append(f"{p}valid_pixels={c.count}")
            lines.append(f"{p}epe_px={c.epe:.6f}")
            for t in BAD_THRESHOLDS:
                lines.append(f"{p}bad{t}_pct={c.bad_pct(t):.4f}")
            lines.append(f"{p}d1_pct={c.d1_pct:.4f}")
    for sid, msg in report.faults:
        lines.append(f"fault.{sid}={msg}")
    return lines


def report_table(report):
    """Tab-separated table, one row per iteration."""
    cols = ["iter", "valid_pixels", "epe_px"] + [f"bad{t}_pct" for t in BAD_THRESHOLDS] + ["d1_pct"]
    noc = report.rows and report.rows[0].noc is not None
    if noc:
        cols += ["noc_epe_px", "noc_bad3_pct", "noc_d1_pct"]
    out = ["\t".join(cols)]
    for r in report.rows:
        c = r.all
        vals = [str(r.iteration), str(c.count), f"{c.epe:.6f}"]
        vals += [f"{c.bad_pct(t):.4f}" for t in BAD_THRESHOLDS] + [f"{c.d1_pct:.4f}"]
        if noc:
            vals += [f"{r.noc.epe:.6f}", f"{r.noc.bad_pct(3):.4f}", f"{r.noc.d1_pct:.4f}"]
        out.append("\t".join(vals))
    return out


def write_report(report, path):
    """Write ``path`` (key=value) and ``path`` with a ``.tsv`` suffix (table)."""
    base, _ = os.path.splitext(path)
    try:
        with open(path, "w") as f:
            f.write("\n".join(report_lines(report)) + "\n")
        with open(base + ".tsv", "w") as f:
            f.write("\n".join(report_table(report)) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write report {path}: {exc}") from exc
    return path, base + ".tsv"
