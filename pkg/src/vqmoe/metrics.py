"""Correlation metrics, the optional logistic remapping, and consistency
analysis of individual raters against consolidated scores.

Spearman uses average ranks for ties, Kendall is the tau-b variant, and a
constant input makes any correlation undefined: those return 0.0 and log a
warning rather than propagating NaN.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .errors import ShapeError

log = logging.getLogger(__name__)

METRIC_NAMES = ("srcc", "plcc", "krcc", "rmse")


def _pair(pred, mos) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    m = np.asarray(mos, dtype=np.float64)
    if p.ndim != 1 or m.ndim != 1:
        raise ShapeError("metric inputs must be 1-D")
    if p.shape != m.shape:
        raise ShapeError(f"length mismatch: {p.shape[0]} vs {m.shape[0]}")
    if p.shape[0] < 2:
        raise ShapeError("metrics need at least 2 samples")
    if not (np.isfinite(p).all() and np.isfinite(m).all()):
        raise ShapeError("metric inputs must be finite")
    return p, m


def _guarded(name: str, value: float, p: np.ndarray, m: np.ndarray) -> float:
    if np.ptp(p) == 0 or np.ptp(m) == 0:
        log.warning("%s undefined for constant input, reporting 0", name)
        return 0.0
    if not math.isfinite(value):
        log.warning("%s produced a non-finite value, reporting 0", name)
        return 0.0
    return float(value)


def srcc(pred, mos) -> float:
    """Spearman rank correlation (average ranks on ties)."""
    p, m = _pair(pred, mos)
    if np.ptp(p) == 0 or np.ptp(m) == 0:
        return _guarded("srcc", 0.0, p, m)
    return _guarded("srcc", stats.spearmanr(p, m).statistic, p, m)


def plcc(pred, mos) -> float:
    """Pearson linear correlation."""
    p, m = _pair(pred, mos)
    if np.ptp(p) == 0 or np.ptp(m) == 0:
        return _guarded("plcc", 0.0, p, m)
    return _guarded("plcc", stats.pearsonr(p, m).statistic, p, m)


def krcc(pred, mos) -> float:
    """Kendall rank correlation, tau-b."""
    p, m = _pair(pred, mos)
    if np.ptp(p) == 0 or np.ptp(m) == 0:
        return _guarded("krcc", 0.0, p, m)
    return _guarded("krcc", stats.kendalltau(p, m, variant="b").statistic, p, m)


def rmse(pred, mos) -> float:
    """Root mean squared error."""
    p, m = _pair(pred, mos)
    return float(np.sqrt(np.mean((p - m) ** 2)))


def _logistic(x, b1, b2, b3, b4):
    s = 1.0 / (1.0 + np.exp(-(x - b3) / b4))
    return b1 * s + b2 * (1.0 - s)


def logistic_map(pred, mos) -> np.ndarray:
    """Least-squares 4-parameter monotone logistic remapping of pred to mos.

    The model b1*s + b2*(1-s) with s = sigmoid((x-b3)/b4) is linear in
    (b1, b2) for fixed (b3, b4), so a (b3, b4) grid with exact linear solves
    seeds a curve_fit polish. Divergence falls back to identity with a
    warning.
    """
    p, m = _pair(pred, mos)
    if p.shape[0] < 5:
        raise ShapeError("logistic_map needs at least 5 samples")
    if np.ptp(p) == 0:
        log.warning("logistic_map: constant predictions, returning identity")
        return p.copy()

    scale = float(np.ptp(p))
    b3_grid = np.quantile(p, [0.1, 0.3, 0.5, 0.7, 0.9]).tolist() + [float(p.mean())]
    b4_grid = (np.geomspace(0.01, 3e4, 20) * scale).tolist()
    best = None
    for b3 in b3_grid:
        for b4 in b4_grid:
            s = 1.0 / (1.0 + np.exp(-(p - b3) / b4))
            design = np.stack([s, 1.0 - s], axis=1)
            coef, *_ = np.linalg.lstsq(design, m, rcond=None)
            sse = float(((design @ coef - m) ** 2).sum())
            if math.isfinite(sse) and (best is None or sse < best[0]):
                best = (sse, (float(coef[0]), float(coef[1]), float(b3), float(b4)))
    if best is None:
        log.warning("logistic_map: fit diverged, returning identity")
        return p.copy()

    sse, coeffs = best
    try:
        popt, _ = optimize.curve_fit(_logistic, p, m, p0=coeffs, maxfev=5000)
        polished = _logistic(p, *popt)
        sse_polished = float(((polished - m) ** 2).sum())
        if math.isfinite(sse_polished) and sse_polished <= sse:
            return polished
    except (RuntimeError, ValueError, optimize.OptimizeWarning):
        pass
    return _logistic(p, *coeffs)


@dataclass
class AnnotatorConsistency:
    per_annotator: dict[str, dict]
    skipped: list[str]
    avg_srcc: float
    avg_plcc: float
    count_above_threshold: int
    threshold: float


def annotator_consistency(ratings, mos: dict, threshold: float = 0.8) -> AnnotatorConsistency:
    """Per-rater correlation against consolidated scores.

    ratings: records with annotator_id, video_id, dimension, score fields;
    mos: mapping (video_id, dimension) -> consolidated value. Raters with
    fewer than 2 usable ratings are skipped with a note.
    """
    by_rater: dict[str, list[tuple[float, float]]] = {}
    for r in ratings:
        key = (r.video_id, r.dimension)
        if key not in mos:
            continue
        by_rater.setdefault(str(r.annotator_id), []).append(
            (float(r.score), float(mos[key]))
        )

    per: dict[str, dict] = {}
    skipped: list[str] = []
    for rater in sorted(by_rater):
        pairs = by_rater[rater]
        if len(pairs) < 2:
            log.info("annotator %s skipped: only %d usable ratings", rater, len(pairs))
            skipped.append(rater)
            continue
        own = np.array([a for a, _ in pairs])
        ref = np.array([b for _, b in pairs])
        per[rater] = {"srcc": srcc(own, ref), "plcc": plcc(own, ref), "n": len(pairs)}

    if per:
        avg_s = float(np.mean([v["srcc"] for v in per.values()]))
        avg_p = float(np.mean([v["plcc"] for v in per.values()]))
    else:
        avg_s = avg_p = 0.0
    above = sum(1 for v in per.values() if v["srcc"] > threshold)
    return AnnotatorConsistency(per, skipped, avg_s, avg_p, above, threshold)


@dataclass
class MetricReport:
    """The four metrics per quality dimension for one evaluation run."""

    dimensions: dict[str, dict[str, float]]
    n_samples: dict[str, int]
    split_id: str | None = None
    aggregate: dict[str, dict[str, dict[str, float]]] | None = None

    def to_dict(self) -> dict:
        out = {
            "dimensions": self.dimensions,
            "n_samples": self.n_samples,
            "split_id": self.split_id,
        }
        if self.aggregate is not None:
            out["aggregate"] = self.aggregate
        return out


def metric_report(pairs: dict[str, tuple], split_id: str | None = None,
                  mapped_plcc: bool = False) -> MetricReport:
    """Compute the metric quartet for each dimension.

    pairs: dimension -> (predictions, targets). When mapped_plcc is set,
    PLCC and RMSE are computed on logistic-remapped predictions.
    """
    dims: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    for dim in sorted(pairs):
        pred, mos = pairs[dim]
        p, m = _pair(pred, mos)
        p_lin = logistic_map(p, m) if mapped_plcc and p.shape[0] >= 5 else p
        dims[dim] = {
            "srcc": srcc(p, m),
            "plcc": plcc(p_lin, m),
            "krcc": krcc(p, m),
            "rmse": rmse(p_lin, m),
        }
        counts[dim] = int(p.shape[0])
    return MetricReport(dims, counts, split_id)


def aggregate_reports(reports: list[MetricReport]) -> MetricReport:
    """Mean and population std of each metric across split reports."""
    if not reports:
        raise ShapeError("no reports to aggregate")
    dims = sorted({d for r in reports for d in r.dimensions})
    agg: dict[str, dict[str, dict[str, float]]] = {}
    mean_dims: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    for dim in dims:
        rows = [r.dimensions[dim] for r in reports if dim in r.dimensions]
        agg[dim] = {}
        mean_dims[dim] = {}
        for metric in METRIC_NAMES:
            vals = np.array([row[metric] for row in rows])
            agg[dim][metric] = {"mean": float(vals.mean()), "std": float(vals.std())}
            mean_dims[dim][metric] = float(vals.mean())
        counts[dim] = int(sum(r.n_samples.get(dim, 0) for r in reports))
    return MetricReport(mean_dims, counts, split_id="aggregate", aggregate=agg)


def format_table(report: MetricReport) -> str:
    """Aligned plaintext table: one row per dimension, the metric quartet."""
    header = f"{'dimension':<18} {'SRCC':>8} {'PLCC':>8} {'KRCC':>8} {'RMSE':>8} {'n':>6}"
    lines = [header, "-" * len(header)]
    for dim, row in report.dimensions.items():
        lines.append(
            f"{dim:<18} {row['srcc']:>8.4f} {row['plcc']:>8.4f} "
            f"{row['krcc']:>8.4f} {row['rmse']:>8.4f} {report.n_samples[dim]:>6d}"
        )
    return "\n".join(lines)
