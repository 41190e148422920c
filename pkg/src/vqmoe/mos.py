"""Subjective-score consolidation: per-cell outlier screening with a
kurtosis-driven threshold, annotator-level rejection, and mean-opinion-score
aggregation.

A cell is one (video, dimension) group of ratings. Screening keeps ratings
within lambda sample standard deviations of the cell mean, with lambda = 2
when the cell's population kurtosis sits in the near-Gaussian window [2, 4]
and sqrt(20) otherwise. Annotators whose ratings are flagged as outliers in
more than 5% of their submissions are dropped, and surviving ratings are
re-screened in a second pass that produces the final scores.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError

VALID_SCORES = (1, 2, 3, 4, 5)
DIMENSION_RE = re.compile(r"^(spatial|temporal|overall_percept|sentence|word\[([1-9]\d*)\])$")
KURTOSIS_WINDOW = (2.0, 4.0)
LAMBDA_GAUSSIAN = 2.0
LAMBDA_FREE = math.sqrt(20.0)
REJECTION_FRACTION = 0.05
MIN_SCREENABLE = 4


@dataclass(frozen=True)
class RatingRecord:
    """One raw annotator score on the 5-level scale."""

    annotator_id: str
    video_id: str
    dimension: str
    score: int

    def __post_init__(self):
        if not self.annotator_id or not self.video_id:
            raise FormatError("rating needs non-empty annotator_id and video_id")
        if isinstance(self.score, bool) or not isinstance(self.score, (int, np.integer)):
            raise FormatError(f"score must be an integer, got {self.score!r}")
        if self.score not in VALID_SCORES:
            raise FormatError(f"score must be in [1, 5], got {self.score}")
        if not DIMENSION_RE.match(self.dimension):
            raise FormatError(f"unknown dimension {self.dimension!r}")


def kurtosis(scores) -> float:
    """Population kurtosis m4 / m2^2 (normal distributions give 3)."""
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ShapeError("kurtosis needs a 1-D vector of at least 2 scores")
    d = x - x.mean()
    m2 = float(np.mean(d * d))
    if m2 == 0.0:
        raise ShapeError("kurtosis undefined for zero variance")
    m4 = float(np.mean(d ** 4))
    return m4 / (m2 * m2)


def select_lambda(scores) -> tuple[float, dict]:
    """Screening threshold multiplier for one cell.

    Returns (lambda, info) where info records the kurtosis and whether the
    cell was degenerate (zero variance, no exclusion possible).
    """
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < MIN_SCREENABLE:
        raise ShapeError(f"select_lambda needs at least {MIN_SCREENABLE} scores")
    if np.ptp(x) == 0:
        return LAMBDA_GAUSSIAN, {"beta2": None, "degenerate": True}
    beta2 = kurtosis(x)
    lam = LAMBDA_GAUSSIAN if KURTOSIS_WINDOW[0] <= beta2 <= KURTOSIS_WINDOW[1] \
        else LAMBDA_FREE
    return lam, {"beta2": beta2, "degenerate": False}


def inlier_set(scores, lam: float) -> np.ndarray:
    """Indices within lam sample standard deviations of the mean.

    Uses the n-1 denominator for sigma; the boundary itself is inclusive.
    Zero spread keeps every index.
    """
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ShapeError("inlier_set needs a 1-D vector of at least 2 scores")
    sigma = float(x.std(ddof=1))
    if sigma == 0.0:
        return np.arange(x.shape[0])
    return np.flatnonzero(np.abs(x - x.mean()) <= lam * sigma)


@dataclass
class CellReport:
    """Final screening outcome for one (video, dimension) cell."""

    video_id: str
    dimension: str
    n_ratings: int
    mu: float
    sigma: float | None
    beta2: float | None
    lam: float | None
    excluded_pass1: tuple[int, ...]
    excluded: tuple[int, ...]
    mos: float
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "dimension": self.dimension,
            "n_ratings": self.n_ratings,
            "mu": self.mu,
            "sigma": self.sigma,
            "beta2": self.beta2,
            "lambda": self.lam,
            "excluded_pass1": list(self.excluded_pass1),
            "excluded": list(self.excluded),
            "mos": self.mos,
            "flags": list(self.flags),
        }


@dataclass
class AnnotatorReport:
    annotator_id: str
    n_ratings: int
    n_outliers: int
    outlier_fraction: float
    rejected: bool

    def to_dict(self) -> dict:
        return {
            "annotator_id": self.annotator_id,
            "n_ratings": self.n_ratings,
            "n_outliers": self.n_outliers,
            "outlier_fraction": self.outlier_fraction,
            "rejected": self.rejected,
        }


@dataclass
class ConsolidationReport:
    cells: dict
    annotators: dict

    def to_dict(self) -> dict:
        return {
            "cells": {
                f"{v}::{d}": cell.to_dict() for (v, d), cell in sorted(self.cells.items())
            },
            "annotators": {
                a: rep.to_dict() for a, rep in sorted(self.annotators.items())
            },
        }


def _screen(scores: np.ndarray) -> tuple[np.ndarray, dict]:
    """One screening pass over a cell; returns kept indices and bookkeeping."""
    n = scores.shape[0]
    info: dict = {"lam": None, "beta2": None, "flags": []}
    if n < MIN_SCREENABLE:
        info["flags"].append("unscreened_small_panel")
        return np.arange(n), info
    lam, sel = select_lambda(scores)
    info["lam"] = lam
    info["beta2"] = sel["beta2"]
    if sel["degenerate"]:
        info["flags"].append("degenerate_zero_variance")
        return np.arange(n), info
    kept = inlier_set(scores, lam)
    if kept.size == 0:
        info["flags"].append("empty_after_screening")
        return np.arange(n), info
    return kept, info


def _word_position(dimension: str) -> int | None:
    m = DIMENSION_RE.match(dimension)
    return int(m.group(2)) if m.group(2) else None


def consolidate(ratings: list[RatingRecord]) -> tuple[ConsolidationReport, dict]:
    """Two-pass consolidation of raw ratings into per-video labels.

    Pass 1 screens every cell and measures each annotator's outlier
    fraction; annotators above the 5% rule (strict) are rejected. Pass 2
    re-screens the surviving ratings and its inlier means become the final
    scores. A cell with no surviving ratings falls back to the unscreened
    mean over all its original ratings, flagged.

    Returns (report, labels) where labels maps video_id to a label block
    with per-dimension scores, word scores ordered by token position, and
    the corresponding presence mask.
    """
    if not ratings:
        raise ShapeError("consolidate needs at least one rating")

    cells: dict[tuple[str, str], list[int]] = {}
    for idx, r in enumerate(ratings):
        if not isinstance(r, RatingRecord):
            raise FormatError(f"rating {idx} is not a RatingRecord")
        cells.setdefault((r.video_id, r.dimension), []).append(idx)

    # pass 1: screen cells, attribute outliers to annotators
    outlier_ids: set[int] = set()
    pass1_excluded: dict[tuple[str, str], tuple[int, ...]] = {}
    for key, idxs in cells.items():
        scores = np.array([ratings[i].score for i in idxs], dtype=np.float64)
        kept, _ = _screen(scores)
        kept_set = {idxs[j] for j in kept.tolist()}
        excluded = tuple(i for i in idxs if i not in kept_set)
        pass1_excluded[key] = excluded
        outlier_ids.update(excluded)

    totals: dict[str, int] = {}
    outliers: dict[str, int] = {}
    for idx, r in enumerate(ratings):
        totals[r.annotator_id] = totals.get(r.annotator_id, 0) + 1
        if idx in outlier_ids:
            outliers[r.annotator_id] = outliers.get(r.annotator_id, 0) + 1
    annotators: dict[str, AnnotatorReport] = {}
    for ann in sorted(totals):
        frac = outliers.get(ann, 0) / totals[ann]
        annotators[ann] = AnnotatorReport(
            annotator_id=ann,
            n_ratings=totals[ann],
            n_outliers=outliers.get(ann, 0),
            outlier_fraction=frac,
            rejected=frac > REJECTION_FRACTION,
        )
    rejected = {a for a, rep in annotators.items() if rep.rejected}

    # pass 2: drop rejected annotators, re-screen, aggregate
    cell_reports: dict[tuple[str, str], CellReport] = {}
    for key, idxs in cells.items():
        surviving = [i for i in idxs if ratings[i].annotator_id not in rejected]
        all_scores = np.array([ratings[i].score for i in idxs], dtype=np.float64)
        if not surviving:
            mos = float(all_scores.mean())
            cell_reports[key] = CellReport(
                video_id=key[0],
                dimension=key[1],
                n_ratings=len(idxs),
                mu=float(all_scores.mean()),
                sigma=float(all_scores.std(ddof=1)) if len(idxs) > 1 else None,
                beta2=None,
                lam=None,
                excluded_pass1=pass1_excluded[key],
                excluded=tuple(idxs),
                mos=mos,
                flags=("no_ratings_after_rejection",),
            )
            continue
        scores = np.array([ratings[i].score for i in surviving], dtype=np.float64)
        kept, info = _screen(scores)
        kept_global = [surviving[j] for j in kept.tolist()]
        excluded = tuple(i for i in idxs if i not in set(kept_global))
        mos = float(np.mean([ratings[i].score for i in kept_global]))
        cell_reports[key] = CellReport(
            video_id=key[0],
            dimension=key[1],
            n_ratings=len(idxs),
            mu=float(scores.mean()),
            sigma=float(scores.std(ddof=1)) if scores.shape[0] > 1 else None,
            beta2=info["beta2"],
            lam=info["lam"],
            excluded_pass1=pass1_excluded[key],
            excluded=excluded,
            mos=mos,
            flags=tuple(info["flags"]),
        )

    labels: dict[str, dict] = {}
    videos = sorted({v for v, _ in cell_reports})
    for video in videos:
        block: dict = {
            "q_spatial": None,
            "q_temporal": None,
            "q_overall_percept": None,
            "q_sentence": None,
        }
        word_scores: dict[int, float] = {}
        for (v, dim), cell in cell_reports.items():
            if v != video:
                continue
            pos = _word_position(dim)
            if pos is not None:
                word_scores[pos] = cell.mos
            else:
                block[f"q_{dim}"] = cell.mos
        max_pos = max(word_scores) if word_scores else 0
        block["q_word"] = [word_scores.get(p) for p in range(1, max_pos + 1)]
        block["token_mask"] = [p in word_scores for p in range(1, max_pos + 1)]
        labels[video] = block

    return ConsolidationReport(cells=cell_reports, annotators=annotators), labels
