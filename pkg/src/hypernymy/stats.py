"""Calibration, rank-correlation and inter-annotator agreement statistics."""

from __future__ import annotations

import csv
import itertools
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .ingest import softmax
from .metrics import MetricReport


class StatsError(ValueError):
    pass


@dataclass
class LabeledPredictionSet:
    probs: np.ndarray  # N x K
    labels: np.ndarray  # N

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.probs) != len(self.labels):
            raise StatsError("probs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.probs.shape[1]):
            raise StatsError("label outside [0, K)")


def load_labeled(path) -> LabeledPredictionSet:
    """JSONL rows ``{"label": int, "probs": [...]}`` (or ``"logits"``)."""
    probs, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            row = obj["probs"] if "probs" in obj else softmax(np.asarray(obj["logits"]))
            probs.append(row)
            labels.append(int(obj["label"]))
    return LabeledPredictionSet(np.array(probs), np.array(labels))


def _bin_stats(data: LabeledPredictionSet, n_bins: int):
    if n_bins < 1:
        raise StatsError("n_bins must be >= 1")
    if len(data.labels) == 0:
        raise StatsError("empty dataset")
    conf = data.probs.max(axis=1)
    pred = data.probs.argmax(axis=1)
    correct = (pred == data.labels).astype(np.float64)
    # right-inclusive bins (lo, hi]; confidence 0 falls in the first bin
    bins = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    conf_sum = np.bincount(bins, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(bins, weights=correct, minlength=n_bins)
    return counts, conf_sum, acc_sum


def ece(data: LabeledPredictionSet, n_bins: int = 100) -> float:
    """Expected calibration error with equal-width confidence bins."""
    counts, conf_sum, acc_sum = _bin_stats(data, n_bins)
    n = counts.sum()
    filled = counts > 0
    gaps = np.abs(acc_sum[filled] - conf_sum[filled]) / counts[filled]
    return float(math.fsum(counts[filled] / n * gaps))


def calibration_curve(data: LabeledPredictionSet, n_bins: int = 100) -> list[dict]:
    """Per-bin mean confidence and accuracy for non-empty bins."""
    counts, conf_sum, acc_sum = _bin_stats(data, n_bins)
    rows = []
    for b in np.flatnonzero(counts):
        rows.append({"bin": int(b), "lower": b / n_bins, "upper": (b + 1) / n_bins,
                     "count": int(counts[b]), "confidence": conf_sum[b] / counts[b],
                     "accuracy": acc_sum[b] / counts[b]})
    return rows


def top1_accuracy(data: LabeledPredictionSet) -> float:
    if len(data.labels) == 0:
        raise StatsError("empty dataset")
    # argmax returns the first maximal index, i.e. ties go to the lowest index
    return float(np.mean(data.probs.argmax(axis=1) == data.labels))


EXACT_MAX_N = 8


def _exact_p(rx: np.ndarray, ry: np.ndarray, rho: float) -> float:
    """Two-sided permutation p-value over all orderings of ``ry``."""
    perms = np.array(list(itertools.permutations(ry)))
    rhos = perms @ rx / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry))
    return float(np.mean(np.abs(rhos) >= abs(rho) - 1e-12))


def spearman(x: Sequence[float], y: Sequence[float], method: str = "auto") -> tuple[float, float]:
    """Spearman rho and a two-sided p-value.

    ``method="t"`` uses the Student-t approximation with ``n - 2`` degrees of
    freedom (``rho = +-1`` gives ``p = 0``); ``"exact"`` enumerates every
    permutation; ``"auto"`` is exact up to ``EXACT_MAX_N`` pairs.
    """
    if method not in ("auto", "t", "exact"):
        raise StatsError(f"unknown p-value method {method!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("spearman needs two 1-d sequences of equal length")
    n = len(x)
    if n < 3:
        raise StatsError(f"spearman needs at least 3 pairs, got {n}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise StatsError("spearman is undefined for a constant input")
    rx = sps.rankdata(x) - (n + 1) / 2
    ry = sps.rankdata(y) - (n + 1) / 2
    rho = float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = min(max(rho, -1.0), 1.0)
    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        if n > 10:
            raise StatsError("exact p-values are limited to n <= 10")
        return rho, _exact_p(rx, ry, rho)
    if abs(rho) >= 1.0 - 1e-15:
        return math.copysign(1.0, rho), 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * sps.t.sf(abs(t), n - 2))
    return rho, min(p, 1.0)


@dataclass
class RatingMatrix:
    """Categorical ratings: ``ratings[item][rater] = category``."""

    ratings: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows) -> "RatingMatrix":
        """Build from a raters x items sequence; ``None`` marks a missing rating."""
        ratings: dict = defaultdict(dict)
        for rater, row in enumerate(rows):
            for item, value in enumerate(row):
                if value is not None:
                    ratings[item][rater] = value
        return cls(dict(ratings))

    @property
    def raters(self) -> set:
        return {r for by_rater in self.ratings.values() for r in by_rater}


def load_ratings(path) -> RatingMatrix:
    ratings: dict = defaultdict(dict)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"item", "rater", "category"} - set(reader.fieldnames or ())
        if missing:
            raise StatsError(f"{path}: missing column(s) {sorted(missing)}")
        for row in reader:
            if row["category"] == "":
                continue
            ratings[row["item"]][row["rater"]] = row["category"]
    return RatingMatrix(dict(ratings))


def coincidence_matrix(ratings: RatingMatrix) -> tuple[list, np.ndarray]:
    """Nominal coincidence matrix ``o[c, k]`` over pairable items."""
    values = sorted({v for by_rater in ratings.ratings.values() for v in by_rater.values()}, key=str)
    index = {v: i for i, v in enumerate(values)}
    o = np.zeros((len(values), len(values)))
    for by_rater in ratings.ratings.values():
        vals = list(by_rater.values())
        m = len(vals)
        if m < 2:
            continue
        counts = Counter(index[v] for v in vals)
        for c, nc in counts.items():
            for k, nk in counts.items():
                pairs = nc * (nk - 1) if c == k else nc * nk
                o[c, k] += pairs / (m - 1)
    return values, o


def krippendorff_alpha(ratings: RatingMatrix, level: str = "nominal") -> float:
    if level != "nominal":
        raise StatsError(f"only the nominal level is supported, got {level!r}")
    if len(ratings.raters) < 2:
        raise StatsError("need at least two raters")
    _, o = coincidence_matrix(ratings)
    n = o.sum()
    if n == 0:
        raise StatsError("no pairable values")
    n_c = o.sum(axis=1)
    disagree_obs = o.sum() - np.trace(o)
    disagree_exp = (n_c.sum() ** 2 - np.dot(n_c, n_c)) / (n - 1)
    if disagree_exp == 0:
        return 1.0
    return float(1.0 - disagree_obs / disagree_exp)


def _paired_values(a: MetricReport, b: MetricReport, metric: str) -> tuple[list[float], list[float]]:
    sa, sb = {m.synset for m in a.synsets}, {m.synset for m in b.synsets}
    if sa != sb:
        diff = sorted(sa ^ sb)
        raise StatsError(f"reports cover different synsets, e.g. {diff[:5]}")
    va, vb = a.values(metric), b.values(metric)
    keys = sorted(set(va) & set(vb))
    return [va[k] for k in keys], [vb[k] for k in keys]


def pairwise_correlations(reports: Sequence[MetricReport], metric: str) -> list[dict]:
    if len(reports) < 2:
        raise StatsError("need at least two reports")
    out = []
    for i, j in itertools.combinations(range(len(reports)), 2):
        xa, xb = _paired_values(reports[i], reports[j], metric)
        rho, p = spearman(xa, xb)
        out.append({"a": i, "b": j, "model_a": reports[i].model_id, "model_b": reports[j].model_id,
                    "n": len(xa), "rho": rho, "p": p})
    return out


def pairwise_seed_correlation(reports: Sequence[MetricReport], metric: str) -> float:
    """Mean Spearman rho over all unordered pairs of reports."""
    pairs = pairwise_correlations(reports, metric)
    return math.fsum(p["rho"] for p in pairs) / len(pairs)


def stability_summary(reports: Sequence[MetricReport]) -> dict:
    """Mean, standard deviation and relative deviation of the aggregates across runs."""
    out = {}
    for key in ("aggregate_isp", "aggregate_scs"):
        vals = np.array([getattr(r, key) for r in reports])
        mean = float(vals.mean())
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key] = {"mean": mean, "std": std, "relative_std": std / mean if mean else 0.0}
    return out
