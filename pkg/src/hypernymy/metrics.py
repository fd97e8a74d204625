"""In-Subtree Probability (ISP) and Subtree Coverage Score (SCS).

For a synset ``s`` with classifiable subtree ``A(s)`` and generated samples
``X_s``:

* ``ISP(s)`` is the mean, over samples, of the classifier probability mass
  that falls inside ``A(s)`` (taken from the full class distribution);
* ``SCS(s)`` is the mean KL divergence (natural log) between each sample's
  hyponym distribution (the class distribution conditioned on ``A(s)``) and
  the average hyponym distribution over all samples.

Model-level scores average the per-synset values and divide by a normalizer.
Synsets with a single leaf in their subtree always score SCS = 0 and are left
out of the SCS average, but are kept for ISP.

All sums run through :func:`math.fsum`, so results do not depend on the
summation order or on how the work is split between processes.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .hierarchy import HierarchyGraph
from .ingest import PredictionSet, conditional_rows, softmax

PAPER_SCS_NORMALIZER = 1.624
NORMALIZER_MODES = ("derived", "derived-capped", "paper", "none")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SynsetMetrics:
    synset: str
    isp: float
    scs: float | None  # None when the subtree has a single leaf
    n_samples: int
    subtree_size: int
    degenerate_rows: int = 0


@dataclass
class MetricReport:
    model_id: str
    synsets: list[SynsetMetrics]
    aggregate_isp: float
    aggregate_scs: float
    mean_isp: float
    mean_scs: float
    isp_normalizer: float = 1.0
    scs_normalizer: float = 1.0
    normalizer_mode: str = "none"
    seed: int = 0
    n_scs_included: int = 0
    n_scs_excluded: int = 0
    degenerate_rows: int = 0
    meta: dict = field(default_factory=dict)

    def by_synset(self) -> dict[str, SynsetMetrics]:
        return {m.synset: m for m in self.synsets}

    def values(self, metric: str) -> dict[str, float]:
        """Per-synset values; SCS-excluded synsets are omitted for ``scs``."""
        if metric not in ("isp", "scs"):
            raise ValueError(f"unknown metric {metric!r}")
        out = {}
        for m in self.synsets:
            v = getattr(m, metric)
            if v is not None:
                out[m.synset] = v
        return out

    def to_dict(self) -> dict:
        d = {
            "model_id": self.model_id,
            "seed": self.seed,
            "aggregate_isp": self.aggregate_isp,
            "aggregate_scs": self.aggregate_scs,
            "mean_isp": self.mean_isp,
            "mean_scs": self.mean_scs,
            "isp_normalizer": self.isp_normalizer,
            "scs_normalizer": self.scs_normalizer,
            "normalizer_mode": self.normalizer_mode,
            "n_synsets": len(self.synsets),
            "n_scs_included": self.n_scs_included,
            "n_scs_excluded": self.n_scs_excluded,
            "degenerate_rows": self.degenerate_rows,
            "meta": self.meta,
            "synsets": [asdict(m) for m in self.synsets],
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def to_csv(self) -> str:
        lines = ["synset,isp,scs,subtree_size,n_samples"]
        for m in self.synsets:
            scs = "" if m.scs is None else repr(m.scs)
            lines.append(f"{m.synset},{m.isp!r},{scs},{m.subtree_size},{m.n_samples}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        fields = {f: d[f] for f in (
            "model_id", "aggregate_isp", "aggregate_scs", "mean_isp", "mean_scs",
            "isp_normalizer", "scs_normalizer", "normalizer_mode", "seed",
            "n_scs_included", "n_scs_excluded", "degenerate_rows") if f in d}
        synsets = [SynsetMetrics(**m) for m in d["synsets"]]
        return cls(synsets=synsets, meta=d.get("meta", {}), **fields)


def load_report(path) -> MetricReport:
    with open(path, encoding="utf-8") as fh:
        return MetricReport.from_dict(json.load(fh))


def _row_masses(mat: np.ndarray, leaf_indices: np.ndarray, kind: str) -> np.ndarray:
    probs = softmax(mat) if kind == "logits" else np.asarray(mat, dtype=np.float64)
    sub = probs[:, leaf_indices]
    return np.array([math.fsum(r) for r in sub])


def isp(rows: np.ndarray, leaf_indices: Sequence[int], kind: str = "probabilities") -> float:
    """Mean in-subtree probability mass of ``rows`` (full class distributions)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    idx = np.asarray(leaf_indices, dtype=np.int64)
    if len(rows) == 0 or len(idx) == 0:
        raise MetricError("ISP needs at least one sample and a non-empty subtree")
    value = math.fsum(_row_masses(rows, idx, kind)) / len(rows)
    return min(max(value, 0.0), 1.0)


def mean_kl_to_mixture(cond: np.ndarray) -> float:
    """Mean KL(row || column-mean) over the rows of a row-stochastic matrix."""
    n = len(cond)
    mix = np.array([math.fsum(col) for col in cond.T]) / n
    # columns that are constant across samples average to exactly that constant
    const = np.all(cond == cond[0], axis=0)
    mix[const] = cond[0, const]
    kls = []
    for row in cond:
        nz = row > 0
        p = row[nz]
        kls.append(math.fsum(p * (np.log(p) - np.log(mix[nz]))))
    return max(math.fsum(kls) / n, 0.0)


def scs(rows: np.ndarray, leaf_indices: Sequence[int], kind: str = "probabilities") -> float | None:
    """Subtree Coverage Score, or ``None`` for single-leaf subtrees."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    idx = np.asarray(leaf_indices, dtype=np.int64)
    if len(rows) == 0:
        raise MetricError("SCS needs at least one sample")
    if len(idx) <= 1:
        return None
    cond, _ = conditional_rows(rows, idx, kind)
    return mean_kl_to_mixture(cond)


def synset_metrics(synset: str, rows: np.ndarray, leaf_indices: np.ndarray, kind: str) -> SynsetMetrics:
    value_isp = isp(rows, leaf_indices, kind)
    if len(leaf_indices) > 1:
        cond, degenerate = conditional_rows(rows, leaf_indices, kind)
        value_scs = mean_kl_to_mixture(cond)
    else:
        value_scs, degenerate = None, 0
    return SynsetMetrics(synset, value_isp, value_scs, len(rows), len(leaf_indices), degenerate)


def _evaluate_chunk(chunk):
    kind, items = chunk
    return [synset_metrics(s, rows, idx, kind) for s, rows, idx in items]


def evaluate_synsets(graph: HierarchyGraph, preds: PredictionSet, jobs: int = 1,
                     synsets: Iterable[str] | None = None) -> list[SynsetMetrics]:
    """Per-synset metrics for every evaluation synset (or the given subset)."""
    if preds.n_classes != len(graph.leaves):
        raise MetricError(f"predictions have {preds.n_classes} classes, hierarchy has "
                          f"{len(graph.leaves)} leaves")
    wanted = sorted(synsets) if synsets is not None else list(graph.evaluation_set())
    missing = [s for s in wanted if s not in preds.rows]
    if missing:
        raise MetricError(f"no predictions for synset(s): {', '.join(missing[:20])}")
    items = [(s, preds.rows[s], graph.classifiable_subtree(s).leaf_indices) for s in wanted]
    if jobs <= 1 or len(items) < 2:
        return _evaluate_chunk((preds.kind, items))
    size = math.ceil(len(items) / jobs)
    chunks = [(preds.kind, items[i:i + size]) for i in range(0, len(items), size)]
    out: list[SynsetMetrics] = []
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for part in pool.map(_evaluate_chunk, chunks):
            out.extend(part)
    return out


def scs_normalizer(graph: HierarchyGraph, n_samples: int | None = None,
                   cap_by_samples: bool = False) -> float:
    """Largest attainable mean SCS over the synsets that enter the SCS average.

    For a subtree with ``k`` leaves, the per-synset SCS is bounded by ``ln k``
    (samples that each put all mass on a distinct leaf, spread uniformly).
    With ``cap_by_samples`` the bound becomes ``ln min(n_samples, k)``, the
    supremum reachable with a finite number of samples.
    """
    sizes = [len(graph.classifiable_subtree(s)) for s in graph.evaluation_set()]
    sizes = [k for k in sizes if k > 1]
    if not sizes:
        return 0.0
    if cap_by_samples:
        if n_samples is None or n_samples < 1:
            raise ValueError("cap_by_samples needs n_samples >= 1")
        sizes = [min(k, n_samples) for k in sizes]
    return math.fsum(math.log(k) for k in sizes) / len(sizes)


def aggregate(metrics: Sequence[SynsetMetrics], scs_norm: float = 1.0, isp_norm: float = 1.0,
              model_id: str = "", expected: Iterable[str] | None = None,
              normalizer_mode: str = "none", seed: int = 0) -> MetricReport:
    """Average per-synset metrics into a model-level report."""
    if expected is not None:
        have = {m.synset for m in metrics}
        missing = sorted(set(expected) - have)
        if missing:
            raise MetricError(f"missing metrics for synset(s): {', '.join(missing[:20])}")
    if not metrics:
        raise MetricError("no synset metrics to aggregate")
    metrics = sorted(metrics, key=lambda m: m.synset)
    mean_isp = math.fsum(m.isp for m in metrics) / len(metrics)
    included = [m.scs for m in metrics if m.scs is not None]
    mean_scs = math.fsum(included) / len(included) if included else 0.0
    agg_scs = mean_scs / scs_norm if scs_norm > 0 else 0.0
    return MetricReport(
        model_id=model_id,
        synsets=list(metrics),
        aggregate_isp=mean_isp / isp_norm,
        aggregate_scs=agg_scs,
        mean_isp=mean_isp,
        mean_scs=mean_scs,
        isp_normalizer=isp_norm,
        scs_normalizer=scs_norm,
        normalizer_mode=normalizer_mode,
        seed=seed,
        n_scs_included=len(included),
        n_scs_excluded=len(metrics) - len(included),
        degenerate_rows=sum(m.degenerate_rows for m in metrics),
    )


def resolve_normalizer(graph: HierarchyGraph, mode: str | float, n_samples: int | None = None) -> tuple[float, str]:
    if isinstance(mode, (int, float)):
        return float(mode), "fixed"
    if mode == "derived":
        return scs_normalizer(graph, n_samples), mode
    if mode == "derived-capped":
        return scs_normalizer(graph, n_samples, cap_by_samples=True), mode
    if mode == "paper":
        return PAPER_SCS_NORMALIZER, mode
    if mode == "none":
        return 1.0, mode
    raise ValueError(f"unknown normalizer mode {mode!r}")


def evaluate(graph: HierarchyGraph, preds: PredictionSet, normalizer: str | float = "derived",
             jobs: int = 1) -> MetricReport:
    """Per-synset metrics plus normalized aggregates for one prediction set."""
    per_synset = evaluate_synsets(graph, preds, jobs=jobs)
    n = max(m.n_samples for m in per_synset)
    norm, mode = resolve_normalizer(graph, normalizer, n)
    report = aggregate(per_synset, scs_norm=norm, model_id=preds.model_id,
                       expected=graph.evaluation_set(), normalizer_mode=mode, seed=preds.seed)
    return report
