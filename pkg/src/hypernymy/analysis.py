"""Analyses built on metric reports: worst concepts, model differences,
subtree aggregates and encoder-embedding similarity."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .hierarchy import HierarchyGraph, make_prompt
from .ingest import EmbeddingTable
from .metrics import MetricReport
from .stats import spearman


class AnalysisError(ValueError):
    pass


METRICS = ("isp", "scs")


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise AnalysisError(f"unknown metric {metric!r}; choose from {METRICS}")


def mean_values(reports: Sequence[MetricReport], metric: str) -> dict[str, float]:
    """Per-synset mean of ``metric`` over synsets that every report scores."""
    _check_metric(metric)
    if not reports:
        raise AnalysisError("no reports given")
    per_report = [r.values(metric) for r in reports]
    shared = set(per_report[0]).intersection(*per_report[1:])
    return {s: math.fsum(v[s] for v in per_report) / len(per_report) for s in sorted(shared)}


def _ranked(values: Mapping[str, float], metric: str, graph: HierarchyGraph | None) -> list[dict]:
    order = sorted(values, key=lambda s: (values[s], s))
    out = []
    for rank, synset in enumerate(order, 1):
        entry = {"rank": rank, "synset": synset, metric: values[synset]}
        if graph is not None and synset in graph.parents:
            lemma = graph.first_lemma(synset)
            entry["lemma"] = lemma
            entry["prompt"] = make_prompt(lemma)
        out.append(entry)
    return out


def worst_synsets(report: MetricReport | Sequence[MetricReport], metric: str, k: int,
                  graph: HierarchyGraph | None = None) -> list[dict]:
    """The ``k`` synsets with the lowest ``metric``, ties broken by synset id.

    Passing several reports ranks the per-synset mean across them.  With a
    ``graph`` each entry also carries the lemma and the prompt that produced
    the images.  SCS ranking skips synsets excluded from the SCS average.
    """
    if k < 1:
        raise AnalysisError("k must be >= 1")
    reports = [report] if isinstance(report, MetricReport) else list(report)
    values = mean_values(reports, metric)
    if k > len(values):
        warnings.warn(f"k={k} exceeds the {len(values)} ranked synsets; clamped", stacklevel=2)
    ranked = _ranked(values, metric, graph)
    return ranked[:k]


def best_synsets(report: MetricReport | Sequence[MetricReport], metric: str, k: int,
                 graph: HierarchyGraph | None = None) -> list[dict]:
    """Reverse of the full worst-first ranking, truncated to ``k``."""
    if k < 1:
        raise AnalysisError("k must be >= 1")
    reports = [report] if isinstance(report, MetricReport) else list(report)
    ranked = _ranked(mean_values(reports, metric), metric, graph)[::-1][:k]
    for rank, entry in enumerate(ranked, 1):
        entry["rank"] = rank
    return ranked


def format_listing(entries: Iterable[dict], metric: str) -> str:
    """Plain-text listing, one synset per line, for manual image inspection."""
    lines = []
    for e in entries:
        prompt = e.get("prompt", "")
        lines.append(f"{e['rank']:>4}  {e['synset']}  {e[metric]:.4f}  {prompt}".rstrip())
    return "\n".join(lines) + "\n"


@dataclass
class ModelDiff:
    metric: str
    model_a: str
    model_b: str
    diffs: list[tuple[str, float]]  # sorted, largest a - b first
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "model_a": self.model_a,
            "model_b": self.model_b,
            "summary": self.summary,
            "diffs": [{"synset": s, "diff": d} for s, d in self.diffs],
        }


def model_diff(report_a: MetricReport, report_b: MetricReport, metric: str) -> ModelDiff:
    """Per-synset ``a - b`` ranked from the largest to the smallest difference."""
    _check_metric(metric)
    sa = {m.synset for m in report_a.synsets}
    sb = {m.synset for m in report_b.synsets}
    if sa != sb:
        only = sorted(sa ^ sb)
        raise AnalysisError(f"reports cover different synsets ({len(only)} differ, e.g. "
                            f"{', '.join(only[:5])})")
    va, vb = report_a.values(metric), report_b.values(metric)
    if set(va) != set(vb):
        raise AnalysisError(f"reports disagree on which synsets have {metric}")
    diffs = sorted(((s, va[s] - vb[s]) for s in va), key=lambda t: (-t[1], t[0]))
    d = np.array([x for _, x in diffs])
    summary: dict = {"n": len(d)}
    if len(d):
        qs = np.quantile(d, [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0])
        summary.update({
            "mean": math.fsum(d) / len(d),
            "min": float(qs[0]), "q05": float(qs[1]), "q25": float(qs[2]),
            "median": float(qs[3]), "q75": float(qs[4]), "q95": float(qs[5]),
            "max": float(qs[6]),
            "n_positive": int((d > 0).sum()),
            "n_negative": int((d < 0).sum()),
        })
    return ModelDiff(metric, report_a.model_id, report_b.model_id, diffs, summary)


def subtree_report(report: MetricReport, graph: HierarchyGraph, roots: Sequence[str]) -> list[dict]:
    """Metrics averaged over the evaluation synsets below each root.

    A root's members are all evaluation synsets reachable downward from it,
    the root included.  Means are divided by the report's normalizers, so a
    root at the top of the hierarchy reproduces the global aggregates.
    """
    eval_set = set(graph.evaluation_set())
    by_synset = report.by_synset()
    out = []
    for root in roots:
        if root not in eval_set:
            raise AnalysisError(f"{root} is not in the evaluation set")
        members = sorted((graph.descendants(root, include_self=True) & eval_set) & set(by_synset))
        if not members:
            raise AnalysisError(f"report has no synsets below {root}")
        isps = [by_synset[s].isp for s in members]
        scss = [by_synset[s].scs for s in members if by_synset[s].scs is not None]
        mean_isp = math.fsum(isps) / len(isps)
        mean_scs = math.fsum(scss) / len(scss) if scss else 0.0
        out.append({
            "root": root,
            "lemma": graph.first_lemma(root),
            "n_synsets": len(members),
            "n_scs_included": len(scss),
            "mean_isp": mean_isp,
            "mean_scs": mean_scs,
            "aggregate_isp": mean_isp / report.isp_normalizer,
            "aggregate_scs": mean_scs / report.scs_normalizer if report.scs_normalizer > 0 else 0.0,
        })
    return out


def hyponym_similarity(embeddings: EmbeddingTable, graph: HierarchyGraph,
                       synsets: Iterable[str] | None = None) -> tuple[dict[str, float], list[str]]:
    """Mean cosine similarity between each synset and the leaves of its subtree.

    Returns the similarities and the synsets skipped because their own vector
    or a leaf vector is missing.
    """
    wanted = list(graph.evaluation_set() if synsets is None else synsets)
    unit: dict[str, np.ndarray] = {}

    def get(s: str) -> np.ndarray:
        if s not in unit:
            v = np.asarray(embeddings.vectors[s], dtype=np.float64)
            norm = np.linalg.norm(v)
            if norm == 0 or not np.isfinite(norm):
                raise AnalysisError(f"embedding for {s} has zero or non-finite norm")
            unit[s] = v / norm
        return unit[s]

    sims: dict[str, float] = {}
    missing: list[str] = []
    for s in wanted:
        leaves = [graph.leaves[i] for i in graph.classifiable_subtree(s).leaf_indices]
        if s not in embeddings or any(leaf not in embeddings for leaf in leaves):
            missing.append(s)
            continue
        anchor = get(s)
        sims[s] = math.fsum(float(anchor @ get(leaf)) for leaf in leaves) / len(leaves)
    return sims, missing


def similarity_metric_correlation(similarities: Mapping[str, float], report: MetricReport,
                                  metric: str) -> tuple[float, float]:
    """Spearman correlation between hyponym similarities and a metric."""
    _check_metric(metric)
    values = report.values(metric)
    keys = sorted(set(similarities) & set(values))
    if len(keys) < 3:
        raise AnalysisError(f"only {len(keys)} synsets shared by similarities and report")
    return spearman([similarities[k] for k in keys], [values[k] for k in keys])
