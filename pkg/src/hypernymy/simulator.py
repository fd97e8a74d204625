"""Synthetic generator+classifier pipelines for validating metric behaviour.

Every random draw comes from a Philox generator keyed by
``(seed, synset offset, stream, index)``, so a synset's rows do not depend on
which other synsets are simulated, in what order, or in how many processes.
Sample ``i`` of a synset is identical for any ``n_samples > i``.

Profiles
--------
perfect
    one-hot rows cycling through random permutations of ``A(s)``, so every
    leaf is drawn equally often (marginally uniform per sample)
collapsed
    one-hot rows, always the same leaf of ``A(s)``
ignorant
    one-hot rows on a uniformly drawn class out of all classes
mixture, concentrated
    softmax rows of ``concentration * (affinity + boost * target + noise)``.
    ``coverage`` leaves of ``A(s)`` are "known" and share the affinity,
    chosen so that at concentration 1 without noise the in-subtree mass is
    ``in_subtree_mass``.  Each sample favours one target leaf: uniformly for
    ``mixture``; for ``concentrated`` the choice is skewed towards a fixed
    favourite with strength ``concentration``, so high values collapse onto
    a single hyponym.
"""

from __future__ import annotations

import configparser
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .hierarchy import HierarchyGraph, wnid_offset
from .ingest import PredictionSet, softmax
from .metrics import MetricReport, evaluate

KINDS = ("perfect", "collapsed", "ignorant", "mixture", "concentrated")
TARGET_BOOST = 2.0

# stream tags for the keyed generators
_CYCLE, _FIXED, _SAMPLE, _KNOWN, _FAVOURITE = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class CompetenceProfile:
    kind: str = "mixture"
    in_subtree_mass: float = 0.5
    concentration: float = 1.0
    coverage: int | None = None  # None = every leaf of A(s)
    noise_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}; choose from {KINDS}")
        if not 0.0 <= self.in_subtree_mass <= 1.0:
            raise ValueError("in_subtree_mass must lie in [0, 1]")
        if not self.concentration > 0:
            raise ValueError("concentration must be > 0")
        if self.coverage is not None and self.coverage < 1:
            raise ValueError("coverage must be >= 1 or 'all'")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


def profile_from_mapping(values: Mapping[str, str]) -> CompetenceProfile:
    kw: dict = {}
    for key, raw in values.items():
        raw = str(raw).strip()
        if key == "kind":
            kw[key] = raw
        elif key in ("in_subtree_mass", "concentration", "noise_scale"):
            kw[key] = float(raw)
        elif key == "coverage":
            kw[key] = None if raw.lower() == "all" else int(raw)
        elif key == "seed":
            kw[key] = int(raw)
        else:
            raise ValueError(f"unknown profile key {key!r}")
    return CompetenceProfile(**kw)


def load_profile(path) -> CompetenceProfile:
    """Read a profile from an INI file with a ``[profile]`` section."""
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    if "profile" not in parser:
        raise ValueError(f"{path}: missing [profile] section")
    return profile_from_mapping(dict(parser["profile"]))


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def _affinity(mass: float, n_known: int, n_classes: int) -> float:
    """Known-leaf logit offset giving in-subtree mass ``mass`` at concentration 1."""
    outside = n_classes - n_known
    if outside == 0 or mass <= 0.0:
        return 0.0
    if mass >= 1.0:
        return 50.0
    value = math.log(mass * outside / ((1.0 - mass) * (math.exp(TARGET_BOOST) + n_known - 1)))
    # a generator is never pushed away from the prompt's subtree
    return max(value, 0.0)


def _synset_rows(args) -> tuple[str, np.ndarray, bool]:
    synset, leaves, n_classes, profile, n_samples, mass = args
    off = wnid_offset(synset)
    seed = profile.seed
    k = len(leaves)
    rows = np.zeros((n_samples, n_classes))
    clamped = False

    if profile.kind == "perfect":
        for i in range(n_samples):
            cycle, pos = divmod(i, k)
            order = _rng(seed, off, _CYCLE, cycle).permutation(k)
            rows[i, leaves[order[pos]]] = 1.0
        return synset, rows, clamped
    if profile.kind == "collapsed":
        fixed = leaves[_rng(seed, off, _FIXED).integers(k)]
        rows[:, fixed] = 1.0
        return synset, rows, clamped
    if profile.kind == "ignorant":
        for i in range(n_samples):
            rows[i, _rng(seed, off, _SAMPLE, i).integers(n_classes)] = 1.0
        return synset, rows, clamped

    coverage = k if profile.coverage is None else profile.coverage
    if coverage > k:
        coverage, clamped = k, True
    known = leaves[np.sort(_rng(seed, off, _KNOWN).permutation(k)[:coverage])]
    c = profile.concentration
    base = np.zeros(n_classes)
    base[known] = _affinity(mass, coverage, n_classes)
    if profile.kind == "concentrated":
        favour = _rng(seed, off, _FAVOURITE).standard_normal(coverage)
        weights = softmax(c * favour)
    else:
        weights = np.full(coverage, 1.0 / coverage)
    cdf = np.cumsum(weights)
    for i in range(n_samples):
        g = _rng(seed, off, _SAMPLE, i)
        u = g.random()
        noise = g.standard_normal(n_classes)
        target = known[min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), coverage - 1)]
        logits = base + profile.noise_scale * noise
        logits[target] += TARGET_BOOST
        rows[i] = softmax(c * logits)
    return synset, rows, clamped


def simulate(graph: HierarchyGraph, profile: CompetenceProfile, n_samples: int = 32,
             mass_by_synset: Mapping[str, float] | None = None, jobs: int = 1,
             model_id: str | None = None) -> PredictionSet:
    """Probability rows for every evaluation synset under ``profile``.

    ``mass_by_synset`` overrides ``in_subtree_mass`` per synset (used to plant
    known per-synset differences).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    masses = mass_by_synset or {}
    tasks = []
    for synset in graph.evaluation_set():
        leaves = graph.classifiable_subtree(synset).leaf_indices
        mass = masses.get(synset, profile.in_subtree_mass)
        tasks.append((synset, leaves, len(graph.leaves), profile, n_samples, mass))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_synset_rows, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_synset_rows(t) for t in tasks]
    n_clamped = sum(1 for _, _, c in results if c)
    if n_clamped:
        warnings.warn(f"coverage {profile.coverage} exceeds the subtree size of {n_clamped} "
                      f"synset(s); clamped", stacklevel=2)
    rows = {s: r for s, r, _ in results}
    name = model_id or f"sim-{profile.kind}-c{profile.concentration:g}"
    return PredictionSet("probabilities", rows, model_id=name, seed=profile.seed)


def guidance_sweep(graph: HierarchyGraph, base: CompetenceProfile, concentrations: Sequence[float],
                   n_samples: int = 32, normalizer: str | float = "derived",
                   jobs: int = 1) -> list[MetricReport]:
    """One report per concentration value, in the given order."""
    reports = []
    for c in concentrations:
        profile = replace(base, concentration=float(c))
        report = evaluate(graph, simulate(graph, profile, n_samples, jobs=jobs), normalizer, jobs=jobs)
        report.meta["concentration"] = float(c)
        reports.append(report)
    return reports
