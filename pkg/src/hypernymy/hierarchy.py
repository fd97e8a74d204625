"""WordNet hypernym hierarchy restricted to the ancestors of ImageNet leaf classes.

The graph is read from two plain-text files (plus an optional third one):

* edge file: ``<child_wnid> <parent_wnid>`` per line, ``#`` starts a comment
* leaf map: ``<class_index> <wnid> <lemma1|lemma2|...>`` per line
* lemma file (optional): ``<wnid> <lemma1|lemma2|...>`` per line, supplies the
  lemmas of internal synsets, which are needed to build prompts
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

WNID_RE = re.compile(r"^n\d{8}$")
PROMPT_TEMPLATE = "An image of {article} {lemma}."


class HierarchyError(ValueError):
    """Raised when hierarchy files are malformed or violate graph invariants."""


def check_wnid(wnid: str) -> str:
    if not WNID_RE.match(wnid):
        raise HierarchyError(f"malformed synset id {wnid!r} (expected 'n' + 8 digits)")
    return wnid


def wnid_offset(wnid: str) -> int:
    return int(check_wnid(wnid)[1:])


def wnid_from_offset(offset: int) -> str:
    if not 0 <= offset < 10**8:
        raise HierarchyError(f"synset offset {offset} does not fit in 8 digits")
    return f"n{offset:08d}"


@dataclass(frozen=True)
class ClassifiableSubtree:
    synset: str
    leaf_indices: np.ndarray  # sorted int64 class indices

    def __len__(self) -> int:
        return len(self.leaf_indices)


@dataclass(frozen=True)
class PromptEntry:
    synset: str
    lemma: str
    prompt: str

    def to_dict(self) -> dict:
        return {"synset": self.synset, "lemma": self.lemma, "prompt": self.prompt}


@dataclass(frozen=True, eq=False)
class HierarchyGraph:
    """Immutable hypernym DAG.

    ``parents`` maps every node to its hypernyms (empty tuple for the root).
    ``leaves[i]`` is the synset of class index ``i``.
    """

    parents: Mapping[str, tuple[str, ...]]
    leaves: tuple[str, ...]
    lemmas: Mapping[str, tuple[str, ...]]

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self.parents)

    @cached_property
    def children(self) -> dict[str, tuple[str, ...]]:
        kids: dict[str, list[str]] = {n: [] for n in self.parents}
        for child in sorted(self.parents):
            for parent in self.parents[child]:
                kids[parent].append(child)
        return {n: tuple(c) for n, c in kids.items()}

    @cached_property
    def root(self) -> str:
        roots = [n for n, ps in self.parents.items() if not ps]
        if len(roots) != 1:
            raise HierarchyError(f"expected exactly one root, found {sorted(roots)}")
        return roots[0]

    @cached_property
    def leaf_index(self) -> dict[str, int]:
        return {wnid: i for i, wnid in enumerate(self.leaves)}

    @cached_property
    def _subtree_sets(self) -> dict[str, np.ndarray]:
        members: dict[str, list[int]] = {n: [] for n in self.parents}
        for idx, leaf in enumerate(self.leaves):
            for node in self.ancestors(leaf, include_self=True):
                members[node].append(idx)
        return {n: np.array(sorted(m), dtype=np.int64) for n, m in members.items()}

    def ancestors(self, synset: str, include_self: bool = False) -> set[str]:
        seen = {synset} if include_self else set()
        stack = list(self.parents[synset])
        while stack:
            node = stack.pop()
            if node not in seen:
                seen.add(node)
                stack.extend(self.parents[node])
        return seen

    def descendants(self, synset: str, include_self: bool = False) -> set[str]:
        if synset not in self.parents:
            raise KeyError(synset)
        seen = {synset} if include_self else set()
        stack = list(self.children[synset])
        while stack:
            node = stack.pop()
            if node not in seen:
                seen.add(node)
                stack.extend(self.children[node])
        return seen

    @cached_property
    def _evaluation(self) -> tuple[str, ...]:
        leaves = set(self.leaves)
        found: set[str] = set()
        for leaf in self.leaves:
            found |= self.ancestors(leaf)
        return tuple(sorted(found - leaves))

    def evaluation_set(self) -> tuple[str, ...]:
        """All strict hypernyms of the leaves, leaves excluded, sorted by id."""
        return self._evaluation

    def classifiable_subtree(self, synset: str) -> ClassifiableSubtree:
        try:
            indices = self._subtree_sets[synset]
        except KeyError:
            raise KeyError(f"unknown synset {synset!r}") from None
        return ClassifiableSubtree(synset, indices)

    @cached_property
    def leaf_distance(self) -> dict[str, int]:
        """Length of the shortest downward path from each node to any leaf."""
        dist = {leaf: 0 for leaf in self.leaves}
        queue = deque(self.leaves)
        while queue:
            node = queue.popleft()
            for parent in self.parents[node]:
                if parent not in dist:
                    dist[parent] = dist[node] + 1
                    queue.append(parent)
        return dist

    def first_lemma(self, synset: str) -> str:
        names = self.lemmas.get(synset, ())
        if not names:
            raise HierarchyError(f"synset {synset} has no lemma")
        return names[0]


def _read_lines(path: Path) -> Iterable[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _find_cycle(parents: Mapping[str, Iterable[str]]) -> list[str] | None:
    state: dict[str, int] = {}  # 1 = on stack, 2 = done
    for start in sorted(parents):
        if start in state:
            continue
        path = [start]
        iters = [iter(parents[start])]
        state[start] = 1
        while iters:
            nxt = next(iters[-1], None)
            if nxt is None:
                state[path.pop()] = 2
                iters.pop()
                continue
            mark = state.get(nxt)
            if mark == 1:
                return path[path.index(nxt):] + [nxt]
            if mark is None:
                state[nxt] = 1
                path.append(nxt)
                iters.append(iter(parents.get(nxt, ())))
    return None


def build_hierarchy(
    edges: Iterable[tuple[str, str]],
    leaves: list[str],
    lemmas: Mapping[str, Iterable[str]],
    n_leaves: int | None = None,
) -> HierarchyGraph:
    """Validate raw edges/leaves and return the graph restricted to leaf ancestors."""
    raw: dict[str, list[str]] = {}
    for child, parent in edges:
        check_wnid(child)
        check_wnid(parent)
        raw.setdefault(child, [])
        raw.setdefault(parent, [])
        if parent not in raw[child]:
            raw[child].append(parent)

    if n_leaves is not None and len(leaves) != n_leaves:
        raise HierarchyError(f"expected {n_leaves} leaves, leaf map declares {len(leaves)}")
    if not leaves:
        raise HierarchyError("leaf map is empty")
    if len(set(leaves)) != len(leaves):
        dup = sorted({w for w in leaves if leaves.count(w) > 1})
        raise HierarchyError(f"synset mapped to several class indices: {dup}")
    for wnid in leaves:
        check_wnid(wnid)
        if wnid not in raw:
            if len(leaves) == 1 and not raw:
                raw[wnid] = []
            else:
                raise HierarchyError(f"dangling leaf {wnid}: not present in the edge file")

    cycle = _find_cycle(raw)
    if cycle:
        raise HierarchyError("cycle detected: " + " -> ".join(cycle))

    keep: set[str] = set()
    stack = list(leaves)
    while stack:
        node = stack.pop()
        if node not in keep:
            keep.add(node)
            stack.extend(raw[node])
    parents = {n: tuple(sorted(raw[n])) for n in sorted(keep)}

    roots = sorted(n for n, ps in parents.items() if not ps)
    if len(roots) != 1:
        graph = HierarchyGraph(parents, tuple(leaves), {})
        reach = {r: [leaf for leaf in leaves if r in graph.ancestors(leaf, True)] for r in roots}
        main = max(roots, key=lambda r: len(reach[r]))
        stray = sorted(set(leaves) - set(reach[main]))
        raise HierarchyError(
            f"expected one root, found {len(roots)} ({', '.join(roots)}); "
            f"leaves unreachable from {main}: {stray[:10]}"
        )

    for wnid in lemmas:
        if wnid not in raw:
            raise HierarchyError(f"dangling lemma entry for unknown synset {wnid}")
    lemma_map = {n: tuple(lemmas[n]) for n in sorted(keep) if n in lemmas}
    return HierarchyGraph(parents, tuple(leaves), lemma_map)


def load_hierarchy(
    edge_file: str | Path,
    leaf_map_file: str | Path,
    lemma_file: str | Path | None = None,
    n_leaves: int | None = None,
) -> HierarchyGraph:
    """Load and validate a hierarchy from text files.

    ``n_leaves`` enforces the declared leaf count (1000 for ImageNet-1k).
    """
    edges = []
    for lineno, fields in _read_lines(Path(edge_file)):
        if len(fields) != 2:
            raise HierarchyError(f"{edge_file}:{lineno}: expected '<child> <parent>'")
        edges.append((fields[0], fields[1]))

    by_index: dict[int, str] = {}
    lemmas: dict[str, list[str]] = {}
    for lineno, fields in _read_lines(Path(leaf_map_file)):
        if len(fields) not in (2, 3):
            raise HierarchyError(f"{leaf_map_file}:{lineno}: expected '<index> <wnid> <lemmas>'")
        try:
            idx = int(fields[0])
        except ValueError:
            raise HierarchyError(f"{leaf_map_file}:{lineno}: bad class index {fields[0]!r}") from None
        if idx in by_index:
            raise HierarchyError(f"{leaf_map_file}:{lineno}: duplicate class index {idx}")
        by_index[idx] = check_wnid(fields[1])
        if len(fields) == 3:
            lemmas[fields[1]] = [x for x in fields[2].split("|") if x]
    if sorted(by_index) != list(range(len(by_index))):
        raise HierarchyError("class indices must be exactly 0..N-1")
    leaves = [by_index[i] for i in range(len(by_index))]

    if lemma_file is not None:
        for lineno, fields in _read_lines(Path(lemma_file)):
            if len(fields) != 2:
                raise HierarchyError(f"{lemma_file}:{lineno}: expected '<wnid> <lemmas>'")
            lemmas.setdefault(check_wnid(fields[0]), [x for x in fields[1].split("|") if x])

    return build_hierarchy(edges, leaves, lemmas, n_leaves=n_leaves)


def save_hierarchy(
    graph: HierarchyGraph,
    edge_file: str | Path,
    leaf_map_file: str | Path,
    lemma_file: str | Path | None = None,
) -> None:
    with open(edge_file, "w", encoding="utf-8") as fh:
        fh.write("# child parent\n")
        for child in sorted(graph.parents):
            for parent in graph.parents[child]:
                fh.write(f"{child} {parent}\n")
    with open(leaf_map_file, "w", encoding="utf-8") as fh:
        for idx, wnid in enumerate(graph.leaves):
            names = "|".join(graph.lemmas.get(wnid, ()))
            fh.write(f"{idx} {wnid} {names}\n".rstrip() + "\n")
    if lemma_file is not None:
        leaves = set(graph.leaves)
        with open(lemma_file, "w", encoding="utf-8") as fh:
            for wnid in sorted(graph.lemmas):
                if wnid not in leaves and graph.lemmas[wnid]:
                    fh.write(f"{wnid} {'|'.join(graph.lemmas[wnid])}\n")


def article_for(lemma: str) -> str:
    # letter-based, not phonetic: "an hour" is rendered "a hour"
    return "an" if lemma[:1].lower() in "aeiou" and lemma else "a"


def make_prompt(lemma: str) -> str:
    text = lemma.replace("_", " ")
    return PROMPT_TEMPLATE.format(article=article_for(text), lemma=text)


def prompt_manifest(graph: HierarchyGraph) -> list[PromptEntry]:
    entries = []
    for synset in graph.evaluation_set():
        lemma = graph.first_lemma(synset).replace("_", " ")
        entries.append(PromptEntry(synset, lemma, make_prompt(lemma)))
    return entries


def write_manifest(entries: Iterable[PromptEntry], fh) -> None:
    for entry in entries:
        fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")


def near_leaf_synsets(graph: HierarchyGraph, max_distance: int) -> list[str]:
    """Evaluation synsets whose closest leaf is at most ``max_distance`` edges below."""
    dist = graph.leaf_distance
    return [s for s in graph.evaluation_set() if dist[s] <= max_distance]


def hierarchy_stats(graph: HierarchyGraph) -> dict:
    evaluation = graph.evaluation_set()
    sizes = [len(graph.classifiable_subtree(s)) for s in evaluation]
    return {
        "n_nodes": len(graph.parents),
        "n_leaves": len(graph.leaves),
        "n_evaluation": len(evaluation),
        "n_singleton_subtrees": sum(1 for k in sizes if k == 1),
        "n_edges": sum(len(p) for p in graph.parents.values()),
        "root": graph.root,
        "height": max(graph.leaf_distance.values()),
    }
