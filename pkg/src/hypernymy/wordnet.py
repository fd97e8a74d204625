"""Convert a WordNet ``data.noun`` database file into the hierarchy text formats.

Only hypernym pointers (``@`` and, optionally, instance hypernyms ``@i``)
between noun synsets are followed.  The graph is restricted to the
ancestors of the requested leaf WNIDs.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .hierarchy import HierarchyError, HierarchyGraph, build_hierarchy, check_wnid


def parse_data_noun(path: str | Path, pointers: Iterable[str] = ("@", "@i")):
    """Return ``(parents, lemmas)`` dictionaries keyed by WNID.

    Lines follow the lexicographer data format::

        offset lex_filenum ss_type w_cnt word lex_id [word lex_id...] p_cnt
        [ptr...] [frames...] | gloss
    """
    wanted = set(pointers)
    parents: dict[str, list[str]] = {}
    lemmas: dict[str, list[str]] = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("  "):  # license header
                continue
            fields = line.split(" | ", 1)[0].split()
            try:
                wnid = "n" + fields[0]
                w_cnt = int(fields[3], 16)
                words = [fields[4 + 2 * i] for i in range(w_cnt)]
                pos = 4 + 2 * w_cnt
                p_cnt = int(fields[pos])
                ptrs = []
                for k in range(p_cnt):
                    symbol, offset, ptr_pos, _ = fields[pos + 1 + 4 * k: pos + 5 + 4 * k]
                    if symbol in wanted and ptr_pos == "n":
                        ptrs.append("n" + offset)
            except (IndexError, ValueError) as exc:
                raise HierarchyError(f"{path}:{lineno}: cannot parse synset record ({exc})") from None
            parents[wnid] = ptrs
            lemmas[wnid] = words
    return parents, lemmas


def read_wnid_list(path: str | Path) -> list[str]:
    """Read one WNID per line (the usual ``synsets.txt`` ordering = class index)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(check_wnid(line.split()[0]))
    return out


def hierarchy_from_wordnet(
    data_noun: str | Path,
    leaf_wnids: list[str],
    pointers: Iterable[str] = ("@", "@i"),
) -> HierarchyGraph:
    parents, lemmas = parse_data_noun(data_noun, pointers)
    missing = [w for w in leaf_wnids if w not in parents]
    if missing:
        raise HierarchyError(f"leaf synsets absent from {data_noun}: {missing[:10]}")
    edges = []
    seen: set[str] = set()
    stack = list(leaf_wnids)
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        for parent in parents[node]:
            edges.append((node, parent))
            stack.append(parent)
    if len(leaf_wnids) == 1 and not edges:
        seen = {leaf_wnids[0]}
    return build_hierarchy(edges, leaf_wnids, {w: lemmas[w] for w in seen})
