"""Counting WordNet concepts in caption corpora.

Every lemma becomes a phrase pattern delimited by word boundaries.  Text and
patterns are normalized the same way: ASCII letters are lowercased, every
other ASCII character that is not a letter or digit (and every non-ASCII
character that is not alphanumeric) is a boundary, and runs of boundaries
collapse into one.  A pattern ``" green lizard "`` (boundaries included)
therefore matches only whole-word occurrences.

All patterns are matched in a single pass with an Aho-Corasick automaton
compiled to a dense transition table.  The scan loop runs under numba when it
is available and falls back to plain Python otherwise.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .hierarchy import HierarchyGraph
from .metrics import MetricReport
from .stats import StatsError, spearman

log = logging.getLogger(__name__)

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

NEWLINE = 10
BOUNDARY = 0
CHUNK_BYTES = 1 << 24


@dataclass(frozen=True)
class CountPolicy:
    per_caption: bool = True  # False counts every occurrence
    all_lemmas: bool = False  # False matches only the first lemma

    def describe(self) -> dict:
        return {
            "counting": "caption" if self.per_caption else "occurrence",
            "lemmas": "all" if self.all_lemmas else "first",
            "case": "ascii-lowercase",
            "boundary": "non-alphanumeric",
        }


def normalize_phrase(text: str) -> str:
    """Lowercase ASCII and turn every non-alphanumeric run into one space."""
    chars = [(ch.lower() if ch.isascii() else ch) if ch.isalnum() else " " for ch in text]
    return " ".join("".join(chars).split())


_NON_ASCII = re.compile(r"[^\x00-\x7f]+")


def _fix_non_ascii(chunk: bytes) -> bytes:
    """Replace non-alphanumeric non-ASCII characters with spaces."""
    text = chunk.decode("utf-8", errors="replace")

    def repl(m):
        return "".join(ch if ch.isalnum() else " " for ch in m.group())

    return _NON_ASCII.sub(repl, text).encode("utf-8")


class PhraseMatcher:
    """Aho-Corasick automaton over word-boundary-delimited phrases.

    ``targets[i]`` lists the ids that pattern ``i`` reports (several synsets
    can share one lemma).
    """

    def __init__(self, phrases: Sequence[str], targets: Sequence[Sequence[int]] | None = None):
        self.phrases = list(phrases)
        if targets is None:
            targets = [[i] for i in range(len(self.phrases))]
        self.n_targets = 1 + max((t for ts in targets for t in ts), default=-1)
        keys = [b" " + p.encode("utf-8") + b" " for p in self.phrases]

        # symbol classes: 0 = boundary, one class per byte used by patterns,
        # last class = any other word byte
        used = sorted({b for k in keys for b in k if b != 32})
        self.n_symbols = len(used) + 2
        other = self.n_symbols - 1
        cmap = np.full(256, other, dtype=np.int32)
        for i, b in enumerate(used, start=1):
            cmap[b] = i
        for b in range(128):
            ch = chr(b)
            if not ch.isalnum():
                cmap[b] = BOUNDARY
        for b in range(ord("A"), ord("Z") + 1):
            cmap[b] = cmap[b + 32]
        self.classes = cmap

        goto: list[dict[int, int]] = [{}]
        own = [-1]
        for pid, key in enumerate(keys):
            s = 0
            for b in key:
                sym = int(cmap[b])
                nxt = goto[s].get(sym)
                if nxt is None:
                    nxt = len(goto)
                    goto[s][sym] = nxt
                    goto.append({})
                    own.append(-1)
                s = nxt
            if own[s] != -1:
                raise ValueError(f"duplicate phrase {self.phrases[pid]!r}")
            own[s] = pid

        # renumber states breadth-first so the shallow, frequently visited
        # states sit together in the transition table
        order = [0]
        for s in order:
            order.extend(goto[s][sym] for sym in sorted(goto[s]))
        rank = {old: new for new, old in enumerate(order)}
        goto = [{sym: rank[nxt] for sym, nxt in goto[old].items()} for old in order]
        own = [own[old] for old in order]

        n = len(goto)
        delta = np.zeros((n, self.n_symbols), dtype=np.int32)
        fail = np.zeros(n, dtype=np.int32)
        olink = np.full(n, -1, dtype=np.int32)
        for sym, nxt in goto[0].items():
            delta[0, sym] = nxt
        for s in range(1, n):  # BFS numbering: fail[s] < s is already filled
            f = fail[s]
            delta[s] = delta[f]
            olink[s] = f if own[f] != -1 else olink[f]
            for sym, nxt in goto[s].items():
                fail[nxt] = delta[f, sym]
                delta[s, sym] = nxt
        self.delta = delta
        self.own = np.array(own, dtype=np.int32)
        self.olink = olink
        self.emit = np.where(self.own != -1, np.arange(n, dtype=np.int32), olink).astype(np.int32)
        # a narrower table halves the cache footprint of the hot loop
        narrow = np.uint16 if n <= np.iinfo(np.uint16).max else np.int32
        self.scan_delta = delta.ravel().astype(narrow)
        self.scan_classes = cmap.copy()
        self.scan_classes[NEWLINE] = -1
        ptr = [0]
        flat: list[int] = []
        for ts in targets:
            flat.extend(ts)
            ptr.append(len(flat))
        self.target_ptr = np.array(ptr, dtype=np.int64)
        self.target_ids = np.array(flat, dtype=np.int64)

    @property
    def n_states(self) -> int:
        return len(self.delta)

    def count(self, data: bytes, per_caption: bool = True) -> tuple[np.ndarray, int]:
        """Counts per target id and the number of captions (lines) in ``data``."""
        if not data.isascii():
            data = _fix_non_ascii(data)
        buf = np.frombuffer(data, dtype=np.uint8)
        counts = np.zeros(self.n_targets, dtype=np.int64)
        last = np.full(self.n_targets, -1, dtype=np.int64)
        scan = _scan_jit if _scan_jit is not None else _scan_py
        n_captions = scan(buf, self.scan_classes, self.scan_delta, self.emit, self.own,
                          self.olink, self.target_ptr, self.target_ids, counts, last, per_caption)
        return counts, int(n_captions)

    def find(self, text: str) -> list[int]:
        """Pattern ids matched in one caption, in order of their end position."""
        data = text.replace("\n", " ").encode("utf-8")
        if not data.isascii():
            data = _fix_non_ascii(data)
        hits = []
        state = int(self.delta[0, BOUNDARY])
        prev_boundary = True
        for b in list(data) + [32]:
            sym = int(self.classes[b])
            if sym == BOUNDARY:
                if prev_boundary:
                    continue
                prev_boundary = True
            else:
                prev_boundary = False
            state = int(self.delta[state, sym])
            s = state if self.own[state] != -1 else int(self.olink[state])
            while s != -1:
                hits.append(int(self.own[s]))
                s = int(self.olink[s])
        return hits


def _scan_py(buf, classes, delta, emit, own, olink, tptr, tids, counts, last, per_caption):
    """Scan ``buf``; ``delta`` is the flattened transition table.

    Patterns end with a boundary symbol, so outputs are only checked after
    boundaries.  ``classes`` maps the newline byte to -1.
    """
    n_sym = delta.shape[0] // own.shape[0]
    start = int(delta[BOUNDARY])
    state = start
    caption = 0
    prev_boundary = True
    n = len(buf)
    for i in range(n + 1):
        if i < n:
            sym = classes[buf[i]]
            if sym > 0:
                state = int(delta[state * n_sym + sym])
                prev_boundary = False
                continue
            if prev_boundary:
                if sym < 0:
                    caption += 1
                    state = start
                continue
        elif prev_boundary:
            if n > 0 and classes[buf[n - 1]] >= 0:
                caption += 1
            break
        else:
            sym = -1
        state = int(delta[state * n_sym + BOUNDARY])
        prev_boundary = True
        s = emit[state]
        while s != -1:
            pid = own[s]
            for j in range(tptr[pid], tptr[pid + 1]):
                t = tids[j]
                if per_caption:
                    if last[t] != caption:
                        last[t] = caption
                        counts[t] += 1
                else:
                    counts[t] += 1
            s = olink[s]
        if sym < 0:
            caption += 1
            state = start
    return caption


_scan_jit = numba.njit(cache=True, nogil=True)(_scan_py) if numba is not None else None


@dataclass
class ConceptCountTable:
    counts: dict[str, int]
    lemmas: dict[str, str]
    corpus_id: str = ""
    n_captions: int = 0
    policy: dict = field(default_factory=dict)
    partial: bool = False
    errors: list[str] = field(default_factory=list)
    n_bytes: int = 0

    def merge(self, other: "ConceptCountTable") -> "ConceptCountTable":
        if self.policy != other.policy:
            raise ValueError("cannot merge tables counted under different policies")
        keys = set(self.counts) | set(other.counts)
        counts = {k: self.counts.get(k, 0) + other.counts.get(k, 0) for k in sorted(keys)}
        return ConceptCountTable(counts, {**self.lemmas, **other.lemmas}, self.corpus_id,
                                 self.n_captions + other.n_captions, self.policy,
                                 self.partial or other.partial, self.errors + other.errors,
                                 self.n_bytes + other.n_bytes)

    def to_csv(self) -> str:
        lines = ["synset,lemma,count"]
        for synset in sorted(self.counts):
            lemma = self.lemmas.get(synset, "")
            if "," in lemma or '"' in lemma:
                lemma = '"' + lemma.replace('"', '""') + '"'
            lines.append(f"{synset},{lemma},{self.counts[synset]}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "n_captions": self.n_captions,
            "n_bytes": self.n_bytes,
            "n_synsets": len(self.counts),
            "n_nonzero": sum(1 for v in self.counts.values() if v),
            "policy": self.policy,
            "partial": self.partial,
            "errors": self.errors,
        }


def load_counts(path) -> ConceptCountTable:
    counts, lemmas = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            counts[row["synset"]] = int(row["count"])
            lemmas[row["synset"]] = row.get("lemma", "")
    return ConceptCountTable(counts, lemmas, corpus_id=Path(path).stem)


def concept_patterns(graph: HierarchyGraph, all_lemmas: bool = False,
                     synsets: Iterable[str] | None = None):
    """Phrases, per-phrase synset ids and the synset order for a hierarchy."""
    if synsets is None:
        synsets = sorted(set(graph.evaluation_set()) | set(graph.leaves))
    synsets = list(synsets)
    phrase_ids: dict[str, int] = {}
    targets: list[list[int]] = []
    first: dict[str, str] = {}
    for sid, synset in enumerate(synsets):
        names = graph.lemmas.get(synset, ())
        names = names if all_lemmas else names[:1]
        for k, name in enumerate(names):
            phrase = normalize_phrase(name)
            if k == 0:
                first[synset] = phrase
            if not phrase:
                continue
            pid = phrase_ids.setdefault(phrase, len(phrase_ids))
            if pid == len(targets):
                targets.append([])
            if sid not in targets[pid]:
                targets[pid].append(sid)
    return list(phrase_ids), targets, synsets, first


def _open_shard(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _chunks(fh, column: int | None) -> Iterator[bytes]:
    while True:
        block = fh.read(CHUNK_BYTES)
        if not block:
            return
        if not block.endswith(b"\n"):
            block += fh.readline()
        if column is not None:
            lines = block.split(b"\n")
            if lines and lines[-1] == b"":
                lines.pop()
            out = []
            for line in lines:
                cols = line.rstrip(b"\r").split(b"\t")
                out.append(cols[column] if column < len(cols) else b"")
            block = b"\n".join(out) + b"\n"
        yield block


def _count_shard(args):
    path, phrases, targets, policy, column = args
    matcher = PhraseMatcher(phrases, targets)
    n_targets = matcher.n_targets
    total = np.zeros(n_targets, dtype=np.int64)
    captions = 0
    n_bytes = 0
    try:
        with _open_shard(Path(path)) as fh:
            for block in _chunks(fh, column):
                counts, n = matcher.count(block, policy.per_caption)
                total += counts
                captions += n
                n_bytes += len(block)
    except (OSError, EOFError, ValueError) as exc:
        return str(path), None, 0, 0, f"{path}: {exc}"
    return str(path), total, captions, n_bytes, None


def count_concepts(sources: Sequence[str | Path], graph: HierarchyGraph,
                   policy: CountPolicy = CountPolicy(), jobs: int = 1, column: int | None = None,
                   corpus_id: str = "") -> ConceptCountTable:
    """Count captions (or occurrences) mentioning each synset's lemma.

    Unreadable shards are skipped, reported in ``errors`` and flag the table
    as ``partial``.
    """
    phrases, targets, synsets, first = concept_patterns(graph, policy.all_lemmas)
    tasks = [(str(p), phrases, targets, policy, column) for p in sources]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_count_shard, tasks))
    else:
        results = [_count_shard(t) for t in tasks]
    total = np.zeros(len(synsets), dtype=np.int64)
    captions = n_bytes = 0
    errors = []
    for _, counts, n, nb, err in results:
        if err is not None:
            log.warning("skipping shard: %s", err)
            errors.append(err)
            continue
        total[: len(counts)] += counts
        captions += n
        n_bytes += nb
    return ConceptCountTable(
        counts={s: int(total[i]) for i, s in enumerate(synsets)},
        lemmas=first,
        corpus_id=corpus_id,
        n_captions=captions,
        policy=policy.describe(),
        partial=bool(errors),
        errors=errors,
        n_bytes=n_bytes,
    )


def count_text(captions: Iterable[str], graph: HierarchyGraph,
               policy: CountPolicy = CountPolicy()) -> ConceptCountTable:
    """In-memory variant of :func:`count_concepts`."""
    phrases, targets, synsets, first = concept_patterns(graph, policy.all_lemmas)
    matcher = PhraseMatcher(phrases, targets)
    data = "".join(c.replace("\n", " ") + "\n" for c in captions).encode("utf-8")
    counts, n = matcher.count(data, policy.per_caption)
    return ConceptCountTable({s: int(counts[i]) for i, s in enumerate(synsets)}, first,
                             n_captions=n, policy=policy.describe(), n_bytes=len(data))


def frequency_correlation(counts: ConceptCountTable | Mapping[str, int], report: MetricReport,
                          metric: str) -> tuple[float, float, int]:
    """Spearman correlation between counts and per-synset metric values."""
    table = counts.counts if isinstance(counts, ConceptCountTable) else counts
    values = report.values(metric)
    keys = sorted(set(table) & set(values))
    if len(keys) < 3:
        raise StatsError(f"only {len(keys)} synsets shared by counts and report")
    rho, p = spearman([table[k] for k in keys], [values[k] for k in keys])
    return rho, p, len(keys)


def write_summary(table: ConceptCountTable, fh: io.TextIOBase) -> None:
    fh.write(json.dumps(table.summary(), indent=1) + "\n")
