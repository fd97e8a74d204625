"""Reading and normalizing classifier prediction dumps and text-encoder embeddings.

Two on-disk prediction formats are supported:

JSONL
    one object per sample ``{"synset": "n...", "sample": k, "kind": "logits",
    "values": [...]}``.  An optional first line without a ``synset`` key may
    carry ``model_id`` and ``seed``.

Binary (little-endian)
    header ``b"HLPR"``, version u16, kind u8, n_classes u32, n_records u64,
    followed by records of (synset offset u64, sample index u32,
    n_classes x float32).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .hierarchy import ClassifiableSubtree, check_wnid, wnid_from_offset, wnid_offset

MAGIC = b"HLPR"
VERSION = 1
KINDS = ("logits", "probabilities")
HEADER = struct.Struct("<4sHBIQ")
PROB_TOL = 1e-6


class PredictionFormatError(ValueError):
    pass


@dataclass
class PredictionSet:
    """Per-synset matrices of classifier outputs, rows ordered by sample index."""

    kind: str
    rows: dict[str, np.ndarray]
    sample_ids: dict[str, np.ndarray] = field(default_factory=dict)
    model_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PredictionFormatError(f"unknown prediction kind {self.kind!r}")
        for synset, mat in self.rows.items():
            if synset not in self.sample_ids:
                self.sample_ids[synset] = np.arange(len(mat), dtype=np.int64)

    @property
    def n_classes(self) -> int:
        for mat in self.rows.values():
            return mat.shape[1]
        return 0

    @property
    def synsets(self) -> list[str]:
        return sorted(self.rows)

    def n_samples(self, synset: str) -> int:
        return len(self.rows[synset])

    @property
    def is_ragged(self) -> bool:
        return len({len(m) for m in self.rows.values()}) > 1

    def validate(self, n_classes: int | None = None, allow_ragged: bool = False) -> "PredictionSet":
        width = n_classes if n_classes is not None else self.n_classes
        for synset, mat in self.rows.items():
            check_wnid(synset)
            if mat.ndim != 2 or mat.shape[1] != width:
                raise PredictionFormatError(
                    f"{synset}: rows have {mat.shape[-1]} values, expected {width}")
            if len(mat) == 0:
                raise PredictionFormatError(f"{synset}: no samples")
            if not np.all(np.isfinite(mat)):
                raise PredictionFormatError(f"{synset}: non-finite value in predictions")
            if self.kind == "probabilities":
                _check_probabilities(mat, synset)
            ids = self.sample_ids[synset]
            if len(np.unique(ids)) != len(ids):
                raise PredictionFormatError(f"{synset}: duplicate sample index")
        if self.is_ragged and not allow_ragged:
            counts = sorted({len(m) for m in self.rows.values()})
            raise PredictionFormatError(f"ragged sample counts {counts}; pass allow_ragged to accept")
        return self


def _check_probabilities(mat: np.ndarray, synset: str) -> None:
    if np.any(mat < 0):
        raise PredictionFormatError(f"{synset}: negative probability")
    sums = np.array([math.fsum(r) for r in mat])
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL)
    if len(bad):
        raise PredictionFormatError(
            f"{synset}: probability row {int(bad[0])} sums to {sums[bad[0]]!r}")


def _assemble(records: Iterable[tuple[str, int, np.ndarray]], kind: str, n_classes, model_id, seed):
    grouped: dict[str, dict[int, np.ndarray]] = {}
    for synset, sample, values in records:
        if n_classes is not None and len(values) != n_classes:
            raise PredictionFormatError(
                f"{synset} sample {sample}: {len(values)} values, expected {n_classes}")
        slot = grouped.setdefault(synset, {})
        if sample in slot:
            raise PredictionFormatError(f"duplicate record ({synset}, {sample})")
        slot[sample] = values
    rows, ids = {}, {}
    for synset in sorted(grouped):
        order = sorted(grouped[synset])
        widths = {len(grouped[synset][k]) for k in order}
        if len(widths) != 1:
            raise PredictionFormatError(f"{synset}: rows of different lengths {sorted(widths)}")
        rows[synset] = np.array([grouped[synset][k] for k in order], dtype=np.float64)
        ids[synset] = np.array(order, dtype=np.int64)
    widths = {m.shape[1] for m in rows.values()}
    if len(widths) > 1:
        raise PredictionFormatError(f"rows of different lengths {sorted(widths)}")
    return PredictionSet(kind, rows, ids, model_id=model_id, seed=seed)


def _iter_jsonl(path: Path, meta: dict) -> Iterator[tuple[str, int, np.ndarray, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PredictionFormatError(f"{path}:{lineno}: {exc}") from None
            if "synset" not in obj:
                meta.update(obj)
                continue
            try:
                synset = check_wnid(obj["synset"])
                sample = int(obj["sample"])
                kind = obj.get("kind", meta.get("kind", "logits"))
                values = np.asarray(obj["values"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise PredictionFormatError(f"{path}:{lineno}: bad record ({exc})") from None
            if values.ndim != 1:
                raise PredictionFormatError(f"{path}:{lineno}: 'values' must be a flat list")
            yield synset, sample, values, kind


def load_jsonl(path, n_classes: int | None = None, allow_ragged: bool = False) -> PredictionSet:
    path = Path(path)
    meta: dict = {}
    kinds = set()
    records = []
    for synset, sample, values, kind in _iter_jsonl(path, meta):
        kinds.add(kind)
        records.append((synset, sample, values))
    if not records:
        raise PredictionFormatError(f"{path}: no prediction records")
    if len(kinds) != 1:
        raise PredictionFormatError(f"{path}: mixed prediction kinds {sorted(kinds)}")
    preds = _assemble(records, kinds.pop(), n_classes, str(meta.get("model_id", path.stem)),
                      int(meta.get("seed", 0)))
    return preds.validate(n_classes, allow_ragged)


def _record_dtype(n_classes: int) -> np.dtype:
    return np.dtype([("offset", "<u8"), ("sample", "<u4"), ("values", "<f4", (n_classes,))])


def load_binary(path, n_classes: int | None = None, allow_ragged: bool = False) -> PredictionSet:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise PredictionFormatError(f"{path}: truncated header")
    magic, version, kind_code, width, n_records = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PredictionFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise PredictionFormatError(f"{path}: unsupported version {version}")
    if kind_code >= len(KINDS):
        raise PredictionFormatError(f"{path}: unknown kind code {kind_code}")
    if n_classes is not None and width != n_classes:
        raise PredictionFormatError(f"{path}: file has {width} classes, expected {n_classes}")
    dtype = _record_dtype(width)
    expected = HEADER.size + n_records * dtype.itemsize
    if len(data) != expected:
        raise PredictionFormatError(f"{path}: size {len(data)} != {expected} for {n_records} records")
    rec = np.frombuffer(data, dtype=dtype, count=n_records, offset=HEADER.size)

    rows, ids = {}, {}
    order = np.lexsort((rec["sample"], rec["offset"]))
    rec = rec[order]
    offsets, starts = np.unique(rec["offset"], return_index=True)
    bounds = list(starts[1:]) + [len(rec)]
    for off, lo, hi in zip(offsets, starts, bounds):
        synset = wnid_from_offset(int(off))
        samples = rec["sample"][lo:hi].astype(np.int64)
        if np.any(np.diff(samples) == 0):
            dup = int(samples[np.flatnonzero(np.diff(samples) == 0)[0]])
            raise PredictionFormatError(f"duplicate record ({synset}, {dup})")
        rows[synset] = rec["values"][lo:hi].astype(np.float64)
        ids[synset] = samples
    preds = PredictionSet(KINDS[kind_code], rows, ids, model_id=path.stem)
    return preds.validate(n_classes, allow_ragged)


def load_predictions(path, n_classes: int | None = None, allow_ragged: bool = False,
                     fmt: str | None = None) -> PredictionSet:
    """Load a prediction dump; the format is sniffed from the magic bytes unless given."""
    path = Path(path)
    if fmt is None:
        with open(path, "rb") as fh:
            fmt = "bin" if fh.read(4) == MAGIC else "jsonl"
    if fmt == "bin":
        return load_binary(path, n_classes, allow_ragged)
    if fmt == "jsonl":
        return load_jsonl(path, n_classes, allow_ragged)
    raise ValueError(f"unknown prediction format {fmt!r}")


def write_jsonl(preds: PredictionSet, fh) -> None:
    fh.write(json.dumps({"model_id": preds.model_id, "seed": preds.seed, "kind": preds.kind}) + "\n")
    for synset in preds.synsets:
        for sample, row in zip(preds.sample_ids[synset], preds.rows[synset]):
            fh.write(json.dumps({"synset": synset, "sample": int(sample), "kind": preds.kind,
                                 "values": [float(v) for v in row]}) + "\n")


def write_binary(preds: PredictionSet, fh) -> None:
    """Values are stored as float32; rows are rounded accordingly."""
    width = preds.n_classes
    dtype = _record_dtype(width)
    total = sum(len(m) for m in preds.rows.values())
    fh.write(HEADER.pack(MAGIC, VERSION, KINDS.index(preds.kind), width, total))
    for synset in preds.synsets:
        mat = preds.rows[synset]
        rec = np.zeros(len(mat), dtype=dtype)
        rec["offset"] = wnid_offset(synset)
        rec["sample"] = preds.sample_ids[synset]
        rec["values"] = mat
        fh.write(rec.tobytes())


def save_predictions(preds: PredictionSet, path, fmt: str = "jsonl") -> None:
    if fmt == "bin":
        with open(path, "wb") as fh:
            write_binary(preds, fh)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            write_jsonl(preds, fh)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis; the max is subtracted first."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    if z.ndim == 1:
        return z / math.fsum(z)
    return z / np.array([math.fsum(r) for r in z])[:, None]


def full_distribution(row, kind: str = "logits") -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if kind == "logits":
        return softmax(row)
    if kind == "probabilities":
        _check_probabilities(row[None, :], "row")
        return row
    raise ValueError(f"unknown prediction kind {kind!r}")


def conditional_rows(mat: np.ndarray, leaf_indices: np.ndarray, kind: str) -> tuple[np.ndarray, int]:
    """Hyponym distributions for every row restricted to ``leaf_indices``.

    Logit rows get a softmax over the subset; probability rows are restricted
    and renormalized.  Probability rows with no mass in the subset become
    uniform; their number is returned alongside the matrix.
    """
    sub = np.asarray(mat, dtype=np.float64)[:, leaf_indices]
    if kind == "logits":
        return softmax(sub), 0
    mass = np.array([math.fsum(r) for r in sub])
    empty = mass == 0.0
    out = np.empty_like(sub)
    out[~empty] = sub[~empty] / mass[~empty, None]
    out[empty] = 1.0 / sub.shape[1]
    return out, int(empty.sum())


def hyponym_distribution(row, subtree: ClassifiableSubtree | np.ndarray, kind: str = "logits") -> np.ndarray:
    indices = subtree.leaf_indices if isinstance(subtree, ClassifiableSubtree) else np.asarray(subtree)
    if len(indices) == 0:
        raise ValueError("empty classifiable subtree")
    out, _ = conditional_rows(np.asarray(row, dtype=np.float64)[None, :], indices, kind)
    return out[0]


@dataclass
class EmbeddingTable:
    vectors: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        for v in self.vectors.values():
            return len(v)
        return 0

    def __contains__(self, synset: str) -> bool:
        return synset in self.vectors

    def unit(self, synset: str) -> np.ndarray:
        v = self.vectors[synset]
        return v / np.linalg.norm(v)


def load_embeddings(path) -> EmbeddingTable:
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            synset = check_wnid(obj["synset"])
            vec = np.asarray(obj["vector"], dtype=np.float64)
            if dim is None:
                dim = len(vec)
            if vec.ndim != 1 or len(vec) != dim:
                raise PredictionFormatError(f"{path}:{lineno}: vector dimension {vec.shape} != {dim}")
            if not np.all(np.isfinite(vec)):
                raise PredictionFormatError(f"{path}:{lineno}: non-finite embedding value")
            if not np.any(vec):
                raise PredictionFormatError(f"{path}:{lineno}: zero-norm embedding for {synset}")
            if synset in vectors:
                raise PredictionFormatError(f"{path}:{lineno}: duplicate embedding for {synset}")
            vectors[synset] = vec
    return EmbeddingTable(vectors)
