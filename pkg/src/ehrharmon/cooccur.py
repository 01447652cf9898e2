"""Sparse symmetric co-occurrence counts within a day window.

Events are sorted by (patient, day) and swept with a growing offset: at
offset ``k`` record ``i`` is paired with record ``i + k`` while both belong to
the same patient and lie within ``window_days``. Because days are sorted, the
set of live ``i`` only shrinks, so the sweep costs O(events x window occupancy).
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .codes import CodeId, parse_code
from .events import EventRecord
from .fileio import atomic_write, read_kv, write_kv

log = logging.getLogger(__name__)

DEFAULT_WINDOW_DAYS = 30


class CountMode(str, Enum):
    day_pair = "day_pair"
    patient = "patient"


@dataclass(frozen=True)
class CooccurrenceMatrix:
    """Symmetric counts over ``vocab`` (sorted by code text).

    ``counts`` stores both triangles; each unordered pair is counted once in
    C(w,c) and once in C(c,w), the diagonal once. ``total`` is the sum of every
    stored entry.
    """

    vocab: Tuple[CodeId, ...]
    counts: sp.csr_matrix
    window_days: int
    mode: CountMode
    marginals: np.ndarray
    total: int

    @classmethod
    def from_upper(cls, vocab, rows, cols, vals, window_days, mode) -> "CooccurrenceMatrix":
        """Build from upper-triangle triplets (rows <= cols); duplicates are summed."""
        n = len(vocab)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.int64)
        off = rows != cols
        r = np.concatenate([rows, cols[off]])
        c = np.concatenate([cols, rows[off]])
        v = np.concatenate([vals, vals[off]])
        m = sp.csr_matrix((v, (r, c)), shape=(n, n), dtype=np.int64)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        marg = np.asarray(m.sum(axis=1), dtype=np.int64).ravel()
        return cls(tuple(vocab), m, int(window_days), CountMode(mode), marg, int(marg.sum()))

    @classmethod
    def empty(cls, window_days=DEFAULT_WINDOW_DAYS, mode=CountMode.day_pair) -> "CooccurrenceMatrix":
        return cls.from_upper((), [], [], [], window_days, mode)

    def index(self) -> Dict[CodeId, int]:
        return {c: i for i, c in enumerate(self.vocab)}

    def get(self, w: CodeId, c: CodeId) -> int:
        idx = self.index()
        return int(self.counts[idx[w], idx[c]])

    def dense(self) -> np.ndarray:
        return self.counts.toarray()

    def check(self) -> None:
        """Raise AssertionError if any structural invariant is broken."""
        m = self.counts
        assert (m != m.T).nnz == 0, "counts not symmetric"
        assert m.nnz == 0 or m.data.min() >= 0, "negative count"
        assert np.array_equal(np.asarray(m.sum(axis=1)).ravel(), self.marginals), "marginals stale"
        assert int(self.marginals.sum()) == self.total, "total stale"
        assert list(self.vocab) == sorted(self.vocab) and len(set(self.vocab)) == len(self.vocab)


def _pair_keys(pid: np.ndarray, day: np.ndarray, cid: np.ndarray, window_days: int, n_codes: int, mode):
    """Return (lo, hi) code-index arrays of every within-window pair.

    In patient mode each (patient, lo, hi) appears at most once.
    """
    order = np.lexsort((cid, day, pid))
    pid, day, cid = pid[order], day[order], cid[order]
    n = len(pid)
    live = np.arange(n - 1, dtype=np.int64)
    keys: List[np.ndarray] = []
    pkeys: List[np.ndarray] = []
    k = 1
    while live.size:
        j = live + k
        ok = j < n
        live, j = live[ok], j[ok]
        ok = (pid[j] == pid[live]) & (day[j] - day[live] <= window_days)
        live, j = live[ok], j[ok]
        if not live.size:
            break
        a, b = cid[live], cid[j]
        key = np.minimum(a, b) * n_codes + np.maximum(a, b)
        keys.append(key)
        if mode is CountMode.patient:
            pkeys.append(pid[live])
        k += 1
    if not keys:
        return np.empty(0, np.int64)
    key = np.concatenate(keys)
    if mode is CountMode.patient:
        p = np.concatenate(pkeys)
        both = np.unique(np.stack([p, key], axis=1), axis=0)
        key = both[:, 1]
    return key


def _count_shard(pid, day, cid, window_days, vocab, mode) -> CooccurrenceMatrix:
    n_codes = len(vocab)
    key = _pair_keys(pid, day, cid, window_days, n_codes, mode)
    uniq, cnt = np.unique(key, return_counts=True)
    return CooccurrenceMatrix.from_upper(vocab, uniq // max(n_codes, 1), uniq % max(n_codes, 1), cnt, window_days, mode)


def count_cooccurrence(
    events: Iterable[EventRecord],
    window_days: int = DEFAULT_WINDOW_DAYS,
    mode=CountMode.day_pair,
    threads: int = 1,
) -> CooccurrenceMatrix:
    """Count code pairs whose days are at most ``window_days`` apart.

    day_pair mode adds one per unordered pair of distinct records of the same
    patient; patient mode counts patients having at least one such pair.
    Same-day pairs count. With ``threads > 1`` patients are sharded and the
    shard matrices merged, which gives the same result by construction.
    """
    mode = CountMode(mode)
    if window_days < 0:
        raise ValueError("window_days must be >= 0")
    records = set(events)
    vocab = tuple(sorted({r.code for r in records}))
    if not records:
        return CooccurrenceMatrix.empty(window_days, mode)
    cidx = {c: i for i, c in enumerate(vocab)}
    patients = sorted({r.patient_id for r in records})
    pidx = {p: i for i, p in enumerate(patients)}
    recs = list(records)
    pid = np.fromiter((pidx[r.patient_id] for r in recs), np.int64, len(recs))
    day = np.fromiter((r.day.toordinal() for r in recs), np.int64, len(recs))
    cid = np.fromiter((cidx[r.code] for r in recs), np.int64, len(recs))

    if threads <= 1:
        return _count_shard(pid, day, cid, window_days, vocab, mode)

    shards = [pid % threads == s for s in range(threads)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(
            pool.map(lambda m: _count_shard(pid[m], day[m], cid[m], window_days, vocab, mode), shards)
        )
    out = parts[0]
    for p in parts[1:]:
        out = merge_counts(out, p)
    return out


def _remap(m: CooccurrenceMatrix, target: Dict[CodeId, int], n: int) -> sp.csr_matrix:
    idx = np.array([target[c] for c in m.vocab], dtype=np.int64)
    coo = m.counts.tocoo()
    return sp.csr_matrix((coo.data, (idx[coo.row], idx[coo.col])), shape=(n, n), dtype=np.int64)


def merge_counts(a: CooccurrenceMatrix, b: CooccurrenceMatrix) -> CooccurrenceMatrix:
    """Entrywise sum over the union vocabulary.

    In patient mode the two inputs must come from disjoint patient sets, which
    the caller has to guarantee (the counts carry no patient identities).
    """
    if a.window_days != b.window_days or a.mode != b.mode:
        raise ValueError(
            f"cannot merge counts with window/mode {a.window_days}/{a.mode.value} "
            f"and {b.window_days}/{b.mode.value}"
        )
    vocab = tuple(sorted(set(a.vocab) | set(b.vocab)))
    target = {c: i for i, c in enumerate(vocab)}
    n = len(vocab)
    m = _remap(a, target, n) + _remap(b, target, n)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return CooccurrenceMatrix(
        vocab, m, a.window_days, a.mode,
        np.asarray(m.sum(axis=1), dtype=np.int64).ravel(), a.total + b.total,
    )


# -- triplet files ----------------------------------------------------------

def meta_path(path) -> Path:
    return Path(str(path) + ".meta")


def write_triplets(fh, vocab: Sequence[CodeId], matrix: sp.spmatrix, header: str, fmt=str) -> None:
    """Upper-triangle rows ``code_i<TAB>code_j<TAB>value`` with code_i <= code_j.

    A vocabulary code without any stored entry is written as an explicit
    zero diagonal row so the vocabulary survives a round trip.
    """
    fh.write(header + "\n")
    csr = sp.csr_matrix(matrix)
    csr.sort_indices()
    for i, code in enumerate(vocab):
        lo, hi = csr.indptr[i], csr.indptr[i + 1]
        cols, vals = csr.indices[lo:hi], csr.data[lo:hi]
        if lo == hi:
            fh.write(f"{code.text}\t{code.text}\t{fmt(csr.dtype.type(0))}\n")
            continue
        for j, v in zip(cols, vals):
            if j >= i:
                fh.write(f"{code.text}\t{vocab[j].text}\t{fmt(v)}\n")


def read_triplets(path, header: str, parse_value) -> Tuple[Tuple[CodeId, ...], np.ndarray, np.ndarray, list]:
    """Return (vocab, rows, cols, values) with rows <= cols over the sorted vocab."""
    triples = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        first = next(reader, None)
        if first is None or "\t".join(first) != header:
            raise ValueError(f"{path}: expected header {header!r}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns")
            try:
                triples.append((parse_code(row[0]), parse_code(row[1]), parse_value(row[2])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    vocab = tuple(sorted({t[0] for t in triples} | {t[1] for t in triples}))
    idx = {c: i for i, c in enumerate(vocab)}
    rows, cols, vals = [], [], []
    for a, b, v in triples:
        i, j = sorted((idx[a], idx[b]))
        rows.append(i)
        cols.append(j)
        vals.append(v)
    return vocab, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), vals


COUNTS_HEADER = "code_i\tcode_j\tcount"


def save_counts(path, m: CooccurrenceMatrix) -> None:
    with atomic_write(path) as fh:
        write_triplets(fh, m.vocab, m.counts, COUNTS_HEADER, fmt=lambda v: str(int(v)))
    with atomic_write(meta_path(path)) as fh:
        write_kv(fh, {
            "kind": "cooccurrence",
            "window_days": m.window_days,
            "mode": m.mode.value,
            "total": m.total,
            "vocab_size": len(m.vocab),
        })


def load_counts(path) -> CooccurrenceMatrix:
    meta = read_kv(meta_path(path))
    vocab, rows, cols, vals = read_triplets(path, COUNTS_HEADER, int)
    m = CooccurrenceMatrix.from_upper(vocab, rows, cols, vals, int(meta["window_days"]), meta["mode"])
    if "total" in meta and int(meta["total"]) != m.total:
        raise ValueError(f"{path}: total {m.total} disagrees with sidecar {meta['total']}")
    return m
