"""Embedding validation: related-vs-random AUC and top-k code mapping accuracy."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.stats import rankdata

from .codes import CodeId, parse_code
from .embedding import Embedding

DEFAULT_KS = (1, 5, 10, 20)
# cosines are rounded to this many decimals before ranking, so parallel
# vectors tie even when normalization rounds them apart by an ulp
RANK_DECIMALS = 12

Pair = Tuple[CodeId, CodeId]


@dataclass(frozen=True)
class LabeledPair:
    code_a: CodeId
    code_b: CodeId
    relation: str

    def key(self) -> Pair:
        return tuple(sorted((self.code_a, self.code_b)))  # type: ignore[return-value]


def check_pairs(pairs: Sequence[LabeledPair]) -> None:
    seen = set()
    for p in pairs:
        if p.code_a == p.code_b:
            raise ValueError(f"pair relates {p.code_a} to itself")
        k = (p.relation, p.key())
        if k in seen:
            raise ValueError(f"duplicate {p.relation} pair {p.key()[0]} / {p.key()[1]}")
        seen.add(k)


def read_pairs(path) -> List[LabeledPair]:
    """``code_a<TAB>code_b<TAB>relation`` with header."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["code_a", "code_b", "relation"]:
            raise ValueError(f"{path}: header must be code_a<TAB>code_b<TAB>relation")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) < 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns")
            try:
                out.append(LabeledPair(parse_code(row[0]), parse_code(row[1]), row[2].strip()))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    check_pairs(out)
    return out


def write_pairs(fh, pairs: Iterable[LabeledPair]) -> None:
    fh.write("code_a\tcode_b\trelation\n")
    for p in pairs:
        fh.write(f"{p.code_a.text}\t{p.code_b.text}\t{p.relation}\n")


def read_gold(path) -> List[Pair]:
    """``local_code<TAB>standard_code`` with header."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["local_code", "standard_code"]:
            raise ValueError(f"{path}: header must be local_code<TAB>standard_code")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                out.append((parse_code(row[0]), parse_code(row[1])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def cosine(e: Embedding, a: CodeId, b: CodeId) -> float:
    x, y = e.row(a), e.row(b)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    for code, n in ((a, nx), (b, ny)):
        if n == 0:
            raise ValueError(f"embedding row for {code} is the zero vector")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def pair_similarities(e: Embedding, pairs: Sequence[Pair]) -> np.ndarray:
    """Cosine for each pair; a pair touching a zero row scores 0."""
    if not pairs:
        return np.empty(0)
    U = e.unit_rows()
    ia = np.array([e.position(a) for a, _ in pairs])
    ib = np.array([e.position(b) for _, b in pairs])
    return np.clip(np.einsum("ij,ij->i", U[ia], U[ib]), -1.0, 1.0)


def mann_whitney_auc(positive: Sequence[float], negative: Sequence[float]) -> float:
    """P(pos > neg) + P(pos == neg)/2 from midranks of the pooled sample."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one score on each side")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def filter_pairs(pairs: Sequence[LabeledPair], vocab: Set[CodeId]) -> Tuple[List[LabeledPair], int]:
    keep = [p for p in pairs if p.code_a in vocab and p.code_b in vocab]
    return keep, len(pairs) - len(keep)


def sample_random_pairs(
    vocab: Sequence[CodeId], exclude: Iterable[LabeledPair], n: Optional[int], seed: int
) -> List[Pair]:
    """``n`` distinct unordered code pairs, uniform over pairs not in ``exclude``.

    ``n=None`` means the largest per-relation count in ``exclude``.
    """
    exclude = list(exclude)
    if n is None:
        per_rel: Dict[str, int] = {}
        for p in exclude:
            per_rel[p.relation] = per_rel.get(p.relation, 0) + 1
        n = max(per_rel.values()) if per_rel else 0
    codes = sorted(vocab)
    V = len(codes)
    index = {c: i for i, c in enumerate(codes)}
    banned = {tuple(sorted((index[p.code_a], index[p.code_b]))) for p in exclude
              if p.code_a in index and p.code_b in index}
    available = V * (V - 1) // 2 - len(banned)
    if n > available:
        raise ValueError(f"cannot draw {n} random pairs: only {available} non-related pairs among {V} codes")
    rng = np.random.default_rng(seed)
    if n > available // 2:
        pool = [(i, j) for i, j in itertools.combinations(range(V), 2) if (i, j) not in banned]
        chosen = [pool[t] for t in rng.choice(len(pool), size=n, replace=False)]
    else:
        chosen, taken = [], set(banned)
        while len(chosen) < n:
            draw = rng.integers(0, V, size=(2 * (n - len(chosen)) + 8, 2))
            for i, j in draw:
                if i == j:
                    continue
                key = (int(min(i, j)), int(max(i, j)))
                if key in taken:
                    continue
                taken.add(key)
                chosen.append(key)
                if len(chosen) == n:
                    break
    return [(codes[i], codes[j]) for i, j in chosen]


@dataclass
class ValidationReport:
    auc: Dict[str, float]
    n_related: Dict[str, int]
    n_random: int
    skipped: int
    seed: int

    def as_dict(self) -> dict:
        out = {}
        for rel in sorted(self.auc):
            out[f"auc.{rel}"] = self.auc[rel]
            out[f"n_related.{rel}"] = self.n_related[rel]
        out["n_random"] = self.n_random
        out["skipped_pairs"] = self.skipped
        out["seed"] = self.seed
        return out


def auc_related_vs_random(
    e: Embedding,
    related: Sequence[LabeledPair],
    n_random: Optional[int] = None,
    seed: int = 0,
    random_pairs: Optional[Sequence[Pair]] = None,
) -> ValidationReport:
    """Per-relation AUC of cosine similarity, related pairs vs random pairs.

    Related pairs missing from the vocabulary are skipped and counted. One
    pool of random pairs is drawn from ``seed``; each relation is compared
    against its first ``n_random`` members (default: that relation's size).
    """
    usable, skipped = filter_pairs(related, set(e.vocab))
    by_rel: Dict[str, List[LabeledPair]] = {}
    for p in usable:
        by_rel.setdefault(p.relation, []).append(p)
    for rel in {p.relation for p in related}:
        if rel not in by_rel:
            raise ValueError(f"relation {rel!r} has no pair with both codes in the vocabulary")
    wanted = {rel: (n_random if n_random is not None else len(ps)) for rel, ps in by_rel.items()}
    if random_pairs is None:
        random_pairs = sample_random_pairs(e.vocab, usable, max(wanted.values()), seed)
    rand_sims = pair_similarities(e, list(random_pairs))
    auc, counts = {}, {}
    for rel in sorted(by_rel):
        m = wanted[rel]
        if m > len(rand_sims):
            raise ValueError(f"only {len(rand_sims)} random pairs available, relation {rel!r} needs {m}")
        rel_sims = pair_similarities(e, [(p.code_a, p.code_b) for p in by_rel[rel]])
        auc[rel] = mann_whitney_auc(rel_sims, rand_sims[:m])
        counts[rel] = len(by_rel[rel])
    return ValidationReport(auc, counts, max(wanted.values()), skipped, seed)


@dataclass
class TopKResult:
    accuracy: Dict[int, float]
    evaluated: int
    skipped: int
    ranks: List[int]

    def as_dict(self) -> dict:
        out = {f"top{k}": v for k, v in sorted(self.accuracy.items())}
        out["evaluated"] = self.evaluated
        out["skipped"] = self.skipped
        return out


def topk_accuracy(
    e: Embedding, gold: Sequence[Pair], candidate_domains: Iterable[str], ks: Sequence[int] = DEFAULT_KS
) -> TopKResult:
    """Share of gold rows whose standard code ranks within the top k neighbours.

    Candidates are vocabulary codes from ``candidate_domains`` other than the
    local code, ranked by descending cosine with ties broken by code text.
    Gold rows whose codes are absent (or whose standard code is not a
    candidate) are skipped.
    """
    domains = set(candidate_domains)
    cand_idx = np.array([i for i, c in enumerate(e.vocab) if c.domain in domains], dtype=np.int64)
    if cand_idx.size == 0:
        raise ValueError(f"no vocabulary code in candidate domains {sorted(domains)}")
    U = e.unit_rows()
    texts = np.array([e.vocab[i].text for i in cand_idx], dtype=object)
    ranks, skipped = [], 0
    for local, standard in gold:
        if local not in e or standard not in e or standard.domain not in domains or standard == local:
            skipped += 1
            continue
        li, si = e.position(local), e.position(standard)
        mask = cand_idx != li
        idx = cand_idx[mask]
        sims = np.round(U[idx] @ U[li], RANK_DECIMALS)
        # read the target's score from the same product so ties compare exactly
        target = sims[np.searchsorted(idx, si)]
        ctext = texts[mask]
        better = np.sum(sims > target) + np.sum((sims == target) & (ctext < standard.text))
        ranks.append(int(better) + 1)
    ranks_arr = np.array(ranks)
    acc = {int(k): (float(np.mean(ranks_arr <= k)) if ranks else float("nan")) for k in sorted(ks)}
    return TopKResult(acc, len(ranks), skipped, ranks)
