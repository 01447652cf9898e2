"""Joint embedding from several institutions' SPPMI summaries.

Overlapping entries are averaged with institution weights. The rest of the
union matrix is filled in from institution embeddings rotated into one
shared frame, and the completed matrix is factorized once more.
"""
from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .codes import CodeId
from .embed import SPPMIMatrix, select_rank_variance, train_embedding
from .embedding import Embedding, Provenance

log = logging.getLogger(__name__)


class BonmiError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InstitutionSummary:
    name: str
    sppmi: SPPMIMatrix
    weight: float = 1.0
    patient_count: Optional[int] = None

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"institution {self.name!r}: weight must be > 0")
        if self.patient_count is not None and self.patient_count < 1:
            raise ValueError(f"institution {self.name!r}: patient_count must be positive")


@dataclass
class JointResult:
    vocab: Tuple[CodeId, ...]
    completed: np.ndarray
    observed: np.ndarray
    embedding: Embedding
    rotations: Dict[str, np.ndarray]
    diagnostics: dict = field(default_factory=dict)


def default_weights(summaries: Sequence[InstitutionSummary], explicit: Optional[Sequence[float]] = None) -> np.ndarray:
    """Explicit weights if given, else proportional to patient counts; sums to 1."""
    if explicit is not None:
        w = np.asarray(explicit, dtype=np.float64)
        if w.shape != (len(summaries),) or not np.all(w > 0):
            raise ValueError("need one positive weight per institution")
    else:
        counts = [s.patient_count for s in summaries]
        if any(c is None for c in counts):
            raise ValueError("no explicit weights and patient counts missing for some institution")
        w = np.asarray(counts, dtype=np.float64)
    return w / w.sum()


def reweight(summaries: Sequence[InstitutionSummary], weights: Sequence[float]) -> List[InstitutionSummary]:
    return [InstitutionSummary(s.name, s.sppmi, float(w), s.patient_count) for s, w in zip(summaries, weights)]


def procrustes_align(source: np.ndarray, reference: np.ndarray, names: Tuple[str, str] = ("source", "reference")) -> np.ndarray:
    """Orthogonal R minimizing ||source @ R - reference||_F, via SVD of source^T reference."""
    source = np.asarray(source, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if source.shape != reference.shape or source.ndim != 2:
        raise ValueError(f"shape mismatch {source.shape} vs {reference.shape}")
    n, d = source.shape
    if n < d:
        raise BonmiError(f"overlap between {names[0]} and {names[1]} is {n} codes, fewer than rank {d}")
    U, _, Vt = np.linalg.svd(source.T @ reference)
    return U @ Vt


def union_vocab(summaries: Sequence[InstitutionSummary]) -> Tuple[CodeId, ...]:
    return tuple(sorted(set().union(*(s.sppmi.vocab for s in summaries))))


def aggregate_observed(summaries: Sequence[InstitutionSummary]) -> Tuple[Tuple[CodeId, ...], np.ndarray, np.ndarray]:
    """Weighted average of each entry over the institutions that observe both codes.

    Returns (union vocab, values, observed mask); unobserved values are 0.
    """
    vocab = union_vocab(summaries)
    pos = {c: i for i, c in enumerate(vocab)}
    n = len(vocab)
    acc = np.zeros((n, n))
    wsum = np.zeros((n, n))
    for s in summaries:
        idx = np.array([pos[c] for c in s.sppmi.vocab])
        block = np.ix_(idx, idx)
        acc[block] += s.weight * s.sppmi.dense()
        wsum[block] += s.weight
    observed = wsum > 0
    values = np.divide(acc, wsum, out=np.zeros_like(acc), where=observed)
    return vocab, values, observed


def _components(names: Sequence[str], vocabs: Sequence[set]) -> List[List[str]]:
    n = len(names)
    seen = [False] * n
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        seen[start] = True
        comp, queue = [], deque([start])
        while queue:
            i = queue.popleft()
            comp.append(names[i])
            for j in range(n):
                if not seen[j] and vocabs[i] & vocabs[j]:
                    seen[j] = True
                    queue.append(j)
        comps.append(sorted(comp))
    return comps


def align_to_frame(
    summaries: Sequence[InstitutionSummary], embeddings: Sequence[Embedding]
) -> Tuple[Dict[CodeId, np.ndarray], Dict[str, np.ndarray], dict]:
    """Rotate institution embeddings into one frame, heaviest institution first.

    Each further institution is aligned on the codes already in the frame (the
    heaviest remaining one with at least ``d`` such codes goes next). Its rows
    for new codes extend the frame; rows for codes already there are averaged
    in with the institution weights.
    """
    names = [s.name for s in summaries]
    vocabs = [set(s.sppmi.vocab) for s in summaries]
    comps = _components(names, vocabs)
    if len(comps) > 1:
        raise BonmiError(f"institution overlap graph is disconnected: {comps}")
    d = embeddings[0].dim
    if any(e.dim != d for e in embeddings):
        raise BonmiError("institution embeddings differ in rank")

    order = sorted(range(len(summaries)), key=lambda i: (-summaries[i].weight, i))
    first = order.pop(0)
    frame: Dict[CodeId, np.ndarray] = {c: v.copy() for c, v in zip(embeddings[first].vocab, embeddings[first].vectors)}
    fweight: Dict[CodeId, float] = {c: summaries[first].weight for c in frame}
    rotations = {names[first]: np.eye(d)}
    steps = [{"institution": names[first], "overlap": 0, "residual": 0.0, "relative_residual": 0.0}]

    while order:
        overlaps = {i: [c for c in embeddings[i].vocab if c in frame] for i in order}
        ready = [i for i in order if len(overlaps[i]) >= d]
        if not ready:
            sizes = ", ".join(f"{names[i]}={len(overlaps[i])}" for i in order)
            raise BonmiError(f"no remaining institution overlaps the aligned frame in >= {d} codes ({sizes})")
        i = ready[0]
        order.remove(i)
        e = embeddings[i]
        ov = overlaps[i]
        src = np.array([e.row(c) for c in ov])
        ref = np.array([frame[c] for c in ov])
        R = procrustes_align(src, ref, (names[i], "aligned frame"))
        aligned = e.vectors @ R
        resid = float(np.linalg.norm(src @ R - ref))
        steps.append({
            "institution": names[i],
            "overlap": len(ov),
            "residual": resid,
            "relative_residual": resid / max(float(np.linalg.norm(ref)), 1e-300),
        })
        w = summaries[i].weight
        for c, v in zip(e.vocab, aligned):
            if c in frame:
                tot = fweight[c] + w
                frame[c] = (fweight[c] * frame[c] + w * v) / tot
                fweight[c] = tot
            else:
                frame[c] = v.copy()
                fweight[c] = w
        rotations[names[i]] = R

    pairwise = {
        f"{names[a]}|{names[b]}": len(vocabs[a] & vocabs[b])
        for a in range(len(names)) for b in range(a + 1, len(names))
    }
    return frame, rotations, {"alignment": steps, "pairwise_overlap": pairwise}


def complete_matrix(
    vocab: Sequence[CodeId], values: np.ndarray, observed: np.ndarray, frame: Dict[CodeId, np.ndarray], floor: bool = False
) -> np.ndarray:
    """Keep observed entries; fill the rest with frame inner products."""
    F = np.array([frame[c] for c in vocab])
    G = F @ F.T
    G = (G + G.T) / 2
    if floor:
        G = np.maximum(G, 0.0)
    return np.where(observed, values, G)


def institution_embeddings(
    summaries: Sequence[InstitutionSummary], d: int, seed: int = 0, threads: int = 1
) -> List[Embedding]:
    def one(s):
        return train_embedding(s.sppmi, d, seed=seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, summaries))
    return [one(s) for s in summaries]


def bonmi_join(
    summaries: Sequence[InstitutionSummary],
    d: Optional[int] = None,
    d_final: Optional[int] = None,
    tau: float = 0.95,
    floor: bool = False,
    seed: int = 0,
    threads: int = 1,
    embeddings: Optional[Sequence[Embedding]] = None,
) -> JointResult:
    """Joint embedding over the union vocabulary of ``summaries``.

    ``d`` (institution rank) defaults to the smallest variance-rule rank over
    institutions; ``d_final`` defaults to the variance rule on the completed
    matrix. ``embeddings`` replaces the per-institution factorizations, which
    is mainly useful for checking gauge invariance.
    """
    if len(summaries) < 2:
        raise BonmiError("need at least two institutions")
    if len({s.name for s in summaries}) != len(summaries):
        raise BonmiError("institution names must be unique")
    if embeddings is None:
        if d is None:
            d = min(select_rank_variance(s.sppmi, tau) for s in summaries)
        embeddings = institution_embeddings(summaries, d, seed, threads)
    d = embeddings[0].dim

    vocab, values, observed = aggregate_observed(summaries)
    frame, rotations, diag = align_to_frame(summaries, embeddings)
    completed = complete_matrix(vocab, values, observed, frame, floor)
    if d_final is None:
        d_final = select_rank_variance(completed, tau)
    d_final = min(d_final, len(vocab))
    joint = train_embedding(completed, d_final, seed=seed, vocab=vocab, provenance=Provenance.joint)
    diag.update({
        "rank": d,
        "final_rank": d_final,
        "union_vocab": len(vocab),
        "observed_fraction": float(observed.mean()),
    })
    log.info("joint embedding over %d codes, rank %d -> %d", len(vocab), d, d_final)
    return JointResult(vocab, completed, observed, joint, rotations, diag)
