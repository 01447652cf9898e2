"""Synthetic ground truth, institution splits and patient event streams.

Everything here is a pure function of its arguments and seed.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .bonmi import InstitutionSummary
from .codes import CodeId
from .embed import SPPMIMatrix
from .embedding import Embedding, Provenance
from .events import EventRecord, sort_events
from .validate import LabeledPair

BASE_DATE = dt.date(2005, 1, 1)


@dataclass(frozen=True)
class InstitutionSpec:
    fraction: float
    noise: float = 0.0
    patient_count: int = 1000

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("institution code fraction must lie in (0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 60
    rank: int = 5
    institutions: Tuple[InstitutionSpec, ...] = field(
        default_factory=lambda: tuple(InstitutionSpec(2 / 3) for _ in range(3))
    )
    patients: int = 2000
    days: int = 3650
    intensity: float = 6.0
    codes_per_episode: float = 5.0
    sharpness: float = 4.0
    floor: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.vocab_size >= self.rank >= 1:
            raise ValueError("need vocab_size >= rank >= 1")


def synth_vocab(V: int) -> Tuple[CodeId, ...]:
    width = max(7, len(str(V)))
    return tuple(CodeId("CUI", f"C{i:0{width}d}") for i in range(V))


def gen_ground_truth(V: int, d: int, seed: int = 0) -> Tuple[Embedding, np.ndarray]:
    """Gaussian rows X* (V x d, variance 1/d) and G = X* X*^T of rank d."""
    if V < d or d < 1:
        raise ValueError("need V >= d >= 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((V, d)) / np.sqrt(d)
    G = X @ X.T
    G = (G + G.T) / 2
    return Embedding(synth_vocab(V), X, Provenance.ehr_svd), G


def institution_subsets(V: int, fractions: Sequence[float], seed: int = 0) -> List[np.ndarray]:
    """Circular windows over a seeded code permutation, evenly staggered.

    Institution i covers round(fraction_i * V) consecutive codes starting at
    offset i * V / n, so neighbouring windows overlap and together they wrap
    the whole ring when the fractions are large enough.
    """
    perm = np.random.default_rng(seed).permutation(V)
    n = len(fractions)
    out = []
    for i, f in enumerate(fractions):
        size = max(1, int(round(f * V)))
        start = int(round(i * V / n))
        out.append(np.sort(perm[(start + np.arange(size)) % V]))
    return out


def gen_institution_split(
    G: np.ndarray,
    spec: SynthSpec,
    vocab: Optional[Sequence[CodeId]] = None,
    subsets: Optional[Sequence[Sequence[int]]] = None,
) -> List[InstitutionSummary]:
    """Per-institution matrices: G on the institution's codes plus symmetric noise.

    Noise is sigma * (N + N^T) / sqrt(2) with standard normal N. With
    ``spec.floor`` negatives are cut to zero, as an SPPMI matrix would be.
    """
    V = G.shape[0]
    vocab = tuple(vocab) if vocab is not None else synth_vocab(V)
    if subsets is None:
        subsets = institution_subsets(V, [inst.fraction for inst in spec.institutions], spec.seed)
    subsets = [np.unique(np.asarray(s, dtype=np.int64)) for s in subsets]
    if len(subsets) != len(spec.institutions):
        raise ValueError("one code subset per institution required")
    covered = np.unique(np.concatenate(subsets)) if subsets else np.empty(0)
    if covered.size != V:
        raise ValueError(f"institution subsets cover {covered.size} of {V} codes")
    _check_chained(subsets, spec.rank)

    rng = np.random.default_rng([spec.seed, 1])
    counts = np.array([inst.patient_count for inst in spec.institutions], dtype=np.float64)
    weights = counts / counts.sum()
    out = []
    for i, (inst, idx) in enumerate(zip(spec.institutions, subsets)):
        M = G[np.ix_(idx, idx)].copy()
        N = rng.standard_normal(M.shape)
        if inst.noise > 0:
            M += inst.noise * (N + N.T) / np.sqrt(2)
        if spec.floor:
            M = np.maximum(M, 0.0)
        sppmi = SPPMIMatrix.from_dense([vocab[j] for j in idx], M)
        out.append(InstitutionSummary(f"inst{i + 1}", sppmi, float(weights[i]), inst.patient_count))
    return out


def _check_chained(subsets: Sequence[np.ndarray], d: int) -> None:
    """Every institution must be reachable through overlaps of >= d codes."""
    sets = [set(s.tolist()) for s in subsets]
    reached = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j in range(len(sets)):
            if j not in reached and len(sets[i] & sets[j]) >= d:
                reached.add(j)
                frontier.append(j)
    if len(reached) != len(sets):
        raise ValueError(f"institutions {sorted(set(range(len(sets))) - reached)} are not chained by overlaps >= {d}")


def episode_probabilities(X: np.ndarray, codes_per_episode: float, sharpness: float) -> np.ndarray:
    """Row a: inclusion probability of each code in an episode anchored at code a.

    Proportional to exp(sharpness * cosine(x_a, x_c)), scaled so that about
    ``codes_per_episode`` codes join each episode.
    """
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    U = X / np.where(norms > 0, norms, 1.0)
    logits = sharpness * (U @ U.T)
    P = np.exp(logits - logits.max(axis=1, keepdims=True))
    P = P / P.sum(axis=1, keepdims=True) * codes_per_episode
    return np.clip(P, 0.0, 1.0)


def gen_patient_events(
    X: Embedding,
    patients: int,
    days: int = 3650,
    seed: int = 0,
    intensity: float = 6.0,
    codes_per_episode: float = 5.0,
    sharpness: float = 4.0,
    spread_days: int = 14,
    prefix: str = "P",
) -> List[EventRecord]:
    """Episode model: each patient has 1 + Poisson(intensity) episodes.

    An episode picks an anchor code uniformly, then adds every other code
    independently with a probability rising in its latent cosine to the anchor.
    Codes land within ``spread_days`` of the episode start, so latent neighbours
    co-occur inside a 30-day window far more often than unrelated codes.
    """
    if patients < 0 or days < 1:
        raise ValueError("patients must be >= 0 and days >= 1")
    rng = np.random.default_rng(seed)
    V = len(X.vocab)
    P = episode_probabilities(X.vectors, codes_per_episode, sharpness)
    width = max(6, len(str(patients)))
    out: List[EventRecord] = []
    for p in range(patients):
        pid = f"{prefix}{p:0{width}d}"
        for _ in range(1 + rng.poisson(intensity)):
            anchor = int(rng.integers(V))
            start = int(rng.integers(days))
            hit = rng.random(V) < P[anchor]
            hit[anchor] = True
            codes = np.nonzero(hit)[0]
            offsets = rng.integers(0, spread_days + 1, size=codes.size)
            for c, off in zip(codes, offsets):
                out.append(EventRecord(pid, X.vocab[c], BASE_DATE + dt.timedelta(days=start + int(off))))
    return sort_events(set(out))


def planted_pairs(
    X: Embedding, quantile: float = 0.75, relation: str = "relatedness"
) -> List[LabeledPair]:
    """Code pairs whose ground-truth inner product is in the top (1 - quantile) share."""
    G = X.vectors @ X.vectors.T
    iu = np.triu_indices(len(X.vocab), k=1)
    vals = G[iu]
    cut = np.quantile(vals, quantile)
    keep = vals >= cut
    return [LabeledPair(X.vocab[i], X.vocab[j], relation) for i, j in zip(iu[0][keep], iu[1][keep])]


def split_events_by_patient(events: Sequence[EventRecord], n: int, seed: int = 0) -> List[List[EventRecord]]:
    """Assign whole patients to ``n`` institutions at random (seeded)."""
    patients = sorted({e.patient_id for e in events})
    assign = np.random.default_rng(seed).integers(n, size=len(patients))
    where = dict(zip(patients, assign))
    parts: List[List[EventRecord]] = [[] for _ in range(n)]
    for e in events:
        parts[where[e.patient_id]].append(e)
    return parts
