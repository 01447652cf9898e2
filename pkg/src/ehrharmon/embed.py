"""SPPMI matrices and SVD-PMI embeddings with two rank-selection rules."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .codes import CodeId
from .cooccur import CooccurrenceMatrix, meta_path, read_triplets, write_triplets
from .embedding import Embedding, Provenance
from .fileio import atomic_write, read_kv, write_kv

log = logging.getLogger(__name__)

# Up to this many codes the spectrum is computed densely.
DENSE_LIMIT = 2000
# Partial-spectrum cap for variance-based rank selection on larger vocabularies.
DEFAULT_SPECTRUM_CAP = 1000

SPPMI_HEADER = "code_i\tcode_j\tvalue"


class RankWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class SPPMIMatrix:
    """Symmetric sparse matrix over a sorted vocabulary.

    Values produced by :func:`build_sppmi` are non-negative; synthetic
    institution matrices built without flooring may carry negatives.
    """

    vocab: Tuple[CodeId, ...]
    values: sp.csr_matrix
    k: float = 1.0

    def __post_init__(self):
        m = sp.csr_matrix(self.values, dtype=np.float64)
        if m.shape != (len(self.vocab), len(self.vocab)):
            raise ValueError(f"matrix shape {m.shape} does not match vocab size {len(self.vocab)}")
        m.eliminate_zeros()
        m.sort_indices()
        object.__setattr__(self, "values", m)
        object.__setattr__(self, "vocab", tuple(self.vocab))

    def dense(self) -> np.ndarray:
        return self.values.toarray()

    def index(self):
        return {c: i for i, c in enumerate(self.vocab)}

    @classmethod
    def from_dense(cls, vocab, values: np.ndarray, k: float = 1.0) -> "SPPMIMatrix":
        return cls(tuple(vocab), sp.csr_matrix(np.asarray(values, dtype=np.float64)), k)


def build_sppmi(C: CooccurrenceMatrix, k: float = 1.0) -> SPPMIMatrix:
    """max(log(C(w,c)|D| / (C(w,.)C(c,.))) - log k, 0), natural log.

    Zero counts stay structurally zero and non-positive shifted values are
    dropped from storage.
    """
    if not k > 0:
        raise ValueError("negative sampling rate k must be > 0")
    coo = C.counts.tocoo()
    marg = np.asarray(C.marginals, dtype=np.float64)
    live = coo.data != 0
    rows, cols, data = coo.row[live], coo.col[live], coo.data[live].astype(np.float64)
    if np.any(marg[rows] <= 0) or np.any(marg[cols] <= 0):
        raise ValueError("co-occurrence matrix has nonzero entries in a row with zero marginal")
    total = float(C.total)
    vals = np.log(data * total / (marg[rows] * marg[cols])) - math.log(k)
    pos = vals > 0
    n = len(C.vocab)
    m = sp.csr_matrix((vals[pos], (rows[pos], cols[pos])), shape=(n, n))
    return SPPMIMatrix(C.vocab, m, float(k))


def _as_operator(S):
    if isinstance(S, SPPMIMatrix):
        return S.values
    return S


def _fix_signs(Q: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if Q.size == 0:
        return Q
    pivot = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[pivot, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return Q * signs


def top_eigenpairs(S, d: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Largest ``d`` eigenpairs of a symmetric matrix, eigenvalues descending.

    Dense ``eigh`` up to DENSE_LIMIT codes, otherwise seeded Lanczos.
    """
    M = _as_operator(S)
    n = M.shape[0]
    if not 1 <= d <= n:
        raise ValueError(f"rank {d} outside [1, {n}]")
    if n <= DENSE_LIMIT or d >= n - 1:
        A = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=np.float64)
        lam, Q = np.linalg.eigh((A + A.T) / 2)
        order = np.argsort(-lam, kind="stable")[:d]
        lam, Q = lam[order], Q[:, order]
    else:
        v0 = np.random.default_rng(seed).standard_normal(n)
        lam, Q = spla.eigsh(sp.csr_matrix(M, dtype=np.float64), k=d, which="LA", v0=v0)
        order = np.argsort(-lam, kind="stable")
        lam, Q = lam[order], Q[:, order]
    return lam, _fix_signs(Q)


def _embedding_from_pairs(vocab, lam: np.ndarray, Q: np.ndarray, provenance) -> Embedding:
    d = lam.size
    tol = max(Q.shape[0], 1) * np.finfo(float).eps * max(abs(lam[0]) if d else 0.0, 1e-300)
    keep = lam > tol
    if not keep.all():
        warnings.warn(
            f"requested rank {d} exceeds numerical rank of the positive part "
            f"({int(keep.sum())}); trailing columns are zero",
            RankWarning,
            stacklevel=3,
        )
    scale = np.where(keep, np.sqrt(np.clip(lam, 0, None)), 0.0)
    return Embedding(tuple(vocab), Q * scale, provenance)


def train_embedding(S, d: int, seed: int = 0, vocab=None, provenance=Provenance.ehr_svd) -> Embedding:
    """Rank-``d`` embedding Q_d Lambda_d^{1/2} of symmetric ``S``.

    ``S`` is an SPPMIMatrix or a square array (then ``vocab`` is required).
    Columns follow descending eigenvalue; negative eigenvalues never enter the
    Gram matrix and surface as zero columns with a RankWarning.
    """
    if vocab is None:
        vocab = S.vocab
    lam, Q = top_eigenpairs(S, d, seed)
    return _embedding_from_pairs(vocab, lam, Q, provenance)


def singular_values(S, cap: Optional[int] = None, seed: int = 0) -> Tuple[np.ndarray, float, bool]:
    """Singular values (descending), total squared energy, and whether truncated."""
    M = _as_operator(S)
    n = M.shape[0]
    if sp.issparse(M):
        energy = float(M.multiply(M).sum())
    else:
        energy = float(np.sum(np.asarray(M) ** 2))
    if n <= DENSE_LIMIT:
        A = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=np.float64)
        sv = np.sort(np.abs(np.linalg.eigvalsh((A + A.T) / 2)))[::-1]
        return sv, energy, False
    cap = min(cap or DEFAULT_SPECTRUM_CAP, n - 2)
    v0 = np.random.default_rng(seed).standard_normal(n)
    lam = spla.eigsh(sp.csr_matrix(M, dtype=np.float64), k=cap, which="LM", v0=v0, return_eigenvectors=False)
    return np.sort(np.abs(lam))[::-1], energy, True


def select_rank_variance(S, tau: float = 0.95, cap: Optional[int] = None, seed: int = 0) -> int:
    """Smallest d whose leading singular values hold a ``tau`` share of sum(sigma^2).

    The total is the squared Frobenius norm, so a partial spectrum still gives
    exact shares; when the cap is too small to reach ``tau`` the cap is
    returned with a RankWarning.
    """
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    sv, energy, truncated = singular_values(S, cap, seed)
    if energy <= 0 or sv.size == 0 or sv[0] == 0:
        raise ValueError("matrix is all zero; no variation to retain")
    sq = sv**2
    cum = np.cumsum(sq)
    tol = sv.size * np.finfo(float).eps * sv[0]
    rank = max(int(np.sum(sv > tol)), 1)
    # relative slack absorbs round-off so tau = 1 lands on the numerical rank
    hit = np.nonzero(cum >= tau * energy * (1 - 1e-10))[0]
    if hit.size == 0:
        if truncated:
            warnings.warn(f"partial spectrum cap {sv.size} reached before tau={tau}", RankWarning, stacklevel=2)
        return min(sv.size, rank)
    return min(int(hit[0]) + 1, rank)


def select_rank_auc(S, related_pairs, d_grid: Sequence[int], seed: int = 0, n_random=None) -> int:
    """Grid rank with the highest related-vs-random AUC (mean over relations).

    One eigendecomposition at max(d_grid) serves every grid point, and the
    random pairs are drawn once from ``seed``. Ties go to the smaller rank.
    """
    from .validate import auc_related_vs_random, filter_pairs, sample_random_pairs

    grid = sorted(set(int(d) for d in d_grid))
    if not grid:
        raise ValueError("d_grid is empty")
    vocab = S.vocab
    usable, _ = filter_pairs(related_pairs, set(vocab))
    if not usable:
        raise ValueError("no related pair has both codes in the vocabulary")
    randoms = sample_random_pairs(vocab, usable, n_random, seed)
    lam, Q = top_eigenpairs(S, grid[-1], seed)
    best_d, best_auc = None, -np.inf
    for d in grid:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankWarning)
            e = _embedding_from_pairs(vocab, lam[:d], Q[:, :d], Provenance.ehr_svd)
        aucs = auc_related_vs_random(e, usable, seed=seed, random_pairs=randoms).auc
        score = float(np.mean(list(aucs.values())))
        log.info("rank %d: mean AUC %.4f", d, score)
        if score > best_auc:
            best_d, best_auc = d, score
    return best_d


def gram_error(e: Embedding, S) -> float:
    """Frobenius norm of S - X X^T."""
    M = _as_operator(S)
    A = M.toarray() if sp.issparse(M) else np.asarray(M)
    return float(np.linalg.norm(A - e.vectors @ e.vectors.T))


def save_sppmi(path, S: SPPMIMatrix) -> None:
    with atomic_write(path) as fh:
        write_triplets(fh, S.vocab, S.values, SPPMI_HEADER, fmt=lambda v: repr(float(v)))
    with atomic_write(meta_path(path)) as fh:
        write_kv(fh, {"kind": "sppmi", "k": float(S.k), "vocab_size": len(S.vocab)})


def load_sppmi(path) -> SPPMIMatrix:
    mp = meta_path(path)
    meta = read_kv(mp) if mp.exists() else {}
    vocab, rows, cols, vals = read_triplets(path, SPPMI_HEADER, float)
    vals = np.asarray(vals, dtype=np.float64)
    if not np.isfinite(vals).all():
        raise ValueError(f"{path}: non-finite value")
    n = len(vocab)
    off = rows != cols
    m = sp.csr_matrix(
        (np.concatenate([vals, vals[off]]), (np.concatenate([rows, cols[off]]), np.concatenate([cols, rows[off]]))),
        shape=(n, n),
    )
    return SPPMIMatrix(vocab, m, float(meta.get("k", 1.0)))
