"""Combine EHR and language-model embeddings; cosine-ranked feature selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .codes import CodeId
from .embedding import Embedding, Provenance, load_embedding
from .validate import RANK_DECIMALS

log = logging.getLogger(__name__)


class MissingPolicy(str, Enum):
    drop = "drop"
    error = "error"


@dataclass(frozen=True)
class IntegrationSpec:
    w: float = 0.5
    normalize_rows: bool = True
    missing_policy: MissingPolicy = MissingPolicy.drop

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"weight w={self.w} outside [0, 1]")
        object.__setattr__(self, "missing_policy", MissingPolicy(self.missing_policy))


def load_embedding_file(path) -> Embedding:
    return load_embedding(path, Provenance.plm_file)


def vocab_overlap(ehr: Embedding, plm: Embedding) -> Tuple[List[CodeId], List[CodeId], List[CodeId]]:
    """(shared codes in EHR order, EHR-only codes, PLM-only codes)."""
    shared = [c for c in ehr.vocab if c in plm]
    ehr_only = [c for c in ehr.vocab if c not in plm]
    plm_only = [c for c in plm.vocab if c not in ehr]
    return shared, ehr_only, plm_only


def concat_weighted(ehr: Embedding, plm: Embedding, spec: IntegrationSpec = IntegrationSpec()) -> Embedding:
    """Rows ``[w * x_ehr, (1 - w) * x_plm]`` over the shared vocabulary.

    With ``normalize_rows`` each source row is scaled to unit length first, so
    every output row has norm sqrt(w^2 + (1-w)^2) and cosines mix as
    (w^2 s_ehr + (1-w)^2 s_plm) / (w^2 + (1-w)^2).
    """
    shared, ehr_only, plm_only = vocab_overlap(ehr, plm)
    if spec.missing_policy is MissingPolicy.error and (ehr_only or plm_only):
        listed = ", ".join(c.text for c in (ehr_only + plm_only)[:20])
        raise ValueError(
            f"{len(ehr_only)} EHR-only and {len(plm_only)} PLM-only code(s): {listed}"
        )
    if not shared:
        raise ValueError("EHR and PLM embeddings share no codes")
    if ehr_only or plm_only:
        log.info("dropped %d EHR-only and %d PLM-only codes", len(ehr_only), len(plm_only))
    a = ehr.subset(shared)
    b = plm.subset(shared)
    xa, xb = (a.unit_rows(), b.unit_rows()) if spec.normalize_rows else (a.vectors, b.vectors)
    vectors = np.hstack([spec.w * xa, (1.0 - spec.w) * xb])
    return Embedding(a.vocab, vectors, Provenance.integrated)


def select_features(
    e: Embedding, target: CodeId, n: int, domain_filter: Optional[Iterable[str]] = None
) -> List[Tuple[CodeId, float]]:
    """Top ``n`` codes by cosine to ``target`` (target excluded, ties by code text).

    Cosines equal to 12 decimals count as tied.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if target not in e:
        raise KeyError(f"target {target} not in embedding vocabulary")
    domains = set(domain_filter) if domain_filter else None
    U = e.unit_rows()
    ti = e.position(target)
    if not U[ti].any():
        raise ValueError(f"embedding row for {target} is the zero vector")
    sims = np.clip(U @ U[ti], -1.0, 1.0)
    keys = np.round(sims, RANK_DECIMALS)
    cands = [
        (c, float(sims[i]), keys[i])
        for i, c in enumerate(e.vocab)
        if i != ti and (domains is None or c.domain in domains)
    ]
    cands.sort(key=lambda t: (-t[2], t[0].text))
    return [(c, s) for c, s, _ in cands[:n]]
