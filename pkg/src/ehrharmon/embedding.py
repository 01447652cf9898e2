"""Vocabulary-indexed dense embeddings and their TSV format."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Tuple

import numpy as np

from .codes import CodeFormatError, CodeId, parse_code
from .fileio import atomic_write


class Provenance(str, Enum):
    ehr_svd = "ehr_svd"
    plm_file = "plm_file"
    integrated = "integrated"
    joint = "joint"


class EmbeddingFileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Embedding:
    vocab: Tuple[CodeId, ...]
    vectors: np.ndarray
    provenance: Provenance = Provenance.ehr_svd

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.vocab):
            raise ValueError(f"vectors shape {vectors.shape} does not match vocab size {len(self.vocab)}")
        if not np.isfinite(vectors).all():
            raise ValueError("embedding has non-finite entries")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("embedding vocab has duplicates")
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.vocab)})

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, code) -> bool:
        return code in self._index

    def index(self) -> Dict[CodeId, int]:
        return dict(self._index)

    def position(self, code: CodeId) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise KeyError(f"{code} not in embedding vocabulary") from None

    def row(self, code: CodeId) -> np.ndarray:
        return self.vectors[self.position(code)]

    def subset(self, codes: Iterable[CodeId]) -> "Embedding":
        """Rows for ``codes`` (kept in this embedding's order)."""
        keep = set(codes)
        pos = [i for i, c in enumerate(self.vocab) if c in keep]
        return Embedding(tuple(self.vocab[i] for i in pos), self.vectors[pos], self.provenance)

    def unit_rows(self) -> np.ndarray:
        """Rows scaled to unit norm; zero rows stay zero."""
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        return np.divide(self.vectors, norms, out=np.zeros_like(self.vectors), where=norms > 0)


def save_embedding(path, e: Embedding) -> None:
    with atomic_write(path) as fh:
        for code, vec in zip(e.vocab, e.vectors):
            fh.write(code.text)
            for v in vec:
                fh.write("\t" + repr(float(v)))
            fh.write("\n")


def load_embedding(path, provenance=Provenance.plm_file) -> Embedding:
    """Read ``code<TAB>v1<TAB>...<TAB>vd`` rows.

    An optional first line starting with ``code`` is treated as a header.
    Ragged rows, non-finite values, bad codes and duplicates are fatal and
    name the line.
    """
    vocab = []
    rows = []
    seen: Dict[CodeId, int] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if lineno == 1 and parts[0] == "code":
                continue
            try:
                code = parse_code(parts[0])
            except CodeFormatError as exc:
                raise EmbeddingFileError(f"{path}:{lineno}: {exc}") from None
            if code in seen:
                raise EmbeddingFileError(f"{path}:{lineno}: duplicate code {code} (first on line {seen[code]})")
            if dim is None:
                dim = len(parts) - 1
                if dim < 1:
                    raise EmbeddingFileError(f"{path}:{lineno}: row has no vector components")
            elif len(parts) - 1 != dim:
                raise EmbeddingFileError(f"{path}:{lineno}: expected {dim} components, found {len(parts) - 1}")
            try:
                vec = [float(x) for x in parts[1:]]
            except ValueError:
                raise EmbeddingFileError(f"{path}:{lineno}: non-numeric component") from None
            if not all(math.isfinite(v) for v in vec):
                raise EmbeddingFileError(f"{path}:{lineno}: non-finite component")
            seen[code] = lineno
            vocab.append(code)
            rows.append(vec)
    if not rows:
        raise EmbeddingFileError(f"{path}: no embedding rows")
    return Embedding(tuple(vocab), np.array(rows, dtype=np.float64), provenance)
