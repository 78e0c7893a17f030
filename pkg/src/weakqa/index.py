"""Exact inner-product search over encoded passages and a TF-IDF lexical index."""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .data import PassageStore, Vocabulary, tokenize
from .encoder import BagCache, EncoderParams, encode_ids

INDEX_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQIQ")
_MAGIC = b"DIDX"


def params_fingerprint(params: EncoderParams) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(params.E).tobytes())
    h.update(np.ascontiguousarray(params.W_p).tobytes())
    return h.hexdigest()


@dataclass
class DenseIndex:
    ids: list[str]
    matrix: np.ndarray  # |D| x d, row i encodes ids[i]
    params_version: int = 0
    fingerprint: str = ""
    _cols: np.ndarray = field(init=False, repr=False)
    _rank: np.ndarray = field(init=False, repr=False)  # position of each row's id in sorted order

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError("row count does not match id list")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate passage ids in index")
        self._cols = np.ascontiguousarray(self.matrix.T)
        self._rank = np.empty(len(self.ids), dtype=np.int64)
        self._rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(len(self.ids))

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


def sequential_scores(cols: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Dot products accumulated dimension by dimension, in order 0..d-1.

    ``cols`` is d x N; ``q`` is (d,) or (B, d). The fixed accumulation order keeps
    scores bitwise reproducible independent of BLAS.
    """
    if q.ndim == 1:
        s = cols[0] * q[0]
        for j in range(1, cols.shape[0]):
            s += cols[j] * q[j]
        return s
    s = q[:, 0:1] * cols[0][None, :]
    for j in range(1, cols.shape[0]):
        s += q[:, j:j + 1] * cols[j][None, :]
    return s


def _top_rows(scores: np.ndarray, k: int, rank: Optional[np.ndarray] = None) -> np.ndarray:
    """Row indices of the k best scores; ties by ``rank`` (default: row order)."""
    n = scores.shape[0]
    k = min(k, n)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if k < n // 4:
        part = np.argpartition(-scores, k - 1)[:k]
        cand = np.flatnonzero(scores >= scores[part].min())
    else:
        cand = np.arange(n)
    if rank is None:
        return cand[np.argsort(-scores[cand], kind="stable")][:k]
    return cand[np.lexsort((rank[cand], -scores[cand]))][:k]


def build_dense_index(params: EncoderParams, vocab: Vocabulary, store: PassageStore,
                      params_version: int = 0, cache: Optional[BagCache] = None) -> DenseIndex:
    if len(store) == 0:
        raise ValueError("cannot index an empty store")
    cache = cache or BagCache(vocab, store)
    rows = np.stack([encode_ids(params.E, params.W_p, cache.passage(pid)) for pid in store.ids])
    return DenseIndex(list(store.ids), rows, params_version, params_fingerprint(params))


def refresh_index(index: DenseIndex, params: EncoderParams, vocab: Vocabulary, store: PassageStore,
                  cache: Optional[BagCache] = None) -> DenseIndex:
    return build_dense_index(params, vocab, store, index.params_version + 1, cache)


def dense_search(index: DenseIndex, qv: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by inner product; descending score, ties by ascending passage id."""
    if qv.shape != (index.d,):
        raise ValueError(f"query dimension {qv.shape} != index dimension {index.d}")
    if k <= 0:
        return []
    s = sequential_scores(index._cols, qv)
    return [(index.ids[i], float(s[i])) for i in _top_rows(s, k, index._rank)]


def dense_search_batch(index: DenseIndex, Q: np.ndarray, k: int) -> list[list[tuple[str, float]]]:
    if Q.ndim != 2 or Q.shape[1] != index.d:
        raise ValueError(f"query matrix shape {Q.shape} incompatible with d={index.d}")
    if k <= 0:
        return [[] for _ in range(Q.shape[0])]
    S = sequential_scores(index._cols, Q)
    return [[(index.ids[i], float(row[i])) for i in _top_rows(row, k, index._rank)] for row in S]


def save_index(path, index: DenseIndex) -> None:
    """Header (magic, format version, |D|, d, params_version) then little-endian float64 rows."""
    path = Path(path)
    header = _HEADER.pack(_MAGIC, INDEX_FORMAT_VERSION, len(index), index.d, index.params_version)
    body = np.ascontiguousarray(index.matrix, dtype="<f8").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(header)
        f.write(body)
    os.replace(tmp, path)


def load_index(path, ids: Sequence[str]) -> DenseIndex:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("index file truncated")
    magic, version, n, d, pv = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError("not a dense index file")
    if version != INDEX_FORMAT_VERSION:
        raise ValueError(f"unsupported index format version {version}")
    if len(raw) != _HEADER.size + 8 * n * d:
        raise ValueError("index file truncated or corrupt")
    if n != len(ids):
        raise ValueError(f"index holds {n} rows but {len(ids)} ids were given")
    mat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, d).astype(np.float64)
    return DenseIndex(list(ids), mat, pv)


# ---------------------------------------------------------------------------
# TF-IDF


@dataclass
class LexicalIndex:
    ids: list[str]
    terms: dict[str, int]
    df: np.ndarray
    idf: np.ndarray
    matrix: sp.csr_matrix  # N x T, rows L2-normalised

    @property
    def N(self) -> int:
        return len(self.ids)

    def query_vector(self, text: str) -> np.ndarray:
        counts = Counter(t for t in tokenize(text) if t in self.terms)
        v = np.zeros(len(self.terms))
        for t, c in counts.items():
            j = self.terms[t]
            v[j] = c * self.idf[j]
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v


def build_lexical_index(store: PassageStore) -> LexicalIndex:
    if len(store) == 0:
        raise ValueError("cannot index an empty store")
    docs = [Counter(tokenize(p.title) + tokenize(p.text)) for p in store]
    terms = {t: j for j, t in enumerate(sorted(set().union(*docs)))}
    N = len(docs)
    df = np.zeros(len(terms))
    rows, cols, vals = [], [], []
    for i, doc in enumerate(docs):
        for t, c in doc.items():
            j = terms[t]
            df[j] += 1
            rows.append(i)
            cols.append(j)
            vals.append(float(c))
    idf = np.log((N + 1) / (df + 1)) + 1.0
    m = sp.csr_matrix((vals, (rows, cols)), shape=(N, len(terms)))
    m = sp.csr_matrix(m.multiply(idf[None, :]))
    norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
    m = sp.csr_matrix(sp.diags(np.where(norms > 0, 1.0 / np.maximum(norms, 1e-300), 0.0)) @ m)
    return LexicalIndex(list(store.ids), terms, df, idf, m)


def lexical_scores(lex: LexicalIndex, query_text: str) -> np.ndarray:
    return lex.matrix @ lex.query_vector(query_text)


def lexical_search(lex: LexicalIndex, query_text: str, k: int) -> list[tuple[str, float]]:
    """Cosine between tf-idf vectors; descending score, ties by ascending passage id."""
    if k <= 0:
        return []
    s = lexical_scores(lex, query_text)
    return [(lex.ids[i], float(s[i])) for i in _top_rows(s, k)]
