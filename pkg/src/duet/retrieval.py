"""Memory branch: gated k-nearest-neighbor retrieval over aligned embeddings.

A query spot embedding pulls the n_candidates most similar database entries,
the cell-aware gate drops candidates whose estimated cell count or type
composition disagrees with the query, survivors are re-ranked by a blend of
embedding and composition similarity, and the top_k survivors vote with
softmax weights to produce the retrieved expression prediction.

All selection is exact (full or partial sort, no approximate index) with ties
broken by ascending database index so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import AlignModel, embed_expressions
from .core import as_matrix
from .errors import InputError

DEFAULT_N_CANDIDATES = 150
DEFAULT_TOP_K = 100
DEFAULT_TAU_C = 0.5
DEFAULT_TAU_P = 0.3
DEFAULT_BETA = 0.3


@dataclass
class EmbeddingDB:
    """Immutable retrieval index: unit embeddings with aligned payloads."""

    h: np.ndarray  # (N, d) unit rows
    expressions: np.ndarray  # (N, G) log1p scale
    gating: np.ndarray  # (N, T) non-negative estimated cell counts
    spot_ids: list

    def __post_init__(self):
        self.h = as_matrix(self.h)
        self.expressions = as_matrix(self.expressions)
        self.gating = as_matrix(self.gating)
        self.spot_ids = list(self.spot_ids)
        n = self.h.shape[0]
        if n == 0:
            raise InputError("embedding database is empty")
        if self.expressions.shape[0] != n or self.gating.shape[0] != n \
                or len(self.spot_ids) != n:
            raise InputError("database arrays must share the same length")
        norms = np.linalg.norm(self.h, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InputError("database embeddings must be unit rows")
        if np.any(self.gating < 0):
            raise InputError("gating rows must be non-negative")

    @property
    def size(self) -> int:
        return self.h.shape[0]


@dataclass
class RetrievalConfig:
    n_candidates: int = DEFAULT_N_CANDIDATES
    top_k: int = DEFAULT_TOP_K
    tau_c: float = DEFAULT_TAU_C
    tau_p: float = DEFAULT_TAU_P
    beta: float = DEFAULT_BETA
    softmax_temp: float = 1.0

    def __post_init__(self):
        if not 0 < self.top_k <= self.n_candidates:
            raise InputError("need 0 < top_k <= n_candidates")
        if not 0.0 <= self.tau_c <= 1.0:
            raise InputError("tau_c must lie in [0, 1]")
        # tau_p = -1 admits every finite composition, which is how the
        # gating ablation switches the composition test off
        if not -1.0 <= self.tau_p <= 1.0:
            raise InputError("tau_p must lie in [-1, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise InputError("beta must lie in [0, 1]")
        if self.softmax_temp <= 0:
            raise InputError("softmax_temp must be positive")


@dataclass
class RetrievalResult:
    p_ret: np.ndarray  # (G,)
    kept_ids: list  # spot ids of aggregated entries, rank order
    scores: np.ndarray  # blended r for the kept entries
    weights: np.ndarray  # softmax weights, sum to 1
    mask_stats: tuple  # (n_candidates_considered, n_passed_gate)


def _check_query(db: EmbeddingDB, v_s: np.ndarray) -> np.ndarray:
    v = np.asarray(v_s, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != db.h.shape[1]:
        raise InputError("query embedding dimension mismatch")
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise InputError("query embedding must be unit norm")
    return v


def candidates(db: EmbeddingDB, v_s: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n largest dot products, ties by ascending index."""
    v = _check_query(db, v_s)
    if not 0 < n <= db.size:
        raise InputError(f"need 0 < n <= {db.size}, got {n}")
    phi = db.h @ v
    order = np.lexsort((np.arange(db.size), -phi))
    return order[:n]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def gate_mask(g_s, g_j, tau_c: float, tau_p: float) -> int:
    """1 iff total cell count deviation <= tau_c and composition cos >= tau_p."""
    g_s = np.asarray(g_s, dtype=np.float64)
    g_j = np.asarray(g_j, dtype=np.float64)
    if np.any(g_s < 0) or np.any(g_j < 0):
        raise InputError("gating rows must be non-negative")
    ts, tj = g_s.sum(), g_j.sum()
    denom = max(ts, tj)
    deviation = 0.0 if denom == 0.0 else abs(ts - tj) / denom
    return int(deviation <= tau_c and _cosine(g_s, g_j) >= tau_p)


def blended_scores(phi, sim, beta: float) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    sim = np.asarray(sim, dtype=np.float64)
    if phi.shape != sim.shape:
        raise InputError("phi and sim must be aligned")
    return (1.0 - beta) * phi + beta * sim


def _softmax(scores: np.ndarray, temp: float) -> np.ndarray:
    z = scores / temp
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def retrieve(db: EmbeddingDB, v_s, g_s, cfg: RetrievalConfig) -> RetrievalResult:
    """Gated softmax-weighted expression retrieval for one query spot."""
    v = _check_query(db, v_s)
    g_s = np.asarray(g_s, dtype=np.float64)
    if g_s.shape != (db.gating.shape[1],):
        raise InputError("query gating row dimension mismatch")

    n_cand = min(cfg.n_candidates, db.size)
    cand = candidates(db, v, n_cand)
    phi = db.h[cand] @ v

    # vectorized gate_mask over the candidate rows, same formulas
    gj = db.gating[cand]
    ts = float(g_s.sum())
    tj = gj.sum(axis=1)
    denom = np.maximum(ts, tj)
    deviation = np.where(denom == 0.0, 0.0,
                         np.abs(ts - tj) / np.where(denom == 0.0, 1.0, denom))
    ns = float(np.linalg.norm(g_s))
    nj = np.linalg.norm(gj, axis=1)
    zero = (ns == 0.0) | (nj == 0.0)
    sim = np.where(zero, 0.0,
                   (gj @ g_s) / np.where(zero, 1.0, ns * nj))
    passed = (deviation <= cfg.tau_c) & (sim >= cfg.tau_p)
    n_passed = int(passed.sum())

    if n_passed == 0:
        # nothing survives the gate; fall back to the ungated nearest
        # entries so downstream consumers never see an empty prediction
        pool = np.arange(min(cfg.top_k, n_cand))
    else:
        pool = np.flatnonzero(passed)

    r = blended_scores(phi[pool], sim[pool], cfg.beta)
    rank = np.lexsort((cand[pool], -r))[:cfg.top_k]
    kept_local = pool[rank]
    kept = cand[kept_local]
    kept_scores = blended_scores(phi[kept_local], sim[kept_local], cfg.beta)

    weights = _softmax(kept_scores, cfg.softmax_temp)
    p_ret = weights @ db.expressions[kept]
    return RetrievalResult(
        p_ret=p_ret,
        kept_ids=[db.spot_ids[j] for j in kept],
        scores=kept_scores,
        weights=weights,
        mask_stats=(n_cand, n_passed),
    )


def rebuild_db(model: AlignModel, train_expressions, train_gating,
               train_ids) -> EmbeddingDB:
    """Re-embed the training expressions with the current gene head."""
    expr = as_matrix(train_expressions)
    gating = as_matrix(train_gating)
    ids = list(train_ids)
    if expr.shape[0] == 0:
        raise InputError("cannot build a database from an empty training set")
    if gating.shape[0] != expr.shape[0] or len(ids) != expr.shape[0]:
        raise InputError("training arrays must share the same length")
    h = embed_expressions(model, expr)
    return EmbeddingDB(h=h, expressions=expr.copy(), gating=gating.copy(),
                       spot_ids=ids)
