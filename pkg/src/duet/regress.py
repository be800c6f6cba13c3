"""Parametric branch: feature regression with annealed retrieval consistency.

A plain MLP head maps precomputed per-spot features to log1p expression. For
the first E_d epochs its loss carries an extra consistency term pulling the
prediction toward the memory branch's retrieved expression, with a cosine
weight decaying from lambda0 to zero. The retrieval side is recomputed once
per epoch from the frozen alignment model and treated as a constant: no
gradient flows into the contrastive heads. Once the weight hits zero the
retrieval machinery is skipped entirely, so a lambda0=0 schedule is bitwise
identical to training that never touches the database.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import AlignModel, embed_images
from .core import Mlp, Rng, SgdState, as_matrix
from .errors import InputError, NumericError
from .retrieval import RetrievalConfig, rebuild_db, retrieve

DEFAULT_HIDDEN = (256, 256)
DEFAULT_BATCH_SIZE = 128
DEFAULT_LAMBDA0 = 1.0
DEFAULT_DECAY_EPOCHS = 30


@dataclass
class RegModel:
    head: Mlp
    feature_dim: int
    gene_dim: int

    def __post_init__(self):
        if self.head.in_dim != self.feature_dim or self.head.out_dim != self.gene_dim:
            raise InputError("regression head dims disagree with declared dims")

    @classmethod
    def init(cls, feature_dim: int, gene_dim: int, rng: Rng,
             hidden: tuple = DEFAULT_HIDDEN) -> "RegModel":
        dims = [feature_dim, *hidden, gene_dim]
        head = Mlp.init(dims, rng.child("reg-init"))
        return cls(head=head, feature_dim=feature_dim, gene_dim=gene_dim)

    def predict(self, features) -> np.ndarray:
        out, _ = self.head.forward(np.asarray(features, dtype=np.float64))
        return out


@dataclass
class AnnealSchedule:
    lambda0: float = DEFAULT_LAMBDA0
    decay_epochs: int = DEFAULT_DECAY_EPOCHS

    def __post_init__(self):
        if self.lambda0 < 0:
            raise InputError("lambda0 must be non-negative")
        if self.decay_epochs < 1:
            raise InputError("decay_epochs must be >= 1")


def lambda_at(sched: AnnealSchedule, e: int) -> float:
    """Cosine decay from lambda0 at e=0 to exactly 0 at e >= decay_epochs."""
    if e < 0:
        raise InputError("epoch index must be non-negative")
    if e >= sched.decay_epochs:
        return 0.0
    # the phase fraction is computed first so the midpoint of an even decay
    # window lands on exactly pi/2 and the schedule returns exactly lambda0/2
    return 0.5 * sched.lambda0 * (1.0 + np.cos(np.pi * (e / sched.decay_epochs)))


def reg_loss(p_reg, y, p_ret, lam: float):
    """MSE to truth plus lam-weighted MSE to the retrieved prediction.

    Returns (loss, gradient w.r.t. p_reg); p_ret is a constant here.
    """
    p_reg = np.asarray(p_reg, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p_ret = np.asarray(p_ret, dtype=np.float64)
    if not (p_reg.shape == y.shape == p_ret.shape) or p_reg.ndim != 1:
        raise InputError("reg_loss needs three aligned vectors")
    if lam < 0:
        raise InputError("lam must be non-negative")
    g = p_reg.shape[0]
    err = p_reg - y
    gap = p_reg - p_ret
    loss = float(err @ err + lam * (gap @ gap)) / g
    grad = (2.0 / g) * (err + lam * gap)
    return loss, grad


@dataclass
class RetrievalSources:
    """Everything the consistency term needs to rebuild and query the DB."""

    expressions: np.ndarray  # (S, G) log1p expressions, the DB payload
    gating: np.ndarray  # (S, T)
    spot_ids: list
    img_features: np.ndarray  # (S, D_img) query-side inputs per training spot
    cfg: RetrievalConfig

    def __post_init__(self):
        self.expressions = as_matrix(self.expressions)
        self.gating = as_matrix(self.gating)
        self.img_features = as_matrix(self.img_features)
        n = self.expressions.shape[0]
        if self.gating.shape[0] != n or self.img_features.shape[0] != n \
                or len(self.spot_ids) != n:
            raise InputError("retrieval source arrays must share the same length")


def _retrieved_targets(align_model: AlignModel, sources: RetrievalSources) -> np.ndarray:
    db = rebuild_db(align_model, sources.expressions, sources.gating,
                    sources.spot_ids)
    queries = embed_images(align_model, sources.img_features)
    rows = [
        retrieve(db, queries[s], sources.gating[s], sources.cfg).p_ret
        for s in range(queries.shape[0])
    ]
    return np.stack(rows)


def train_regress(features, targets, align_model: AlignModel | None,
                  db_sources: RetrievalSources | None, sched: AnnealSchedule,
                  epochs: int, opt: SgdState, rng: Rng,
                  start_epoch: int = 0, batch_size: int = DEFAULT_BATCH_SIZE,
                  model: RegModel | None = None) -> RegModel:
    """Minibatch SGD on the annealed objective with per-epoch DB refresh."""
    x = as_matrix(features)
    y = as_matrix(targets)
    if x.shape[0] != y.shape[0]:
        raise InputError("features and targets must have the same rows")
    if epochs < 1:
        raise InputError("train_regress needs epochs >= 1")
    n, g = y.shape
    if model is None:
        model = RegModel.init(x.shape[1], g, rng)
    if model.feature_dim != x.shape[1] or model.gene_dim != g:
        raise InputError("model dims disagree with the training data")
    if db_sources is not None and x.shape[0] != db_sources.expressions.shape[0]:
        raise InputError("db_sources must cover exactly the training spots")

    params = model.head.param_arrays()
    for i in range(epochs):
        e = start_epoch + i
        lam = lambda_at(sched, e)
        if lam > 0.0:
            if align_model is None or db_sources is None:
                raise InputError(
                    "consistency weight is positive but no retrieval sources given"
                )
            p_ret = _retrieved_targets(align_model, db_sources)
        else:
            p_ret = None  # retrieval is skipped entirely, not just zero-weighted

        perm = rng.child("shuffle", e).permutation(n)
        stop = max(n // batch_size, 1) * batch_size if n >= batch_size else n
        for lo in range(0, stop, batch_size):
            idx = perm[lo:lo + batch_size]
            out, tape = model.head.forward(x[idx])
            err = out - y[idx]
            with np.errstate(over="ignore", invalid="ignore"):
                if p_ret is None:
                    batch_loss = float(np.mean(err**2))
                    d_out = (2.0 / (g * idx.size)) * err
                else:
                    gap = out - p_ret[idx]
                    batch_loss = float(np.mean(err**2) + lam * np.mean(gap**2))
                    d_out = (2.0 / (g * idx.size)) * (err + lam * gap)
            if not np.isfinite(batch_loss):
                raise NumericError(f"regression training diverged at epoch {e}")
            grads = model.head.backward(tape, d_out)
            opt.step(params, [a for pair in grads.layers for a in pair])
            model.head.touch()
    return model
