"""Class-weight learning and query-side background reconstruction.

A single weight matrix maps prototypes to class scores and back: its first
rows represent the labelled (known) classes, the remaining rows are free
slots that learn to represent unlabelled background content.  At training
time the rows are pulled apart by two losses (a classification loss for
the known rows and a Gram-identity loss over all rows); scoring a query
prototype against the rows, zeroing the foreground class, and projecting
the scores back through the matrix yields a background prototype for the
query image.  None of this exists at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .prototypes import Prototype


@dataclass
class ClassWeights:
    """Known-class rows stacked above latent-class rows."""

    known: Parameter   # (n_known, d)
    latent: Parameter  # (n_latent, d); may have zero rows

    def __post_init__(self):
        if self.known.ndim != 2 or self.latent.ndim != 2:
            raise ValueError("class weights must be 2-D")
        if self.known.shape[1] != self.latent.shape[1]:
            raise ValueError("known and latent rows disagree on d")

    @property
    def n_known(self) -> int:
        return self.known.shape[0]

    @property
    def n_latent(self) -> int:
        return self.latent.shape[0]

    @property
    def d(self) -> int:
        return self.known.shape[1]

    def concat(self) -> Tensor:
        """The full (n_known + n_latent, d) matrix as one differentiable view."""
        if self.n_latent == 0:
            return self.known
        return ad.concat([self.known, self.latent], axis=0)

    def parameters(self) -> list[Parameter]:
        return [self.known, self.latent]

    @property
    def num_parameters(self) -> int:
        return self.known.data.size + self.latent.data.size


@dataclass
class BackgroundScore:
    """Per-class correlation of a query prototype, foreground zeroed."""

    scores: Tensor  # (n_known + n_latent,)
    foreground_index: int


def init_class_weights(n_known: int, n_latent: int, d: int,
                       rng_seed: int) -> ClassWeights:
    """Uniform(-sqrt(1/d), sqrt(1/d)) initialization of all rows."""
    if n_known < 1:
        raise ValueError("need at least one known class")
    if n_latent < 0 or d < 1:
        raise ValueError("invalid sizes")
    rng = np.random.default_rng(rng_seed)
    bound = float(np.sqrt(1.0 / d))
    return ClassWeights(
        known=Parameter(rng.uniform(-bound, bound, size=(n_known, d)),
                        name="class_weights.known"),
        latent=Parameter(rng.uniform(-bound, bound, size=(n_latent, d)),
                         name="class_weights.latent"),
    )


def _vector_of(prototype) -> Tensor:
    vec = prototype.vector if isinstance(prototype, Prototype) else prototype
    vec = ad.as_tensor(vec)
    if vec.ndim != 1:
        raise ValueError("prototype must be a 1-D vector")
    return vec


def known_class_loss(p_f, foreground_class: int, weights) -> Tensor:
    """Cross-entropy of the known-class logits W_k @ p_f against the label."""
    w_k = weights.known if isinstance(weights, ClassWeights) else ad.as_tensor(weights)
    vec = _vector_of(p_f)
    if not 0 <= foreground_class < w_k.shape[0]:
        raise ValueError(f"foreground class {foreground_class} outside "
                         f"[0, {w_k.shape[0]})")
    logits = ad.matmul(w_k, vec)
    return ad.cross_entropy_logits(logits, np.asarray(foreground_class))


def cross_correlation(w_c) -> Tensor:
    """Gram matrix W = W_c @ W_c^T of the class rows."""
    w_c = w_c.concat() if isinstance(w_c, ClassWeights) else ad.as_tensor(w_c)
    if w_c.ndim != 2:
        raise ValueError("expected a 2-D weight matrix")
    return ad.matmul(w_c, ad.transpose(w_c, (1, 0)))


def latent_class_loss(w) -> Tensor:
    """Squared deviation of the Gram matrix from the identity.

    sum_i (1 - W_ii)^2 + sum_{i != j} W_ij^2, which is exactly
    ||W - I||_F^2.  Zero iff the class rows are orthonormal, which is
    attainable only when there are at most d rows.
    """
    w = ad.as_tensor(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("cross-correlation matrix must be square")
    deviation = ad.sub(w, np.eye(w.shape[0]))
    return ad.tsum(ad.mul(deviation, deviation))


def background_scores(p_q, foreground_class: int, weights) -> BackgroundScore:
    """Raw correlation of `p_q` with every class row, foreground zeroed.

    Scores are unnormalized dot products; only the foreground's known-class
    entry is suppressed, latent entries always survive.
    """
    if isinstance(weights, ClassWeights):
        if not 0 <= foreground_class < weights.n_known:
            raise ValueError(f"foreground class {foreground_class} outside "
                             f"[0, {weights.n_known})")
        w_c = weights.concat()
    else:
        w_c = ad.as_tensor(weights)
        if not 0 <= foreground_class < w_c.shape[0]:
            raise ValueError("foreground class outside the weight rows")
    vec = _vector_of(p_q)
    keep = np.ones(w_c.shape[0])
    keep[foreground_class] = 0.0
    scores = ad.mul(ad.matmul(w_c, vec), keep)
    return BackgroundScore(scores=scores, foreground_index=foreground_class)


def reconstruct_background(score, weights) -> Prototype:
    """Back-project class scores through the rows: P_b = W_c^T @ S_b."""
    scores = score.scores if isinstance(score, BackgroundScore) else ad.as_tensor(score)
    w_c = weights.concat() if isinstance(weights, ClassWeights) else ad.as_tensor(weights)
    if scores.shape[0] != w_c.shape[0]:
        raise ValueError(f"score length {scores.shape[0]} does not match "
                         f"{w_c.shape[0]} class rows")
    vector = ad.matmul(ad.transpose(w_c, (1, 0)), scores)
    return Prototype(vector=vector, kind="background")


def reconstruct_query_background(p_q, foreground_class: int, weights,
                                 detach_query: bool = False) -> Prototype:
    """Full scoring + back-projection pipeline from a query prototype."""
    vec = _vector_of(p_q)
    if detach_query:
        vec = vec.detach()
    score = background_scores(vec, foreground_class, weights)
    return reconstruct_background(score, weights)
