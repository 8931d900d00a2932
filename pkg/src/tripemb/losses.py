"""Triplet losses, their gradients, and the violation metric.

A triplet ``(i, j, k)`` reads "i is at least as similar to j as to k".  With
embeddings ``hi, hj, hk`` and squared Euclidean dissimilarity, everything here
is a function of the difference ``d(hi, hj) - d(hi, hk)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

DEFAULT_HINGE_MARGIN = 0.01


@dataclass(frozen=True)
class ClipBounds:
    l: float = -0.01
    u: float = 0.1

    def __post_init__(self):
        if not self.l < self.u:
            raise UsageError(f"clip bounds need l < u, got [{self.l}, {self.u}]")


DEFAULT_BOUNDS = ClipBounds()


def _vectors(*vs):
    arrs = [np.asarray(v, dtype=np.float64) for v in vs]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise UsageError(f"embedding dimensions differ: {[a.shape for a in arrs]}")
    return arrs


def sq_euclidean(a, b):
    """Squared Euclidean distance; works row-wise on ``(..., d)`` arrays."""
    a, b = _vectors(a, b)
    diff = a - b
    return np.sum(diff * diff, axis=-1)


def triplet_arg(hi, hj, hk):
    """Pre-clip argument ``d(hi, hj) - d(hi, hk)``."""
    hi, hj, hk = _vectors(hi, hj, hk)
    return sq_euclidean(hi, hj) - sq_euclidean(hi, hk)


def clip(x, bounds: ClipBounds = DEFAULT_BOUNDS):
    """0 below ``l``, 1 above ``u``, linear in between."""
    out = (np.asarray(x, dtype=np.float64) - bounds.l) / (bounds.u - bounds.l)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def clipped_triplet_loss(hi, hj, hk, bounds: ClipBounds = DEFAULT_BOUNDS):
    return clip(triplet_arg(hi, hj, hk), bounds)


def hinge_triplet_loss(hi, hj, hk, margin: float = DEFAULT_HINGE_MARGIN):
    if margin < 0:
        raise UsageError(f"hinge margin must be >= 0, got {margin}")
    out = np.maximum(0.0, triplet_arg(hi, hj, hk) + margin)
    return float(out) if np.ndim(out) == 0 else out


def _arg_grads(hi, hj, hk):
    return 2.0 * (hk - hj), 2.0 * (hj - hi), -2.0 * (hk - hi)


def loss_grad(hi, hj, hk, bounds: ClipBounds = DEFAULT_BOUNDS):
    """Gradients of the clipped loss w.r.t. ``hi``, ``hj`` and ``hk``.

    Accepts single vectors or ``(n, d)`` batches.  Outside the open interval
    ``(l, u)`` (and at its end points) the gradient is zero.
    """
    hi, hj, hk = _vectors(hi, hj, hk)
    x = triplet_arg(hi, hj, hk)
    scale = np.where((x > bounds.l) & (x < bounds.u), 1.0 / (bounds.u - bounds.l), 0.0)
    scale = np.asarray(scale)[..., None]
    return tuple(scale * g for g in _arg_grads(hi, hj, hk))


def hinge_loss_grad(hi, hj, hk, margin: float = DEFAULT_HINGE_MARGIN):
    hi, hj, hk = _vectors(hi, hj, hk)
    active = np.asarray(triplet_arg(hi, hj, hk) + margin > 0, dtype=np.float64)[..., None]
    return tuple(active * g for g in _arg_grads(hi, hj, hk))


def is_violated(hi, hj, hk):
    """True when the anchor is strictly closer to ``hk`` than to ``hj``; ties are satisfied."""
    out = triplet_arg(hi, hj, hk) > 0
    return bool(out) if np.ndim(out) == 0 else out


def violation_rate(embeddings, triplets) -> float:
    """Percentage of ``triplets`` (rows of indices) violated by ``embeddings``."""
    emb = np.asarray(embeddings, dtype=np.float64)
    t = np.asarray(triplets, dtype=np.int64)
    if t.size == 0:
        raise UsageError("violation_rate needs at least one triplet")
    if t.ndim != 2 or t.shape[1] != 3:
        raise UsageError(f"triplets must be an (n, 3) index array, got shape {t.shape}")
    if t.min() < 0 or t.max() >= len(emb):
        raise UsageError(f"triplet index out of range for {len(emb)} embeddings")
    violated = is_violated(emb[t[:, 0]], emb[t[:, 1]], emb[t[:, 2]])
    return 100.0 * np.count_nonzero(violated) / len(t)
