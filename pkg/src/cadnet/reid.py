"""Cross-modal re-ID branch: HR encoder F over recovered images, classifier C, losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .crgan import EPS, Crgan, Encoder
from .nn import Linear, Module
from .tensor import Tensor

MODES = ("joint", "f", "g")


class ReidNet(Module):
    """HR encoder ``F`` (same family as ``E``, separate weights) and classifier ``C``.

    ``mode`` selects the classifier input: ``joint`` uses ``[f, g]`` (width 2d),
    ``f``/``g`` use a single branch (width d).
    """

    def __init__(self, channels, num_identities: int, rng: np.random.Generator, mode: str = "joint"):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.hr_encoder = self.add_module("F", Encoder(channels, rng))
        d = channels[-1]
        self.embed_dim = 2 * d if mode == "joint" else d
        self.classifier = self.add_module("C", Linear(self.embed_dim, num_identities, rng))

    def classify(self, v: Tensor) -> tuple[Tensor, Tensor]:
        """GAP + fully connected + softmax; returns ``(u, probs)``."""
        u = T.global_avg_pool(v)
        return u, T.softmax(self.classifier(u), axis=-1)


@dataclass
class JointOutput:
    f: Tensor
    skips: list[Tensor]
    recovered: Tensor
    g: Tensor | None
    v: Tensor
    u: Tensor
    probs: Tensor


def joint_forward(x: Tensor, crgan: Crgan, reid: ReidNet) -> JointOutput:
    """``f = E(x)``, ``g = F(G(f))``, ``v = [f, g]``, ``u = GAP(v)``, class probabilities."""
    f, skips = crgan.encode(x)
    recovered = crgan.decode(f, skips)
    g = None
    if reid.mode != "f":
        g = reid.hr_encoder(recovered)[-1]
    if reid.mode == "joint":
        v = T.concat([f, g], axis=-1)
    elif reid.mode == "f":
        v = f
    else:
        v = g
    u, probs = reid.classify(v)
    return JointOutput(f, skips, recovered, g, v, u, probs)


def loss_id(probs: Tensor, labels) -> Tensor:
    """Softmax cross-entropy from class probabilities, averaged over the batch."""
    labels = np.asarray(labels)
    n_cls = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"label out of range [0, {n_cls}): {labels.min()}..{labels.max()}")
    p = T.pick(probs, labels)
    return T.mul(T.mean(T.log(T.clamp(p, EPS, 1.0))), -1.0)


def pairwise_distances(u: np.ndarray) -> np.ndarray:
    diff = u[:, None, :].astype(np.float64) - u[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def hardest_pairs(u: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the farthest positive and nearest negative for every anchor."""
    labels = np.asarray(labels)
    dist = pairwise_distances(u)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(len(labels), dtype=bool)
    neg_mask = ~same
    bad = ~pos_mask.any(1) | ~neg_mask.any(1)
    if bad.any():
        raise ValueError(f"anchor {int(np.flatnonzero(bad)[0])} has no positive or no negative in the batch")
    pos = np.where(pos_mask, dist, -np.inf).argmax(1)
    neg = np.where(neg_mask, dist, np.inf).argmin(1)
    return pos, neg


def _dist(a: Tensor, b: Tensor) -> Tensor:
    diff = T.sub(a, b)
    return T.sqrt(T.add(T.sum(T.mul(diff, diff), axis=1), 1e-12))


def batch_hard_triplet(u: Tensor, labels, margin: float) -> Tensor:
    """Mean over anchors of ``max(0, margin + d(a, hardest pos) - d(a, hardest neg))``."""
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    pos, neg = hardest_pairs(u.data, labels)
    d_pos = _dist(u, T.take(u, pos))
    d_neg = _dist(u, T.take(u, neg))
    return T.mean(T.max_with_scalar(T.add(T.sub(d_pos, d_neg), margin), 0.0))


def loss_triplet(u_h: Tensor, labels_h, u_l: Tensor, labels_l, margin: float = 2.0) -> Tensor:
    """Batch-hard triplet loss mined separately within the HR and LR streams, summed."""
    return T.add(batch_hard_triplet(u_h, labels_h, margin), batch_hard_triplet(u_l, labels_l, margin))


def loss_cls(l_id: Tensor, l_tri: Tensor) -> Tensor:
    return T.add(l_id, l_tri)
