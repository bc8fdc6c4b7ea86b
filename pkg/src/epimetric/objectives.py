"""Training heads over episode embeddings (plain softmax and additive angular
margin) and the post-training similarity functions they induce."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ObjectiveError(ValueError):
    pass


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ObjectiveError(f"label out of range [0, {num_classes})")
    eye = np.zeros((labels.size, num_classes))
    eye[np.arange(labels.size), labels] = 1.0
    return eye


def mean_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = Tensor(_one_hot(labels, logits.shape[-1]))
    picked = ad.tsum(ad.mul(ad.log_softmax(logits, axis=-1), onehot))
    return ad.mul(picked, Tensor(-1.0 / logits.shape[0]))


@dataclass
class SoftmaxHead:
    """g(z) = softmax(W z); embeddings compared with Euclidean distance afterwards."""

    W: Tensor  # (Y, D)
    kind: str = "sm"

    @classmethod
    def create(cls, num_authors: int, dim: int, seed: int) -> "SoftmaxHead":
        if num_authors < 2:
            raise ObjectiveError("need at least 2 training authors")
        rng = np.random.default_rng(seed)
        bound = math.sqrt(6.0 / (num_authors + dim))
        return cls(W=Tensor(rng.uniform(-bound, bound, size=(num_authors, dim)), requires_grad=True))

    @property
    def num_authors(self) -> int:
        return self.W.shape[0]

    @property
    def metric(self) -> str:
        return "euclidean"

    def logits(self, z: Tensor) -> Tensor:
        return ad.matmul(z, ad.transpose(self.W, (1, 0)))

    def loss(self, z: Tensor, labels: np.ndarray) -> Tensor:
        return mean_cross_entropy(self.logits(z), labels)

    def predictions(self, z: np.ndarray) -> np.ndarray:
        return (z @ self.W.data.T).argmax(axis=-1)


@dataclass
class AngularMarginHead:
    """Rows of W are class centers; the true-class angle is widened by a fixed
    margin before a scaled softmax. Embeddings are compared with cosine
    similarity afterwards."""

    W: Tensor  # (Y, D)
    margin: float = 0.5
    scale: float = 64.0
    kind: str = "am"

    @classmethod
    def create(cls, num_authors: int, dim: int, seed: int,
               margin: float = 0.5, scale: float = 64.0) -> "AngularMarginHead":
        if num_authors < 2:
            raise ObjectiveError("need at least 2 training authors")
        if margin <= 0 or scale <= 0:
            raise ObjectiveError("margin and scale must be positive")
        rng = np.random.default_rng(seed)
        bound = math.sqrt(6.0 / (num_authors + dim))
        return cls(W=Tensor(rng.uniform(-bound, bound, size=(num_authors, dim)), requires_grad=True),
                   margin=margin, scale=scale)

    @property
    def num_authors(self) -> int:
        return self.W.shape[0]

    @property
    def metric(self) -> str:
        return "cosine"

    def cosines(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """(w, w_margin): cosines against every class center, and each entry as
        it would read with the margin added to its angle (cos(theta + m),
        computed as cos t cos m - sin t sin m with sin t = sqrt(1 - cos^2 t),
        which discards the sign of the angle)."""
        norms = ad.sqrt(ad.tsum(ad.mul(z, z), axis=-1, keepdims=True))
        if np.any(norms.data == 0.0):
            raise ObjectiveError("cannot normalize a zero embedding")
        z_unit = ad.div(z, norms)
        w_norms = ad.sqrt(ad.tsum(ad.mul(self.W, self.W), axis=-1, keepdims=True))
        if np.any(w_norms.data == 0.0):
            raise ObjectiveError("class center with zero norm")
        centers = ad.div(self.W, w_norms)
        w = ad.clamp(ad.matmul(z_unit, ad.transpose(centers, (1, 0))), -1.0, 1.0)
        sin_theta = ad.sqrt(ad.sub(Tensor(1.0), ad.mul(w, w)))
        w_margin = ad.sub(ad.mul(w, Tensor(math.cos(self.margin))),
                          ad.mul(sin_theta, Tensor(math.sin(self.margin))))
        return w, w_margin

    def logits(self, z: Tensor, labels: np.ndarray) -> Tensor:
        w, w_margin = self.cosines(z)
        onehot = Tensor(_one_hot(labels, self.num_authors))
        with_margin = ad.add(w, ad.mul(onehot, ad.sub(w_margin, w)))
        return ad.mul(with_margin, Tensor(self.scale))

    def loss(self, z: Tensor, labels: np.ndarray) -> Tensor:
        return mean_cross_entropy(self.logits(z, labels), labels)

    def predictions(self, z: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
        centers = self.W.data / np.linalg.norm(self.W.data, axis=-1, keepdims=True)
        return ((z / norms) @ centers.T).argmax(axis=-1)


ObjectiveHead = SoftmaxHead | AngularMarginHead


def make_head(kind: str, num_authors: int, dim: int, seed: int,
              margin: float = 0.5, scale: float = 64.0) -> ObjectiveHead:
    if kind == "sm":
        return SoftmaxHead.create(num_authors, dim, seed)
    if kind == "am":
        return AngularMarginHead.create(num_authors, dim, seed, margin, scale)
    raise ObjectiveError(f"unknown head kind {kind!r} (expected 'sm' or 'am')")


def sm_loss(head: SoftmaxHead, z: Tensor, labels) -> Tensor:
    return head.loss(z, np.asarray(labels))


def am_logits(head: AngularMarginHead, z: Tensor) -> tuple[Tensor, Tensor]:
    return head.cosines(z)


def am_loss(head: AngularMarginHead, z: Tensor, labels) -> Tensor:
    return head.loss(z, np.asarray(labels))


# ---------------------------------------------------------------------------
# similarity scores (higher = more similar for both metrics)
# ---------------------------------------------------------------------------

def similarity(a: np.ndarray, b: np.ndarray, metric: str) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ObjectiveError(f"dimension mismatch {a.shape} vs {b.shape}")
    if metric == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ObjectiveError("cosine similarity undefined for a zero vector")
        return float(a @ b / (na * nb))
    if metric == "euclidean":
        return float(-np.linalg.norm(a - b))
    raise ObjectiveError(f"unknown metric {metric!r}")


def similarity_matrix(queries: np.ndarray, targets: np.ndarray, metric: str) -> np.ndarray:
    """(n, D) x (m, D) -> (n, m) scores, same convention as ``similarity``."""
    queries = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if queries.ndim != 2 or targets.ndim != 2 or queries.shape[1] != targets.shape[1]:
        raise ObjectiveError(f"bad embedding shapes {queries.shape} vs {targets.shape}")
    if metric == "cosine":
        qn = np.linalg.norm(queries, axis=1, keepdims=True)
        tn = np.linalg.norm(targets, axis=1, keepdims=True)
        if np.any(qn == 0.0) or np.any(tn == 0.0):
            raise ObjectiveError("cosine similarity undefined for a zero vector")
        return (queries / qn) @ (targets / tn).T
    if metric == "euclidean":
        sq = (queries**2).sum(axis=1)[:, None] + (targets**2).sum(axis=1)[None, :]
        d2 = np.maximum(sq - 2.0 * queries @ targets.T, 0.0)
        return -np.sqrt(d2)
    raise ObjectiveError(f"unknown metric {metric!r}")
