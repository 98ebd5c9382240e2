"""Loss terms for cross-domain adaptive clustering.

All losses take row-stochastic prediction tensors and return a scalar
:class:`~cdac.diffcore.Tensor`. ``reduction="sum"`` follows the written
double/single sums; ``"mean"`` divides by the number of summed terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

LOG_EPS = 1e-12
AAC_EPS = 1e-8
PROB_ATOL = 1e-6


def _t(x) -> dc.Tensor:
    return x if isinstance(x, dc.Tensor) else dc.Tensor(x)


def _reduce(x: dc.Tensor, reduction: str) -> dc.Tensor:
    if reduction == "sum":
        return dc.total(x)
    if reduction == "mean":
        return dc.mean(x)
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_probabilities(name: str, p: np.ndarray) -> None:
    if p.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix of probability rows, got shape {p.shape}")
    if np.any(p < -PROB_ATOL) or np.any(np.abs(p.sum(axis=1) - 1.0) > PROB_ATOL):
        raise ValueError(f"{name}: rows must be probability vectors")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def cross_entropy(p, labels, reduction: str = "sum") -> dc.Tensor:
    """``-sum log p[label]`` over the batch, with p clamped away from zero."""
    p = _t(p)
    target = one_hot(labels, p.shape[1])
    picked = dc.mul(dc.log(dc.clamp(p, LOG_EPS, 1.0)), dc.Tensor(target))
    return dc.scale(_reduce(dc.sum_rows(picked), reduction), -1.0)


# --------------------------------------------------------------- similarity


def topk_indices(features: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; equal values rank the lower index first."""
    order = np.argsort(-features, axis=1, kind="stable")
    return order[:, :k]


def pairwise_similarity(features, k: int = 5) -> np.ndarray:
    """Binary M x M matrix: 1 where two rows share the same (unordered) top-k index set."""
    f = features.data if isinstance(features, dc.Tensor) else np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] < k:
        raise ValueError(f"need a (M, D) feature matrix with D >= k={k}, got {f.shape}")
    keys = np.sort(topk_indices(f, k), axis=1)
    return (keys[:, None, :] == keys[None, :, :]).all(axis=2).astype(np.float64)


def aac_loss(p, p_prime, s, reduction: str = "sum") -> dc.Tensor:
    """Pairwise binary cross-entropy between originals i and augmented views j.

    The similarity score for pair (i, j) is ``p[i] . p_prime[j]`` clamped into
    [AAC_EPS, 1 - AAC_EPS]; ``s`` is a constant target.
    """
    p, p_prime = _t(p), _t(p_prime)
    _check_probabilities("aac_loss p", p.data)
    _check_probabilities("aac_loss p_prime", p_prime.data)
    s = np.asarray(s, dtype=np.float64)
    m = p.shape[0]
    if p_prime.shape != p.shape or s.shape != (m, m):
        raise dc.ShapeError("aac_loss", p.shape, p_prime.shape, s.shape)
    sim = dc.clamp(dc.row_inner(p, p_prime), AAC_EPS, 1.0 - AAC_EPS)
    same = dc.mul(dc.log(sim), dc.Tensor(s))
    diff = dc.mul(dc.log(dc.add(dc.scale(sim, -1.0), dc.Tensor(1.0))), dc.Tensor(1.0 - s))
    return dc.scale(_reduce(dc.add(same, diff), reduction), -1.0)


# ------------------------------------------------------------ pseudo labels


@dataclass
class PseudoLabelBatch:
    hard_labels: np.ndarray
    keep_mask: np.ndarray
    confidences: np.ndarray

    @property
    def retained(self) -> int:
        return int(self.keep_mask.sum())


def make_pseudo_labels(p, tau: float) -> PseudoLabelBatch:
    probs = p.data if isinstance(p, dc.Tensor) else np.asarray(p, dtype=np.float64)
    conf = probs.max(axis=1)
    return PseudoLabelBatch(probs.argmax(axis=1), conf >= tau, conf)


def pseudo_label_loss(p, p_dprime, tau: float = 0.95,
                      reduction: str = "sum") -> tuple[dc.Tensor, PseudoLabelBatch]:
    """Hard-label cross-entropy on the second view for originals with max prob >= tau.

    Pseudo labels and the mask come from ``p`` as constants; gradient flows
    only through ``p_dprime``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    p_dprime = _t(p_dprime)
    batch = make_pseudo_labels(p, tau)
    if p_dprime.shape != batch.confidences.shape + (p_dprime.shape[1],):
        raise dc.ShapeError("pseudo_label_loss", np.shape(batch.confidences), p_dprime.shape)
    target = one_hot(batch.hard_labels, p_dprime.shape[1]) * batch.keep_mask[:, None]
    picked = dc.mul(dc.log(dc.clamp(p_dprime, LOG_EPS, 1.0)), dc.Tensor(target))
    return dc.scale(_reduce(dc.sum_rows(picked), reduction), -1.0), batch


# -------------------------------------------------------------- consistency


@dataclass
class RampState:
    t: float
    T: float
    nu: float = 30.0

    def weight(self) -> float:
        return rampup_weight(self)


def rampup_weight(ramp: RampState) -> float:
    """``nu * exp(-5 (1 - t/T)^2)``, held at ``nu`` once t reaches T."""
    if ramp.t < 0 or ramp.T <= 0:
        raise ValueError("ramp-up needs t >= 0 and T > 0")
    if ramp.t >= ramp.T:
        return float(ramp.nu)
    phase = 1.0 - ramp.t / ramp.T
    return float(ramp.nu * math.exp(-5.0 * phase * phase))


def consistency_loss(p_prime, p_dprime, ramp, reduction: str = "sum") -> dc.Tensor:
    """Weighted squared distance between the predictions of two augmented views."""
    p_prime, p_dprime = _t(p_prime), _t(p_dprime)
    if p_prime.shape != p_dprime.shape:
        raise dc.ShapeError("consistency_loss", p_prime.shape, p_dprime.shape)
    w = ramp.weight() if isinstance(ramp, RampState) else float(ramp)
    dist = dc.sum_rows(dc.square(dc.add(p_prime, dc.scale(p_dprime, -1.0))))
    return dc.scale(_reduce(dist, reduction), w)


def entropy_loss(p, reduction: str = "sum") -> dc.Tensor:
    """Prediction entropy ``-sum p log p``; the adversarial term of the entropy baseline."""
    p = _t(p)
    plogp = dc.mul(p, dc.log(dc.clamp(p, LOG_EPS, 1.0)))
    return dc.scale(_reduce(dc.sum_rows(plogp), reduction), -1.0)
