"""Patch-wise cross-modality contrastive machinery.

Similarity maps between student and frozen-teacher patch features,
binary pseudo-labels derived from the teacher's attention map, the main
BCE alignment losses, and the ablation/variant losses.  Pseudo-label
construction is deliberately non-differentiable; teacher features must
be detached by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, ShapeMismatchError

DEFAULT_TAU = 0.04
DEFAULT_GAMMA = 0.6

ROW_SUM_TOL = 1e-6


@dataclass
class SimilarityMatrix:
    values: Tensor  # (N, N), entries cosine / tau
    tau: float
    kind: str  # "cross_modal" or "intra_visible"


@dataclass
class PseudoLabelMatrix:
    values: np.ndarray  # binary (N, N)
    gamma: float
    per_row_m: np.ndarray  # minimal prefix length per row


def similarity(f_a: Tensor, f_b: Tensor, tau: float,
               kind: str = "cross_modal") -> SimilarityMatrix:
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return SimilarityMatrix(values=ad.cosine_rows(f_a, f_b) * (1.0 / tau),
                            tau=tau, kind=kind)


def pseudo_labels(attention: np.ndarray | Tensor, gamma: float) -> PseudoLabelMatrix:
    """Binary labels per row: diagonal plus the minimal descending-attention
    prefix whose mass strictly exceeds gamma.

    Sorting is stable, lower original index first on ties.
    """
    a = attention.data if isinstance(attention, Tensor) else np.asarray(attention)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"attention must be square, got {a.shape}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0,1), got {gamma}")
    if np.any(a < 0.0) or np.any(np.abs(a.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        bad = int(np.argmax(np.abs(a.sum(axis=1) - 1.0)))
        raise DegenerateInputError(
            f"attention rows must be stochastic; row {bad} sums to {a[bad].sum():.9f}"
        )
    n = a.shape[0]
    labels = np.zeros((n, n))
    per_row_m = np.zeros(n, dtype=np.int64)
    # stable descending sort = stable ascending sort of negated values
    order = np.argsort(-a, axis=1, kind="stable")
    for i in range(n):
        csum = np.cumsum(a[i, order[i]])
        m = int(np.searchsorted(csum > gamma, True)) + 1
        m = min(m, n)
        per_row_m[i] = m
        labels[i, order[i, :m]] = 1.0
        labels[i, i] = 1.0
    return PseudoLabelMatrix(values=labels, gamma=gamma, per_row_m=per_row_m)


def _check_match(s: SimilarityMatrix, p: PseudoLabelMatrix) -> None:
    if s.values.shape != p.values.shape:
        raise ShapeMismatchError(
            f"similarity {s.values.shape} vs labels {p.values.shape}"
        )


def loss_iv(s: SimilarityMatrix, p: PseudoLabelMatrix) -> Tensor:
    """Cross-modal alignment: BCE of the similarity logits against pseudo-labels."""
    _check_match(s, p)
    return ad.bce_with_logits(s.values, Tensor(p.values))


def loss_vv(s: SimilarityMatrix, p: PseudoLabelMatrix) -> Tensor:
    """Visible-knowledge distillation; identical contract to loss_iv."""
    _check_match(s, p)
    return ad.bce_with_logits(s.values, Tensor(p.values))


def loss_pccl(l_iv: Tensor, l_vv: Tensor, alpha: float = 1.0,
              beta: float = 1.0) -> Tensor:
    if alpha < 0.0 or beta < 0.0:
        raise ValueError(f"loss coefficients must be nonnegative, got {alpha}, {beta}")
    return l_iv * alpha + l_vv * beta


def loss_mse(f_i: Tensor, f_v: Tensor, f_vf: Tensor) -> Tensor:
    """Mean squared distance of both student branches to the teacher features."""
    if f_i.shape != f_vf.shape or f_v.shape != f_vf.shape:
        raise ShapeMismatchError(
            f"feature shapes differ: {f_i.shape}, {f_v.shape}, {f_vf.shape}"
        )
    di = f_i - f_vf
    dv = f_v - f_vf
    return ad.tmean(ad.mul(di, di)) + ad.tmean(ad.mul(dv, dv))


def loss_nce(s_iv: SimilarityMatrix, s_vv: SimilarityMatrix) -> Tensor:
    """Softmax cross-entropy with diagonal targets, summed over both matrices."""
    return ad.diag_cross_entropy(s_iv.values) + ad.diag_cross_entropy(s_vv.values)


def loss_variant_softmax(s: SimilarityMatrix, p: PseudoLabelMatrix) -> Tensor:
    """Per row, -log of the softmax mass on label-positive positions."""
    _check_match(s, p)
    return ad.masked_softmax_nll(s.values, p.values)
