"""Bidirectional image/radiomics contrastive losses and the fine-tuning loss.

The contrastive objective scores every image embedding against every
radiomics embedding in the mini-batch and applies a temperature-scaled
softmax cross-entropy in each direction.  All softmax terms go through
:func:`radiocon.autodiff.log_softmax` (log-sum-exp); with temperatures as
small as 0.1 the naive exp-ratio form overflows 32-bit evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParameterError

SIMILARITY_KERNELS = ("neg_distance", "raw_distance", "dot_product")

#: Probability clamp for the fine-tuning cross-entropy.
PROB_EPS = 1e-7


@dataclass(frozen=True)
class ContrastiveConfig:
    """Hyperparameters of the contrastive objective.

    ``lam`` weights the image-to-radiomics direction; ``1 - lam`` weights
    the reverse direction.  The default ``neg_distance`` kernel turns the
    pairwise distance into a similarity so that the softmax *maximises*
    agreement of true pairs; ``raw_distance`` keeps the literal distance
    score and ``dot_product`` uses the inner product.
    """

    tau: float = 0.1
    p: float = 2.0
    lam: float = 0.5
    similarity_kernel: str = "neg_distance"

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.p >= 1.0:
            raise ParameterError(f"p must be >= 1, got {self.p}")
        if self.similarity_kernel not in SIMILARITY_KERNELS:
            raise ParameterError(
                f"unknown similarity kernel {self.similarity_kernel!r}; "
                f"expected one of {SIMILARITY_KERNELS}")


@dataclass
class BatchEmbeddings:
    """Aligned mini-batch embeddings: row i of u pairs with row i of v."""

    u: Tensor
    v: Tensor

    def __post_init__(self):
        if self.u.values.ndim != 2 or self.u.shape != self.v.shape:
            raise ContractError(
                f"batch embeddings must be equal-shape matrices, got "
                f"{self.u.shape} and {self.v.shape}")
        if self.u.shape[0] < 1:
            raise ContractError("batch must contain at least one pair")
        if not (np.all(np.isfinite(self.u.values)) and np.all(np.isfinite(self.v.values))):
            raise ContractError("batch embeddings contain non-finite values")

    @property
    def n(self) -> int:
        return self.u.shape[0]


def score(u: Tensor, v: Tensor, config: ContrastiveConfig) -> Tensor:
    """Scalar pair score under the configured kernel."""
    kernel = config.similarity_kernel
    if kernel == "dot_product":
        return ad.reduce_sum(ad.mul(u, v))
    d = ad.p_norm_distance(u, v, config.p)
    return ad.scale(d, -1.0) if kernel == "neg_distance" else d


def _score_matrix(a: Tensor, b: Tensor, config: ContrastiveConfig) -> Tensor:
    """(n, n) matrix of s(a_i, b_k) already divided by the temperature."""
    kernel = config.similarity_kernel
    if kernel == "dot_product":
        s = ad.matmul(a, ad.transpose(b))
        return ad.scale(s, 1.0 / config.tau)
    d = ad.pairwise_p_distance(a, b, config.p)
    sign = -1.0 if kernel == "neg_distance" else 1.0
    return ad.scale(d, sign / config.tau)


def image_to_radiomics_loss(batch: BatchEmbeddings, config: ContrastiveConfig) -> Tensor:
    """Per-sample losses with each image scored against all radiomics rows."""
    s = _score_matrix(batch.u, batch.v, config)
    return ad.scale(ad.diag(ad.log_softmax(s)), -1.0)


def radiomics_to_image_loss(batch: BatchEmbeddings, config: ContrastiveConfig) -> Tensor:
    """Mirror direction: each radiomics row scored against all image rows."""
    s = _score_matrix(batch.v, batch.u, config)
    return ad.scale(ad.diag(ad.log_softmax(s)), -1.0)


def combined_loss(batch: BatchEmbeddings, config: ContrastiveConfig) -> Tensor:
    """Weighted two-direction loss averaged over the mini-batch."""
    l_uv = image_to_radiomics_loss(batch, config)
    l_vu = radiomics_to_image_loss(batch, config)
    per_sample = ad.add(ad.scale(l_uv, config.lam), ad.scale(l_vu, 1.0 - config.lam))
    return ad.reduce_mean(per_sample)


def finetune_loss(y_pred: Tensor, y_true: np.ndarray) -> Tensor:
    """Binary cross-entropy of predicted probabilities against 0/1 labels.

    Predictions are clamped to ``[PROB_EPS, 1 - PROB_EPS]`` so saturated
    sigmoids never reach log(0).
    """
    labels = np.asarray(y_true)
    if labels.shape != y_pred.shape:
        raise ContractError(
            f"labels shape {labels.shape} != predictions shape {y_pred.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be 0 or 1")
    t = Tensor(labels.astype(y_pred.dtype), requires_grad=False)
    yc = ad.clamp(y_pred, PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.mul(t, ad.log(yc))
    neg = ad.mul(ad.sub(1.0, t), ad.log(ad.sub(1.0, yc)))
    return ad.scale(ad.reduce_mean(ad.add(pos, neg)), -1.0)
