"""Training losses: norm alignment, adversarial, entropy, and consensus terms.

Every loss is a differentiable scalar over batches of features or logits,
built from the autodiff primitives so a single backward sweep covers the
whole objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_FLOOR, Tensor

logger = logging.getLogger(__name__)


class ContractError(ValueError):
    """Loss inputs violate a documented precondition."""


@dataclass
class ModalityBatch:
    """Features of one modality for one mini-batch of samples."""

    modality: str
    features: Tensor  # [N, d]
    domain: str = "source"

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]


@dataclass
class LossWeights:
    """Scalar hyperparameters of the combined objective.

    Defaults follow the reference training setup: the norm-alignment weight
    at 1, hard norm alignment at 0.0006 with radius 40, consensus at 0.01,
    attentive entropy at 0.003, and per-level adversarial weights
    (0.75, 0.75, 0.5) for the frame, relation, and video discriminators.
    """

    lambda_rna: float = 1.0
    lambda_thna: float = 0.0006
    radius: float = 40.0
    lambda_mec: float = 0.01
    gamma_attentive: float = 0.003
    beta_levels: tuple[float, float, float] = (0.75, 0.75, 0.5)

    def __post_init__(self):
        self.beta_levels = tuple(float(b) for b in self.beta_levels)
        if len(self.beta_levels) != 3:
            raise ContractError(f"beta_levels must have 3 entries, got {len(self.beta_levels)}")
        for name in ("lambda_rna", "lambda_thna", "lambda_mec", "gamma_attentive"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if any(b < 0 for b in self.beta_levels):
            raise ContractError("beta_levels must be >= 0")
        if self.radius <= 0:
            raise ContractError(f"radius must be > 0, got {self.radius}")

    def to_dict(self) -> dict:
        return {
            "lambda_rna": self.lambda_rna,
            "lambda_thna": self.lambda_thna,
            "radius": self.radius,
            "lambda_mec": self.lambda_mec,
            "gamma_attentive": self.gamma_attentive,
            "beta_levels": list(self.beta_levels),
        }


def _mean_norm(features: Tensor) -> Tensor:
    return ad.mean(ad.l2_norm_rows(features))


def rna_loss(batches: Sequence[ModalityBatch]) -> Tensor:
    """Squared deviation from 1 of the ratio of mean feature norms.

    For two modalities this is ``(E[h(X^0)] / E[h(X^1)] - 1)^2`` where
    ``E[h(X^m)]`` is the batch mean of row L2 norms and batch order fixes
    which modality sits in the numerator. With more than two modalities the
    same term is averaged over all ordered pairs, which keeps the loss
    symmetric in modality roles.
    """
    if len(batches) < 2:
        raise ContractError(f"rna_loss needs at least 2 modalities, got {len(batches)}")
    sizes = {b.num_samples for b in batches}
    if len(sizes) != 1:
        raise ContractError(f"rna_loss: modality batches disagree on N: {sorted(sizes)}")

    means = [_mean_norm(b.features) for b in batches]
    if len(means) == 2:
        return (means[0] / means[1] - 1.0) ** 2.0

    terms = []
    for i in range(len(means)):
        for j in range(len(means)):
            if i != j:
                terms.append((means[i] / means[j] - 1.0) ** 2.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def rna_uda_loss(source: Sequence[ModalityBatch], target: Sequence[ModalityBatch]) -> Tensor:
    """Source-term plus target-term norm alignment.

    With no target batches (degenerate source-only call) the source term is
    returned alone, with a warning.
    """
    src = rna_loss(source)
    if not target:
        logger.warning("rna_uda_loss called with no target batches; using the source term only")
        return src
    return src + rna_loss(target)


def thna_loss(stream_scale_features: Sequence[Sequence[Tensor]], radius: float) -> Tensor:
    """Pull every stream's per-scale mean feature norm toward a shared radius.

    ``stream_scale_features[b][t]`` holds the [N, d_t] relation features of
    scale t in stream b; the loss sums ``(E[h_t(X^b)] - R)^2`` over all
    (stream, scale) entries.
    """
    entries = [feats for per_stream in stream_scale_features for feats in per_stream]
    if not entries:
        raise ContractError("thna_loss needs at least one (stream, scale) feature tensor")
    acc = None
    for feats in entries:
        term = (_mean_norm(feats) - float(radius)) ** 2.0
        acc = term if acc is None else acc + term
    return acc


def mec_loss(stream_logits: Sequence[Tensor]) -> Tensor:
    """Consensus loss: per sample, the best class under summed stream log-probs.

    Log-probabilities are floored at log(1e-12) so confident disagreement
    between streams cannot diverge. Per sample, gradients flow only through
    the arg-max class of the summed log-probabilities; ties resolve to the
    lowest class index.
    """
    if not stream_logits:
        raise ContractError("mec_loss needs at least one stream")
    shapes = {t.shape for t in stream_logits}
    if len(shapes) != 1:
        raise ContractError(f"mec_loss: streams disagree on logit shape: {sorted(shapes)}")
    m, c = stream_logits[0].shape
    if c < 2:
        raise ContractError(f"mec_loss needs at least 2 classes, got {c}")

    b = len(stream_logits)
    summed = None
    for logits in stream_logits:
        lp = ad.clamp_min(ad.log_softmax(logits), LOG_FLOOR)
        summed = lp if summed is None else summed + lp
    best = np.argmax(summed.data, axis=1)  # first max wins ties
    picked = ad.take_per_row(summed, best)
    return ad.mean(picked) * (-1.0 / b)


def classification_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax at the true class."""
    labels = np.asarray(labels, dtype=np.intp)
    if len(logits.shape) != 2:
        raise ContractError(f"classification_loss expects [N, C] logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"classification_loss: {n} rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"classification_loss: labels outside [0, {c})")
    picked = ad.take_per_row(ad.log_softmax(logits), labels)
    return -ad.mean(picked)


def domain_adversarial_loss(domain_logits: Tensor, domain_labels: Sequence[int]) -> Tensor:
    """Cross-entropy of the domain discriminator.

    The caller routes the features through ``grad_reverse`` before the
    discriminator so minimizing this loss pushes the feature extractor
    toward domain confusion.
    """
    return classification_loss(domain_logits, domain_labels)


def entropy_rows(class_logits: Tensor) -> Tensor:
    """Differentiable per-sample Shannon entropy of the class softmax, [N]."""
    p = ad.softmax(class_logits)
    lp = ad.clamp_min(ad.log_softmax(class_logits), LOG_FLOOR)
    return -ad.sum_rows(p * lp)


def normalized_entropy(logits_data: np.ndarray) -> np.ndarray:
    """Per-row softmax entropy normalized to [0, 1] by log(n_classes). Plain numpy."""
    logits_data = np.asarray(logits_data, dtype=np.float64)
    d = logits_data.shape[1]
    if d <= 1:
        return np.zeros(logits_data.shape[0])
    shifted = logits_data - logits_data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    lp = np.maximum(shifted - np.log(e.sum(axis=1, keepdims=True)), LOG_FLOOR)
    return -(p * lp).sum(axis=1) / np.log(d)


def attentive_entropy_loss(class_logits: Tensor, domain_logits: Tensor) -> Tensor:
    """Class-entropy minimization weighted by domain-discriminator uncertainty.

    Per sample: ``(1 + H_hat(d_i)) * H(y_i)`` where ``H_hat`` is the domain
    softmax entropy normalized to [0, 1]. The weight is a constant (no
    gradient flows through the domain entropy), so the term only sharpens
    class predictions, preferentially where the domain is ambiguous.
    """
    n = class_logits.shape[0]
    if domain_logits.shape[0] != n:
        raise ContractError(
            f"attentive_entropy_loss: {n} class rows but {domain_logits.shape[0]} domain rows"
        )
    weights = Tensor(1.0 + normalized_entropy(domain_logits.data))
    return ad.mean(entropy_rows(class_logits) * weights)


@dataclass
class LossParts:
    """Per-term scalars of one mini-batch, prior to weighting.

    Missing terms contribute nothing; ``adversarial`` carries one entry per
    discriminator level (frame, relation, video).
    """

    cls: Tensor | None = None
    rna: Tensor | None = None
    adversarial: tuple[Tensor | None, Tensor | None, Tensor | None] = (None, None, None)
    attentive: Tensor | None = None
    thna: Tensor | None = None
    mec: Tensor | None = None


def total_uda_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """Weighted sum of all configured loss terms."""
    acc: Tensor | None = None

    def push(term: Tensor | None, w: float):
        nonlocal acc
        if term is None or w == 0.0:
            return
        weighted = term * float(w)
        acc = weighted if acc is None else acc + weighted

    push(parts.cls, 1.0)
    push(parts.rna, weights.lambda_rna)
    for level_term, beta in zip(parts.adversarial, weights.beta_levels):
        push(level_term, beta)
    push(parts.attentive, weights.gamma_attentive)
    push(parts.thna, weights.lambda_thna)
    push(parts.mec, weights.lambda_mec)
    if acc is None:
        return Tensor(0.0)
    return acc
