"""Adversarial bias mitigation: classifier heads over the key and query
embeddings, their cross-entropy and entropy-confusion losses, and the
combined training objective.

The two heads model the posterior of the bias label given each embedding.
During training the heads themselves are fit with plain cross-entropy on
detached embeddings, while the feature networks receive (a) the
entropy-confusion gradient, which pushes the heads' posteriors toward
uniform, and (b) the reversed (negated) cross-entropy gradient scaled by
lambda * mu. Both signals drive the embeddings toward carrying no
information about the bias label; the gradient routing itself lives in the
trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import ShapeError
from .numkit import MlpParams, mlp_forward, softmax_rows

PROB_EPS = 1e-7  # probabilities are clamped to [eps, 1-eps] before any log


@dataclass
class LossWeights:
    """Scalar weights of the combined objective.

    gamma scales the reconstruction term, delta mixes the elastic net,
    lam weights the bias-mitigation terms, and mu scales the cross-entropy
    relaxation inside them.
    """

    gamma: float = 200.0
    delta: float = 0.9
    lam: float = 0.0
    mu: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lam and mu must be non-negative")


@dataclass
class BiasHeads:
    """The two bias classifiers: g over key embeddings, g_prime over query
    embeddings. Each ends in an n_bias_classes-wide linear layer whose
    output is read through a softmax."""

    g: MlpParams
    g_prime: MlpParams
    n_bias_classes: int = 2


def init_bias_heads(embed_dim: int, hidden=(64, 32, 16), n_bias_classes: int = 2,
                    batchnorm: bool = True,
                    rng: np.random.Generator | None = None) -> BiasHeads:
    """Heads are MLPs with ReLU between the dense layers and a bare linear
    classification layer on top; batchnorm=True (the default) normalizes
    between the dense layers.

    batchnorm=False keeps the head's confidence proportional to the actual
    bias amplitude left in the embeddings, which keeps the adversarial
    gradients alive late in training; with normalization the head can stay
    saturated on an arbitrarily faint residual signal.
    """
    if n_bias_classes < 2:
        raise ValueError("need at least two bias classes")
    if rng is None:
        rng = numkit.make_rng(0, "bias-heads")
    dims = [embed_dim, *hidden, n_bias_classes]
    acts = ["relu"] * len(hidden) + ["none"]
    bn = [batchnorm] * len(hidden) + [False]
    g = numkit.init_mlp(dims, acts, batchnorm=bn, rng=rng)
    g_prime = numkit.init_mlp(dims, acts, batchnorm=bn, rng=rng)
    return BiasHeads(g=g, g_prime=g_prime, n_bias_classes=n_bias_classes)


def bias_posterior(head: MlpParams, emb: np.ndarray, mode: str = "train"):
    """Class probabilities of the bias label given embeddings.

    Returns (probs, cache): probs rows are softmax outputs (non-negative,
    summing to 1); the loss functions clamp to [PROB_EPS, 1-PROB_EPS]
    before taking logs. The cache backs the head's backward pass.
    """
    emb = np.asarray(emb, dtype=float)
    logits, cache = mlp_forward(head, emb, mode)
    probs = softmax_rows(logits)
    return probs, cache


def _check_labels(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch {probs.shape[0]}")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(
            f"bias label out of range [0, {probs.shape[1]}): "
            f"[{labels.min()}, {labels.max()}]")
    return labels.astype(int)


def cross_entropy_loss(probs: np.ndarray, labels) -> float:
    """Mean negative log probability of the true bias class."""
    probs = np.asarray(probs, dtype=float)
    labels = _check_labels(probs, labels)
    p_true = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.clip(p_true, PROB_EPS, 1.0 - PROB_EPS)).mean())


def entropy_confusion_loss(probs: np.ndarray) -> float:
    """Mean of sum_b Q(b|.) log Q(b|.); equals minus the posterior entropy.

    Lies in [-log K, 0]; the minimum -log K is attained exactly at uniform
    posteriors, so minimizing it w.r.t. the upstream features pushes the
    head toward knowing nothing about the bias.
    """
    probs = np.asarray(probs, dtype=float)
    logp = np.log(np.clip(probs, PROB_EPS, 1.0 - PROB_EPS))
    return float((probs * logp).sum(axis=1).mean())


def cross_entropy_grad_logits(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of cross_entropy_loss w.r.t. the head's logits: (P - Y)/n."""
    probs = np.asarray(probs, dtype=float)
    labels = _check_labels(probs, labels)
    g = probs.copy()
    g[np.arange(probs.shape[0]), labels] -= 1.0
    return g / probs.shape[0]


def entropy_confusion_grad_logits(probs: np.ndarray) -> np.ndarray:
    """Gradient of entropy_confusion_loss w.r.t. the logits.

    For each row: p_m * (log p_m + H(p)) / n, with H the row entropy. Zero
    exactly at uniform rows, which is the loss's minimum.
    """
    probs = np.asarray(probs, dtype=float)
    logp = np.log(np.clip(probs, PROB_EPS, 1.0 - PROB_EPS))
    h = -(probs * logp).sum(axis=1, keepdims=True)
    return probs * (logp + h) / probs.shape[0]


def head_accuracy(probs: np.ndarray, labels) -> float:
    """Fraction of samples whose argmax posterior matches the bias label."""
    probs = np.asarray(probs, dtype=float)
    labels = _check_labels(probs, labels)
    return float((probs.argmax(axis=1) == labels).mean())


@dataclass
class CombinedLosses:
    """Every scalar term of one forward pass, plus the logging total.

    total_report = l_se + lam*(l_conf_key + l_conf_query)
                        + mu*(l_ce_key + l_ce_query)
    and is used for reporting and the divergence guard only; gradient
    routing (which term reaches which parameters, and with which sign) is
    the trainer's job.
    """

    l_se: float
    l_ce_key: float
    l_ce_query: float
    l_conf_key: float
    l_conf_query: float
    total_report: float
    acc_key: float = field(default=float("nan"))
    acc_query: float = field(default=float("nan"))


def combined_losses(model, heads: BiasHeads, batch: np.ndarray, bias_labels,
                    weights: LossWeights, mode: str = "train") -> CombinedLosses:
    """Evaluate all loss terms on one batch (no gradients).

    With lam = mu = 0 the total reduces exactly to the self-expression
    loss. Mutates batchnorm running statistics when mode="train", like any
    other forward pass.
    """
    from .sennet import se_loss  # local import to avoid a module cycle

    bias_labels = np.asarray(bias_labels)
    if bias_labels.shape[0] != np.asarray(batch).shape[0]:
        raise ShapeError("batch and bias labels are misaligned")
    se = se_loss(model, batch, weights.gamma, weights.delta, mode=mode)
    p_key, _ = bias_posterior(heads.g, se.key_out, mode)
    p_query, _ = bias_posterior(heads.g_prime, se.query_out, mode)
    l_ce_key = cross_entropy_loss(p_key, bias_labels)
    l_ce_query = cross_entropy_loss(p_query, bias_labels)
    l_conf_key = entropy_confusion_loss(p_key)
    l_conf_query = entropy_confusion_loss(p_query)
    total = (se.loss + weights.lam * (l_conf_key + l_conf_query)
             + weights.mu * (l_ce_key + l_ce_query))
    return CombinedLosses(
        l_se=se.loss, l_ce_key=l_ce_key, l_ce_query=l_ce_query,
        l_conf_key=l_conf_key, l_conf_query=l_conf_query, total_report=total,
        acc_key=head_accuracy(p_key, bias_labels),
        acc_query=head_accuracy(p_query, bias_labels))


def head_parameter_arrays(heads: BiasHeads) -> list[np.ndarray]:
    """Arrays updated by the bias optimizer, both heads, fixed order."""
    return numkit.mlp_param_arrays(heads.g) + numkit.mlp_param_arrays(heads.g_prime)
