"""Evaluation: fairness discrepancy against a reference histogram, and
sample-quality scores (true mixture log-density plus a squared-MMD
two-sample statistic against fresh draws from the true distribution).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hspace import _softmax
from .numkit import Adam, Mlp, RngStream, backward_layers, forward_layers, init_mlp
from .synthdata import (AttributedMixture, LabeledSample, ReferenceDistribution,
                        dataset_matrix, label_vector, log_density_batch,
                        sample_points)


class EvaluatorAccuracyError(RuntimeError):
    """The evaluation classifier failed its near-oracle accuracy gate."""


@dataclass
class EvalClassifier:
    """Clean-data attribute classifier used only for judging generations."""

    attribute: str
    net: Mlp
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvalTrainConfig:
    hidden: tuple[int, ...] = (32,)
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    holdout_fraction: float = 0.2
    min_accuracy: float = 0.99
    seed: int = 0


def classifier_softmax(clf: EvalClassifier, X: np.ndarray) -> np.ndarray:
    logits, _ = forward_layers(clf.net, np.atleast_2d(np.asarray(X, dtype=np.float64)))
    return _softmax(logits)


def train_eval_classifier(data: Sequence[LabeledSample], attribute: str,
                          config: EvalTrainConfig | None = None) -> EvalClassifier:
    """Small MLP on clean points; raises unless held-out accuracy clears the
    near-oracle gate (0.99 by default on the separable world)."""
    if config is None:
        config = EvalTrainConfig()
    X = dataset_matrix(data)
    y = label_vector(data, attribute)
    if np.unique(y).shape[0] < 2:
        raise ValueError(f"attribute {attribute!r} has a single class in the training data")
    rng = RngStream(config.seed)
    order = rng.permutation(X.shape[0])
    n_held = max(1, int(round(config.holdout_fraction * X.shape[0])))
    held, train = order[:n_held], order[n_held:]
    sizes = [X.shape[1], *config.hidden, 2]
    net = init_mlp(sizes, bottleneck_index=1, rng=rng.child("init"))
    opt = Adam(net.parameters(), lr=config.lr)
    n = train.shape[0]
    for _ in range(config.epochs):
        sub = train[rng.permutation(n)]
        for lo in range(0, n, config.batch_size):
            rows = sub[lo:lo + config.batch_size]
            logits, cache = forward_layers(net, X[rows])
            S = _softmax(logits)
            S[np.arange(len(rows)), y[rows]] -= 1.0
            S /= len(rows)
            _, wg, bg = backward_layers(net, cache, S)
            opt.step(wg + bg)
            net.bump()
    logits, _ = forward_layers(net, X[held])
    acc = float((logits.argmax(axis=1) == y[held]).mean())
    if acc < config.min_accuracy:
        raise EvaluatorAccuracyError(
            f"evaluator for {attribute!r} reached {acc:.4f} < {config.min_accuracy} held-out accuracy")
    meta = {"attribute": attribute, "holdout_accuracy": acc, "n_train": int(n), "seed": config.seed}
    return EvalClassifier(attribute, net, meta)


# ---------------------------------------------------------------------------
# Fairness discrepancy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FairnessReport:
    attribute: str
    fd: float
    fractions: np.ndarray       # mean softmax per class (soft counts)
    hard_fractions: np.ndarray  # argmax shares, reported for readability
    n: int


def fairness_discrepancy(clf: EvalClassifier, samples: np.ndarray,
                         p_ref: ReferenceDistribution | np.ndarray) -> FairnessReport:
    """Euclidean distance between the reference histogram and the mean
    evaluator softmax over the samples."""
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("fairness_discrepancy needs a nonempty sample set")
    ref = p_ref.probs if isinstance(p_ref, ReferenceDistribution) else np.asarray(p_ref, dtype=np.float64)
    S = classifier_softmax(clf, X)
    soft = S.mean(axis=0)
    hard = np.bincount(S.argmax(axis=1), minlength=S.shape[1]) / X.shape[0]
    fd = float(np.linalg.norm(ref - soft))
    return FairnessReport(clf.attribute, fd, soft, hard, X.shape[0])


def joint_softmax(clf_a: EvalClassifier, clf_b: EvalClassifier, X: np.ndarray) -> np.ndarray:
    """(n, 4) subgroup probabilities as the product of two binary evaluators,
    classes ordered (0,0),(0,1),(1,0),(1,1)."""
    Sa = classifier_softmax(clf_a, X)
    Sb = classifier_softmax(clf_b, X)
    return np.stack([Sa[:, a] * Sb[:, b] for a in (0, 1) for b in (0, 1)], axis=1)


def subgroup_report(clf_a: EvalClassifier, clf_b: EvalClassifier, samples: np.ndarray,
                    p_ref: ReferenceDistribution | np.ndarray) -> FairnessReport:
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("subgroup_report needs a nonempty sample set")
    ref = p_ref.probs if isinstance(p_ref, ReferenceDistribution) else np.asarray(p_ref, dtype=np.float64)
    S = joint_softmax(clf_a, clf_b, X)
    soft = S.mean(axis=0)
    hard = np.bincount(S.argmax(axis=1), minlength=4) / X.shape[0]
    name = f"{clf_a.attribute}+{clf_b.attribute}"
    return FairnessReport(name, float(np.linalg.norm(ref - soft)), soft, hard, X.shape[0])


# ---------------------------------------------------------------------------
# Quality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QualityScore:
    mean_log_density: float
    mmd2: float
    bandwidth: float
    n_reference: int


def median_heuristic(Y: np.ndarray, cap: int = 2000) -> float:
    """Median pairwise distance; large sets are thinned deterministically."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[0] > cap:
        stride = int(np.ceil(Y.shape[0] / cap))
        Y = Y[::stride]
    sq = (Y * Y).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T)
    pairs = d2[np.triu_indices(Y.shape[0], k=1)]
    return float(np.sqrt(max(np.median(pairs), 1e-12)))


def _kernel_sums(X: np.ndarray, Y: np.ndarray, bw: float, chunk: int = 512):
    """Sum of the Gaussian kernel over all pairs, plus the diagonal-free sum
    when the operands are the same set. Chunked so big sets stay in memory."""
    c = -0.5 / (bw * bw)
    sx = (X * X).sum(axis=1)
    sy = (Y * Y).sum(axis=1)
    total = 0.0
    for lo in range(0, X.shape[0], chunk):
        hi = min(lo + chunk, X.shape[0])
        d2 = sx[lo:hi, None] + sy[None, :] - 2.0 * (X[lo:hi] @ Y.T)
        total += float(np.exp(c * d2).sum())
    return total


def mmd2_unbiased(X: np.ndarray, Y: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel; bandwidth defaults to the
    median heuristic on Y (the reference side)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    n, m = X.shape[0], Y.shape[0]
    if n < 2 or m < 2:
        raise ValueError("mmd2 needs at least two points on each side")
    bw = median_heuristic(Y) if bandwidth is None else float(bandwidth)
    kxx = (_kernel_sums(X, X, bw) - n) / (n * (n - 1))  # subtract k(x,x)=1 diagonal
    kyy = (_kernel_sums(Y, Y, bw) - m) / (m * (m - 1))
    kxy = _kernel_sums(X, Y, bw) / (n * m)
    return kxx + kyy - 2.0 * kxy


def quality_score(mix: AttributedMixture, samples: np.ndarray, rng: RngStream,
                  n_reference: int = 10000) -> QualityScore:
    """Mean true log-density of the samples plus unbiased squared MMD against
    a fresh reference draw from the mixture."""
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("quality_score needs a nonempty sample set")
    mean_ld = float(log_density_batch(mix, X).mean())
    ref = sample_points(mix, n_reference, rng)
    bw = median_heuristic(ref)
    return QualityScore(mean_ld, mmd2_unbiased(X, ref, bw), bw, n_reference)
