"""h-space attribute machinery: the labeled bottleneck dataset built by DDIM
inversion, one linear classifier head per diffusion step, and the attribute
distribution predictor (batch-averaged softmax) with its analytic gradient.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diffcore import NoiseSchedule, ddim_invert_batch
from .numkit import Adam, DimensionError, Mlp, RngStream
from .synthdata import (LabeledSample, ReferenceDistribution, dataset_matrix,
                        label_vector)

BANK_TAG = "fairdiff-hbank/v1"
CHI2_EPS = 1e-12


class SingleClassError(ValueError):
    """Classifier training needs both classes present."""


@dataclass
class HDataset:
    """Bottleneck activations of inverted samples, labels attached.

    Columnar: row i holds (step[i], h[i], sample_id[i]); labels maps each
    attribute name to a row-aligned 0/1 vector. Every sample id contributes
    exactly T rows, one per step.
    """

    steps: np.ndarray            # (M,)
    h: np.ndarray                # (M, h_width)
    labels: dict[str, np.ndarray]
    sample_ids: np.ndarray       # (M,)

    @property
    def T(self) -> int:
        return int(self.steps.max()) + 1

    @property
    def n_samples(self) -> int:
        return int(self.sample_ids.max()) + 1

    def rows_at(self, t: int) -> np.ndarray:
        return np.nonzero(self.steps == t)[0]


def build_hdataset(data: Sequence[LabeledSample], sched: NoiseSchedule, net: Mlp) -> HDataset:
    """DDIM-invert every sample and pair each recorded h_t with its labels."""
    X0 = dataset_matrix(data)
    n = X0.shape[0]
    _, hs = ddim_invert_batch(X0, sched, net)  # (T, n, w)
    T = sched.T
    steps = np.repeat(np.arange(T), n)
    ids = np.tile(np.arange(n), T)
    h = hs.reshape(T * n, -1)
    attrs = sorted(data[0].labels)
    labels = {a: np.tile(label_vector(data, a), T) for a in attrs}
    return HDataset(steps, h, labels, ids)


# ---------------------------------------------------------------------------
# Classifier bank
# ---------------------------------------------------------------------------

@dataclass
class HClassifierBank:
    """One linear head per step: logits at step t are W[t] h + b[t].

    attribute is a single name for binary banks, or a tuple of names for a
    joint (subgroup) bank built as a product of binary banks.
    """

    attribute: str | tuple[str, ...]
    weights: np.ndarray  # (T, n_classes, h_width)
    biases: np.ndarray   # (T, n_classes)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.weights.ndim != 3 or self.biases.shape != self.weights.shape[:2]:
            raise DimensionError("bank arrays must be (T, C, w) and (T, C)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("bank parameters must be finite")

    @property
    def T(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.weights.shape[1])

    @property
    def h_width(self) -> int:
        return int(self.weights.shape[2])


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


def bank_logits(bank: HClassifierBank, h_batch: np.ndarray, t: int) -> np.ndarray:
    if not 0 <= t < bank.T:
        raise ValueError(f"step {t} outside bank of {bank.T} heads")
    H = np.atleast_2d(np.asarray(h_batch, dtype=np.float64))
    if H.shape[1] != bank.h_width:
        raise DimensionError(f"h width {H.shape[1]} != bank width {bank.h_width}")
    return H @ bank.weights[t].T + bank.biases[t]


def classify_h(bank: HClassifierBank, h: np.ndarray, t: int) -> np.ndarray:
    """Per-class softmax of one h vector (or a batch, row-wise)."""
    h = np.asarray(h, dtype=np.float64)
    probs = _softmax(bank_logits(bank, h, t))
    return probs[0] if h.ndim == 1 else probs


@dataclass(frozen=True)
class AttributeDistributionEstimate:
    attribute: str | tuple[str, ...]
    probs: np.ndarray
    batch_size: int

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("estimate must be a probability vector")
        object.__setattr__(self, "probs", p)


def adp_estimate(bank: HClassifierBank, h_batch: np.ndarray, t: int) -> AttributeDistributionEstimate:
    """Batch attribute distribution: per-class softmax summed over the batch
    and divided by N."""
    H = np.atleast_2d(np.asarray(h_batch, dtype=np.float64))
    if H.shape[0] == 0:
        raise ValueError("adp_estimate needs a nonempty batch")
    probs = _softmax(bank_logits(bank, H, t)).sum(axis=0) / H.shape[0]
    return AttributeDistributionEstimate(bank.attribute, probs, H.shape[0])


# Distribution-matching losses are pluggable; each maps (p_hat, p_ref) to
# (value, d value / d p_hat). Chi-square is the default.

DistributionLoss = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def chi_square_distance(p_hat: np.ndarray, p_ref: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric chi-square: sum (a-b)^2 / (a+b+eps), with its gradient in a."""
    a = np.asarray(p_hat, dtype=np.float64)
    b = np.asarray(p_ref, dtype=np.float64)
    diff = a - b
    denom = a + b + CHI2_EPS
    value = float((diff * diff / denom).sum())
    grad = (2.0 * diff * denom - diff * diff) / (denom * denom)
    return value, grad


def adp_gradient(bank: HClassifierBank, h_batch: np.ndarray, t: int,
                 p_ref: ReferenceDistribution | np.ndarray,
                 loss: DistributionLoss = chi_square_distance) -> np.ndarray:
    """Closed-form per-sample gradients d loss / d h_i through the batch mean
    and each row's softmax. Shape matches h_batch."""
    H = np.atleast_2d(np.asarray(h_batch, dtype=np.float64))
    ref = p_ref.probs if isinstance(p_ref, ReferenceDistribution) else np.asarray(p_ref, dtype=np.float64)
    if ref.shape != (bank.n_classes,):
        raise DimensionError(f"reference has {ref.shape[0]} classes, bank has {bank.n_classes}")
    S = _softmax(bank_logits(bank, H, t))        # (N, C)
    p_hat = S.sum(axis=0) / H.shape[0]
    _, dl_dp = loss(p_hat, ref)
    g = dl_dp[None, :] / H.shape[0]              # d loss / d S, same for every row
    dZ = S * (g - (S * g).sum(axis=1, keepdims=True))
    return dZ @ bank.weights[t]


def adp_loss(bank: HClassifierBank, h_batch: np.ndarray, t: int,
             p_ref: ReferenceDistribution | np.ndarray,
             loss: DistributionLoss = chi_square_distance) -> tuple[float, np.ndarray]:
    """Loss value and the batch estimate it was computed from (diagnostics)."""
    est = adp_estimate(bank, h_batch, t)
    ref = p_ref.probs if isinstance(p_ref, ReferenceDistribution) else np.asarray(p_ref, dtype=np.float64)
    value, _ = loss(est.probs, ref)
    return value, est.probs


def joint_bank(bank_a: HClassifierBank, bank_b: HClassifierBank) -> HClassifierBank:
    """Product of two binary banks as one 4-class bank over joint subgroups.

    The product of two softmaxes is the softmax of kron-summed logits, so the
    joint head is again linear: W[(a,b)] = Wa[a] + Wb[b]. Class order follows
    synthdata.JOINT_ORDER (index = 2a + b).
    """
    if bank_a.n_classes != 2 or bank_b.n_classes != 2:
        raise ValueError("joint_bank composes two binary banks")
    if bank_a.T != bank_b.T or bank_a.h_width != bank_b.h_width:
        raise DimensionError("banks cover different step grids or widths")
    T, w = bank_a.T, bank_a.h_width
    W = np.empty((T, 4, w))
    b = np.empty((T, 4))
    for a in (0, 1):
        for c in (0, 1):
            W[:, 2 * a + c] = bank_a.weights[:, a] + bank_b.weights[:, c]
            b[:, 2 * a + c] = bank_a.biases[:, a] + bank_b.biases[:, c]
    names = (str(bank_a.attribute), str(bank_b.attribute))
    return HClassifierBank(names, W, b, {"composed_from": names})


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class HBankTrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 5
    holdout_fraction: float = 0.2
    seed: int = 0


def _stratified_split(ids: np.ndarray, labels: np.ndarray, holdout: float,
                      rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Split sample ids 80/20 per class; returns (train ids, heldout ids)."""
    train, held = [], []
    for cls in np.unique(labels):
        cls_ids = ids[labels == cls]
        cls_ids = cls_ids[rng.permutation(len(cls_ids))]
        n_held = max(1, int(round(holdout * len(cls_ids))))
        held.append(cls_ids[:n_held])
        train.append(cls_ids[n_held:])
    return np.concatenate(train), np.concatenate(held)


def train_hbank(hd: HDataset, attribute: str, config: HBankTrainConfig | None = None
                ) -> tuple[HClassifierBank, np.ndarray]:
    """Per-step logistic heads on h_t, trained independently for every t.

    Returns the bank and a (T, 2) table of (step, held-out accuracy). The
    80/20 split is stratified by class over sample ids, fixed by the config
    seed, and shared across steps.
    """
    if config is None:
        config = HBankTrainConfig()
    if attribute not in hd.labels:
        raise KeyError(f"attribute {attribute!r} not in the h-dataset")
    T = hd.T
    w = hd.h.shape[1]
    per_sample_label = np.empty(hd.n_samples, dtype=np.int64)
    per_sample_label[hd.sample_ids] = hd.labels[attribute]
    if np.unique(per_sample_label).shape[0] < 2:
        raise SingleClassError(f"attribute {attribute!r} has a single class")
    rng = RngStream(config.seed)
    train_ids, held_ids = _stratified_split(np.arange(hd.n_samples), per_sample_label,
                                            config.holdout_fraction, rng)
    train_mask = np.zeros(hd.n_samples, dtype=bool)
    train_mask[train_ids] = True

    W = np.zeros((T, 2, w))
    b = np.zeros((T, 2))
    acc = np.empty((T, 2))
    for t in range(T):
        rows = hd.rows_at(t)
        H = hd.h[rows]
        y = hd.labels[attribute][rows]
        tr = train_mask[hd.sample_ids[rows]]
        Ht, yt = H[tr], y[tr]
        Hv, yv = H[~tr], y[~tr]
        Wt = np.zeros((2, w))
        bt = np.zeros(2)
        opt = Adam([Wt, bt], lr=config.lr)
        srng = rng.child("step", t)
        n = Ht.shape[0]
        for _ in range(config.epochs):
            order = srng.permutation(n)
            for lo in range(0, n, config.batch_size):
                rows_b = order[lo:lo + config.batch_size]
                Hb, yb = Ht[rows_b], yt[rows_b]
                S = _softmax(Hb @ Wt.T + bt)
                S[np.arange(len(yb)), yb] -= 1.0
                S /= len(yb)
                opt.step([S.T @ Hb, S.sum(axis=0)])
        W[t], b[t] = Wt, bt
        pred = (Hv @ Wt.T + bt).argmax(axis=1)
        acc[t] = (t, float((pred == yv).mean()))
    meta = {"attribute": attribute, "n_samples": int(hd.n_samples), "seed": config.seed,
            "epochs": config.epochs, "batch_size": config.batch_size, "lr": config.lr}
    return HClassifierBank(attribute, W, b, meta), acc


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_bank(bank: HClassifierBank, path: str | Path) -> None:
    payload = {
        "format": BANK_TAG,
        "attribute": list(bank.attribute) if isinstance(bank.attribute, tuple) else bank.attribute,
        "T": bank.T,
        "n_classes": bank.n_classes,
        "h_width": bank.h_width,
        "weights": bank.weights.ravel().tolist(),
        "biases": bank.biases.ravel().tolist(),
        "metadata": bank.metadata,
    }
    Path(path).write_text(json.dumps(payload))


def load_bank(path: str | Path) -> HClassifierBank:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != BANK_TAG:
        raise ValueError(f"{path}: expected format {BANK_TAG!r}")
    T, C, w = payload["T"], payload["n_classes"], payload["h_width"]
    attr = payload["attribute"]
    return HClassifierBank(
        tuple(attr) if isinstance(attr, list) else attr,
        np.array(payload["weights"], dtype=np.float64).reshape(T, C, w),
        np.array(payload["biases"], dtype=np.float64).reshape(T, C),
        payload.get("metadata", {}),
    )


def export_accuracy_table(acc: np.ndarray, path: str | Path) -> None:
    """(t, accuracy) rows as delimited text."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "accuracy"])
        for t, a in acc:
            writer.writerow([int(t), repr(float(a))])
