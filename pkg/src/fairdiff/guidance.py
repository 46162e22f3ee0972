"""Guided sampling strategies.

distribution: move the whole batch's h-vectors down the gradient of a
    distribution-matching loss between the batch attribute estimate and a
    reference histogram.
sample: preset a target class per batch slot, ascend each sample's
    log-probability of its target.
universal: guide in data space through a clean-data classifier applied to
    the DDIM clean-point estimate, pushed back onto the noise prediction.
latent-edit: shift h along a fixed per-step class-mean direction for the
    slots assigned to the class being amplified.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import (NoiseSchedule, SampleRun, ddim_generate, ddim_predict_x0)
from .hspace import (DistributionLoss, HClassifierBank, HDataset, adp_estimate,
                     adp_gradient, bank_logits, chi_square_distance, _softmax)
from .numkit import DimensionError, Mlp, RngStream, derive_seed, forward_layers, backward_layers, gaussian_sample
from .synthdata import ReferenceDistribution

STRATEGIES = ("none", "distribution", "sample", "universal", "latent-edit")


@dataclass
class GuidanceConfig:
    strategy: str = "none"
    gamma: float = 1500.0
    banks: list[HClassifierBank] = field(default_factory=list)
    references: list[ReferenceDistribution] = field(default_factory=list)
    batch_size: int = 100
    quota_seed: int = 0
    edit_scale: float = 1.0          # latent-edit step size
    edit_class: int = 1              # class whose share latent editing grows
    clean_classifier: Mlp | None = None  # universal guidance input
    directions: np.ndarray | None = None  # (T, h_width) latent-edit directions
    loss: DistributionLoss = chi_square_distance

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.strategy in ("distribution", "sample") and not self.banks:
            raise ValueError(f"{self.strategy} guidance needs at least one classifier bank")
        if self.banks:
            if len(self.banks) != len(self.references):
                raise ValueError("need exactly one reference per bank")
            for bank, ref in zip(self.banks, self.references):
                if bank.n_classes != ref.probs.shape[0]:
                    raise ValueError(f"bank {bank.attribute} has {bank.n_classes} classes, "
                                     f"reference has {ref.probs.shape[0]}")
        if self.strategy == "universal" and self.clean_classifier is None:
            raise ValueError("universal guidance needs a clean-data classifier")
        if self.strategy == "latent-edit" and self.directions is None:
            raise ValueError("latent editing needs precomputed directions")


def make_quota_assignment(ref: ReferenceDistribution, n: int, rng: RngStream) -> np.ndarray:
    """Target class per batch slot with exact largest-remainder counts."""
    p = ref.probs
    counts = np.floor(n * p).astype(int)
    frac = n * p - counts
    for cls in np.argsort(-frac)[: n - counts.sum()]:
        counts[cls] += 1
    assignment = np.repeat(np.arange(p.shape[0]), counts)
    return assignment[rng.permutation(n)]


# ---------------------------------------------------------------------------
# Hooks
# ---------------------------------------------------------------------------

def distribution_hook(cfg: GuidanceConfig, h_batch: np.ndarray, t: int) -> np.ndarray:
    """h_i <- h_i - gamma * d loss / d h_i, summed over bank/reference pairs."""
    if cfg.gamma == 0.0:
        return h_batch
    update = np.zeros_like(h_batch)
    for bank, ref in zip(cfg.banks, cfg.references):
        update += adp_gradient(bank, h_batch, t, ref, cfg.loss)
    return h_batch - cfg.gamma * update


def sample_hook(cfg: GuidanceConfig, h_batch: np.ndarray, t: int,
                quota_assignment: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """Ascend each sample's log-probability of its preset class."""
    assignments = _per_bank_assignments(cfg, h_batch.shape[0], quota_assignment)
    if cfg.gamma == 0.0:
        return h_batch
    h = h_batch
    for bank, assign in zip(cfg.banks, assignments):
        S = _softmax(bank_logits(bank, h_batch, t))
        S *= -1.0
        S[np.arange(h_batch.shape[0]), assign] += 1.0
        h = h + cfg.gamma * (S @ bank.weights[t])
    return h


def _per_bank_assignments(cfg: GuidanceConfig, n: int, quota_assignment) -> list[np.ndarray]:
    if isinstance(quota_assignment, np.ndarray) and quota_assignment.ndim == 1:
        assignments = [quota_assignment]
    else:
        assignments = list(quota_assignment)
    if len(assignments) != len(cfg.banks):
        raise ValueError(f"{len(assignments)} assignments for {len(cfg.banks)} banks")
    for a in assignments:
        if a.shape[0] != n:
            raise ValueError(f"assignment length {a.shape[0]} != batch size {n}")
    return assignments


def universal_hook(cfg: GuidanceConfig, x_batch: np.ndarray, t: int, eps_pred: np.ndarray,
                   sched: NoiseSchedule, quota_assignment: np.ndarray) -> np.ndarray:
    """Classifier guidance through the clean-point estimate.

    Evaluates the clean-data classifier at x0_hat and moves eps against the
    classifier gradient; the chain factor -sqrt(1-abar)/sqrt(abar) is
    d x0_hat / d eps, so the update ascends the per-sample target-class
    log-probability as a function of eps.
    """
    if cfg.clean_classifier is None:
        raise ValueError("universal guidance needs a clean-data classifier")
    if quota_assignment.shape[0] != x_batch.shape[0]:
        raise ValueError(f"assignment length {quota_assignment.shape[0]} != batch size {x_batch.shape[0]}")
    if cfg.gamma == 0.0:
        return eps_pred
    x0_hat = ddim_predict_x0(x_batch, t, eps_pred, sched)
    net = cfg.clean_classifier
    logits, cache = forward_layers(net, x0_hat)
    S = _softmax(logits)
    S *= -1.0
    S[np.arange(x_batch.shape[0]), quota_assignment] += 1.0
    g, _, _ = backward_layers(net, cache, S)  # d log p(target) / d x0_hat
    ab = sched.alpha_bar[t]
    factor = np.sqrt(1.0 - ab) / np.sqrt(ab)
    return eps_pred - cfg.gamma * factor * g


def latent_edit_hook(cfg: GuidanceConfig, h_batch: np.ndarray, t: int,
                     directions: np.ndarray, quota_assignment: np.ndarray) -> np.ndarray:
    """Shift the slots assigned to the edited class along the class-mean axis."""
    if directions is None:
        raise ValueError("latent editing needs precomputed directions")
    if quota_assignment.shape[0] != h_batch.shape[0]:
        raise ValueError(f"assignment length {quota_assignment.shape[0]} != batch size {h_batch.shape[0]}")
    if cfg.edit_scale == 0.0:
        return h_batch
    step = directions[t] if cfg.edit_class == 1 else -directions[t]
    h = h_batch.copy()
    h[quota_assignment == cfg.edit_class] += cfg.edit_scale * step
    return h


def compute_edit_directions(hd: HDataset, attribute: str) -> np.ndarray:
    """(T, h_width) per-step class-mean differences, class 1 minus class 0."""
    y = hd.labels[attribute]
    T = hd.T
    dirs = np.empty((T, hd.h.shape[1]))
    for t in range(T):
        rows = hd.rows_at(t)
        ht, yt = hd.h[rows], y[rows]
        dirs[t] = ht[yt == 1].mean(axis=0) - ht[yt == 0].mean(axis=0)
    return dirs


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass
class StepDiagnostic:
    batch: int
    t: int
    attribute: str
    p_hat: list[float]
    loss: float
    grad_norm: float


def run_guided_generation(cfg: GuidanceConfig, sched: NoiseSchedule, net: Mlp,
                          rng: RngStream, n: int, record_h: bool = False
                          ) -> tuple[SampleRun, list[StepDiagnostic]]:
    """Generate n samples in coupled batches of cfg.batch_size, wiring the
    configured strategy into the sampler and recording the per-step batch
    attribute estimate for every bank."""
    cfg.validate()
    d = net.output_width
    x_init = gaussian_sample(rng, n, d)
    diagnostics: list[StepDiagnostic] = []
    outs, traces = [], []
    n_batches = int(np.ceil(n / cfg.batch_size))
    for b in range(n_batches):
        chunk = x_init[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        run = _run_one_batch(cfg, sched, net, chunk, b, diagnostics, record_h)
        outs.append(run.samples)
        if record_h:
            traces.append(run.h_trace)
    samples = np.concatenate(outs)
    trace = np.concatenate(traces, axis=1) if record_h else None
    return SampleRun(samples, trace, np.arange(sched.T - 1, -1, -1)), diagnostics


def _run_one_batch(cfg: GuidanceConfig, sched: NoiseSchedule, net: Mlp,
                   x_init: np.ndarray, batch_index: int,
                   diagnostics: list[StepDiagnostic], record_h: bool) -> SampleRun:
    n = x_init.shape[0]
    quota_rng = RngStream(derive_seed(cfg.quota_seed, "quota", batch_index))
    assignments = [make_quota_assignment(ref, n, quota_rng) for ref in cfg.references]

    def record(h: np.ndarray, t: int, grad_norm_by_bank: list[float]) -> None:
        for k, (bank, ref) in enumerate(zip(cfg.banks, cfg.references)):
            est = adp_estimate(bank, h, t)
            loss_val, _ = cfg.loss(est.probs, ref.probs)
            diagnostics.append(StepDiagnostic(
                batch_index, t, str(bank.attribute), est.probs.tolist(),
                loss_val, grad_norm_by_bank[k] if grad_norm_by_bank else 0.0))

    h_hook = None
    eps_hook = None
    if cfg.strategy == "distribution":
        def h_hook(h, t):
            grads = [adp_gradient(bank, h, t, ref, cfg.loss)
                     for bank, ref in zip(cfg.banks, cfg.references)]
            record(h, t, [float(np.linalg.norm(g, axis=1).mean()) for g in grads])
            if cfg.gamma == 0.0:
                return h
            return h - cfg.gamma * sum(grads)
    elif cfg.strategy == "sample":
        def h_hook(h, t):
            record(h, t, [])
            return sample_hook(cfg, h, t, assignments)
    elif cfg.strategy == "latent-edit":
        def h_hook(h, t):
            record(h, t, [])
            return latent_edit_hook(cfg, h, t, cfg.directions, assignments[0] if assignments
                                    else _edit_assignment(cfg, n, quota_rng))
    elif cfg.strategy == "universal":
        def eps_hook(x, t, eps):
            return universal_hook(cfg, x, t, eps, sched, assignments[0] if assignments
                                  else _edit_assignment(cfg, n, quota_rng))
        if cfg.banks:
            def h_hook(h, t):
                record(h, t, [])
                return h
    elif cfg.banks:  # unguided but monitored
        def h_hook(h, t):
            record(h, t, [])
            return h

    return ddim_generate(x_init, sched, net, h_hook, eps_hook, record_h)


def _edit_assignment(cfg: GuidanceConfig, n: int, rng: RngStream) -> np.ndarray:
    # strategies without a reference fall back to an all-target assignment
    return np.full(n, cfg.edit_class, dtype=np.int64)
