"""Attributed synthetic data: a Gaussian mixture whose components carry
binary attribute labels, so the ground-truth attribute distribution and the
exact data density are both known in closed form.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numkit import RngStream

MIXTURE_TAG = "fairdiff-mixture/v1"

# Joint classes of two binary attributes (a, b) are ordered (0,0),(0,1),(1,0),(1,1),
# i.e. index = 2a + b. Everything that touches subgroups uses this ordering.
JOINT_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class MixtureComponent:
    mean: np.ndarray
    scale: float  # isotropic standard deviation
    attributes: dict[str, int]


@dataclass(frozen=True)
class AttributedMixture:
    """Gaussian mixture with per-component binary attribute labels."""

    components: tuple[MixtureComponent, ...]
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if len(self.components) != w.shape[0]:
            raise ValueError("one weight per component required")
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("weights must be a probability vector (sum 1 within 1e-12)")
        if any(c.scale <= 0 for c in self.components):
            raise ValueError("covariance scales must be positive")
        names = set(self.components[0].attributes)
        for c in self.components:
            if set(c.attributes) != names:
                raise ValueError("every component must define every declared attribute")
            if any(v not in (0, 1) for v in c.attributes.values()):
                raise ValueError("attribute values must be 0 or 1")

    @property
    def dimension(self) -> int:
        return int(np.asarray(self.components[0].mean).shape[0])

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.components[0].attributes))


@dataclass(frozen=True)
class LabeledSample:
    x0: np.ndarray
    labels: dict[str, int]


@dataclass(frozen=True)
class ReferenceDistribution:
    """Target histogram over attribute classes (or joint subgroups)."""

    attributes: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if p.ndim != 1 or p.shape[0] != 2 ** len(self.attributes):
            raise ValueError(f"need {2 ** len(self.attributes)} entries for {self.attributes}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("reference must be a probability vector (sum 1 within 1e-12)")


def uniform_reference(*attributes: str) -> ReferenceDistribution:
    k = 2 ** len(attributes)
    return ReferenceDistribution(tuple(attributes), np.full(k, 1.0 / k))


def default_world() -> AttributedMixture:
    """Biased two-attribute world used throughout the lab.

    Four clusters on a square: attribute a1 splits left/right, a2 splits
    bottom/top. Weights (0.45, 0.30, 0.15, 0.10) make a1 a 75/25 minority
    attribute and correlate it with a2. The cluster scale keeps the classes
    separable (evaluators reach ~100% held-out accuracy) while leaving the
    density soft enough that guided moves between clusters stay cheap.
    """
    spots = [
        ((-1.5, -1.5), {"a1": 0, "a2": 0}),
        ((-1.5, +1.5), {"a1": 0, "a2": 1}),
        ((+1.5, +1.5), {"a1": 1, "a2": 1}),
        ((+1.5, -1.5), {"a1": 1, "a2": 0}),
    ]
    comps = tuple(
        MixtureComponent(np.array(mean, dtype=np.float64), 0.45, attrs)
        for mean, attrs in spots
    )
    return AttributedMixture(comps, np.array([0.45, 0.30, 0.15, 0.10]))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_dataset(mix: AttributedMixture, n: int, rng: RngStream) -> list[LabeledSample]:
    """n i.i.d. draws; labels are copied from the chosen component."""
    if n <= 0:
        raise ValueError(f"need n > 0, got {n}")
    idx = rng.choice(len(mix.components), size=n, p=mix.weights)
    noise = rng.standard_normal((n, mix.dimension))
    out = []
    for i, k in enumerate(idx):
        c = mix.components[k]
        out.append(LabeledSample(c.mean + c.scale * noise[i], dict(c.attributes)))
    return out


def sample_points(mix: AttributedMixture, n: int, rng: RngStream) -> np.ndarray:
    """(n, d) matrix of draws without labels (metric reference sets)."""
    if n <= 0:
        raise ValueError(f"need n > 0, got {n}")
    idx = rng.choice(len(mix.components), size=n, p=mix.weights)
    noise = rng.standard_normal((n, mix.dimension))
    means = np.stack([mix.components[k].mean for k in idx])
    scales = np.array([mix.components[k].scale for k in idx])
    return means + scales[:, None] * noise


def sample_balanced(mix: AttributedMixture, attribute: str, per_class: int,
                    rng: RngStream) -> list[LabeledSample]:
    """Rejection-sample until both classes of `attribute` hold per_class items."""
    if attribute not in mix.attribute_names:
        raise KeyError(f"unknown attribute {attribute!r}")
    buckets: dict[int, list[LabeledSample]] = {0: [], 1: []}
    while min(len(buckets[0]), len(buckets[1])) < per_class:
        for s in sample_dataset(mix, max(256, per_class), rng):
            buckets[s.labels[attribute]].append(s)
    merged = buckets[0][:per_class] + buckets[1][:per_class]
    order = rng.permutation(len(merged))
    return [merged[i] for i in order]


def dataset_matrix(data: Sequence[LabeledSample]) -> np.ndarray:
    return np.stack([s.x0 for s in data])


def label_vector(data: Sequence[LabeledSample], attribute: str) -> np.ndarray:
    return np.array([s.labels[attribute] for s in data], dtype=np.int64)


# ---------------------------------------------------------------------------
# Exact density and marginals
# ---------------------------------------------------------------------------

def log_density(mix: AttributedMixture, x: np.ndarray) -> float:
    """Exact mixture log-density at one point."""
    return float(log_density_batch(mix, np.asarray(x, dtype=np.float64)[None, :])[0])


def log_density_batch(mix: AttributedMixture, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != mix.dimension:
        raise ValueError(f"points have dimension {X.shape[1]}, mixture is {mix.dimension}-d")
    d = mix.dimension
    parts = []
    for w, c in zip(mix.weights, mix.components):
        sq = ((X - c.mean) ** 2).sum(axis=1)
        parts.append(np.log(w) - 0.5 * d * np.log(2.0 * np.pi * c.scale ** 2) - sq / (2.0 * c.scale ** 2))
    stacked = np.stack(parts)  # (k, n)
    m = stacked.max(axis=0)
    return m + np.log(np.exp(stacked - m).sum(axis=0))


def component_posterior(mix: AttributedMixture, X: np.ndarray) -> np.ndarray:
    """(n, k) posterior over components given each point."""
    X = np.asarray(X, dtype=np.float64)
    d = mix.dimension
    parts = []
    for w, c in zip(mix.weights, mix.components):
        sq = ((X - c.mean) ** 2).sum(axis=1)
        parts.append(np.log(w) - 0.5 * d * np.log(2.0 * np.pi * c.scale ** 2) - sq / (2.0 * c.scale ** 2))
    logp = np.stack(parts, axis=1)
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True)


def posterior_labels(mix: AttributedMixture, X: np.ndarray) -> list[dict[str, int]]:
    """Exact labels for arbitrary points: attributes of the most likely component."""
    best = component_posterior(mix, X).argmax(axis=1)
    return [dict(mix.components[k].attributes) for k in best]


def reweight_mixture(mix: AttributedMixture, ref: ReferenceDistribution) -> AttributedMixture:
    """Mixture whose attribute histogram follows the reference.

    Component weights are rescaled per attribute class (or joint subgroup)
    so the marginal matches ref while the within-class shape is unchanged:
    the exact analogue of drawing a reference set that follows the target
    distribution from the original data.
    """
    w = mix.weights
    new = np.empty_like(w)
    n_attr = len(ref.attributes)
    for idx in range(ref.probs.shape[0]):
        vals = [(idx >> (n_attr - 1 - k)) & 1 for k in range(n_attr)]
        sel = np.array([
            all(c.attributes[a] == v for a, v in zip(ref.attributes, vals))
            for c in mix.components
        ])
        mass = w[sel].sum()
        if mass == 0.0 and ref.probs[idx] > 0.0:
            raise ValueError(f"reference puts mass on empty subgroup {dict(zip(ref.attributes, vals))}")
        new[sel] = ref.probs[idx] * w[sel] / mass if mass > 0 else 0.0
    return AttributedMixture(mix.components, new)


def true_attribute_fraction(mix: AttributedMixture, attribute: str | Sequence[str]) -> np.ndarray:
    """Marginal class probabilities implied by the component weights.

    A single attribute gives (P[a=0], P[a=1]); a pair gives the four joint
    subgroup probabilities in JOINT_ORDER.
    """
    names = (attribute,) if isinstance(attribute, str) else tuple(attribute)
    for name in names:
        if name not in mix.attribute_names:
            raise KeyError(f"unknown attribute {name!r}")
    k = 2 ** len(names)
    out = np.zeros(k)
    for w, c in zip(mix.weights, mix.components):
        idx = 0
        for name in names:
            idx = 2 * idx + c.attributes[name]
        out[idx] += w
    return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_mixture(mix: AttributedMixture, path: str | Path) -> None:
    payload = {
        "format": MIXTURE_TAG,
        "components": [
            {"mean": c.mean.tolist(), "scale": c.scale, "attributes": c.attributes}
            for c in mix.components
        ],
        "weights": mix.weights.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_mixture(path: str | Path) -> AttributedMixture:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != MIXTURE_TAG:
        raise ValueError(f"{path}: expected format {MIXTURE_TAG!r}")
    comps = tuple(
        MixtureComponent(np.array(c["mean"], dtype=np.float64), float(c["scale"]),
                         {k: int(v) for k, v in c["attributes"].items()})
        for c in payload["components"]
    )
    return AttributedMixture(comps, np.array(payload["weights"], dtype=np.float64))


def export_dataset(data: Sequence[LabeledSample], path: str | Path) -> None:
    """Delimited text: columns x_1..x_d then one column per attribute."""
    d = data[0].x0.shape[0]
    attrs = sorted(data[0].labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{i + 1}" for i in range(d)] + attrs)
        for s in data:
            writer.writerow([repr(float(v)) for v in s.x0] + [s.labels[a] for a in attrs])
