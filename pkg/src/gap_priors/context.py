"""Group-upweighted context distribution over the labeled validation set.

Each example of group ``g`` gets weight ``(N / N_g) ** gamma`` where ``N`` is
the size of the context set and ``N_g`` the size of the group. Sampling in
proportion to these weights ("upsampling") gives group ``g`` total mass
proportional to ``N_g ** (1 - gamma)``: balanced at ``gamma = 1`` and
increasingly tilted toward rare groups beyond that.

``mode="mixture"`` instead uses ``(N / N_g) ** gamma`` directly as the
mixture weight of each group, which is kept for comparison.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .datagen import GroupedDataset

MODES = ("upsample", "mixture")


@dataclass(frozen=True)
class ContextWeights:
    gamma: float
    group_weight: Mapping[int, float]  # per-example weight for members of each group
    group_prob: Mapping[int, float]
    counts: Mapping[int, int]
    mode: str = "upsample"

    def per_example_weight(self, groups) -> np.ndarray:
        groups = np.asarray(groups)
        missing = set(np.unique(groups).tolist()) - set(self.group_weight)
        if missing:
            raise ValueError(f"groups {sorted(missing)} have no context weight")
        lut = np.zeros(max(self.group_weight) + 1)
        for g, w in self.group_weight.items():
            lut[g] = w
        return lut[groups]

    def example_probs(self, groups) -> np.ndarray:
        """Sampling probability of each example (sums to 1)."""
        groups = np.asarray(groups)
        lut = np.zeros(max(self.group_prob) + 1)
        for g, p in self.group_prob.items():
            lut[g] = p / self.counts[g]
        return lut[groups]

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "mode": self.mode,
            "counts": {str(k): v for k, v in self.counts.items()},
            "group_prob": {str(k): v for k, v in self.group_prob.items()},
        }


def compute_weights(counts: Mapping[int, int], gamma: float, mode: str = "upsample") -> ContextWeights:
    if not counts:
        raise ValueError("no groups given")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if any(c <= 0 for c in counts.values()):
        zero = sorted(g for g, c in counts.items() if c <= 0)
        raise ValueError(f"groups {zero} are listed but have no examples")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if gamma < 1:
        warnings.warn(f"gamma={gamma} < 1 down-weights rare groups relative to balancing", stacklevel=2)
    keys = sorted(int(g) for g in counts)
    n = np.array([counts[g] for g in keys], dtype=np.float64)
    total = n.sum()
    with np.errstate(over="ignore"):
        # raw weights may overflow to inf for extreme gamma; sampling uses prob
        weight = (total / n) ** gamma
    # normalize through logs so large gamma does not overflow
    if mode == "upsample":
        log_mass = np.log(n) + gamma * (np.log(total) - np.log(n))
    else:
        log_mass = gamma * (np.log(total) - np.log(n))
    if mode == "upsample" and gamma == 1:
        prob = np.full(len(keys), 1.0 / len(keys))
    else:
        m = np.exp(log_mass - log_mass.max())
        prob = m / m.sum()
    if mode == "mixture":
        weight = prob / n * total
    return ContextWeights(
        gamma=float(gamma),
        group_weight=MappingProxyType({g: float(w) for g, w in zip(keys, weight)}),
        group_prob=MappingProxyType({g: float(p) for g, p in zip(keys, prob)}),
        counts=MappingProxyType({g: int(counts[g]) for g in keys}),
        mode=mode,
    )


def weights_for(dataset: GroupedDataset, gamma: float, mode: str = "upsample") -> ContextWeights:
    return compute_weights(dataset.group_counts, gamma, mode)


class ContextSampler:
    """Draws i.i.d. context batches (with replacement) from a dataset."""

    def __init__(self, dataset: GroupedDataset, weights: ContextWeights):
        if len(dataset) == 0:
            raise ValueError("context dataset is empty")
        if dict(dataset.group_counts) != dict(weights.counts):
            raise ValueError("context weights were not computed from this dataset's group counts")
        self.dataset = dataset
        self.weights = weights
        probs = weights.example_probs(dataset.g)
        self._cdf = np.cumsum(probs)
        self._cdf /= self._cdf[-1]

    def sample_indices(self, S: int, rng: np.random.Generator) -> np.ndarray:
        if S < 1:
            raise ValueError("context batch size must be at least 1")
        idx = np.searchsorted(self._cdf, rng.random(S), side="right")
        return np.minimum(idx, len(self._cdf) - 1)

    def sample(self, S: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = self.sample_indices(S, rng)
        return self.dataset.x[idx], self.dataset.y[idx]


def sample_context_batch(val_context: GroupedDataset, weights: ContextWeights, S: int,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One batch of ``S`` context inputs and their true labels."""
    return ContextSampler(val_context, weights).sample(S, rng)
