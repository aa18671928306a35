"""Monte-Carlo dropout: per-pass weight masks and stochastic forward passes.

Each stochastic forward pass samples one binary mask per eligible weight
tensor of the recurrent layers (input, recurrent, and cell-to-gate
connections; never the dense head, never biases), multiplies the weights
elementwise, and holds that mask set fixed across every time step of the
sequence. Masks are resampled between passes. There is no 1/(1-rate)
rescaling anywhere: a rate of zero is exactly the deterministic forward.

Pass seeds derive from the run seed through a splitmix64-style avalanche
mixer, so distributions are reproducible and individual passes independent.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .network import MASKABLE_FAMILIES, dpm_forward

_MASK64 = (1 << 64) - 1


def mix64(seed, index):
    """Avalanche-mix a (seed, index) pair into a fresh 64-bit seed."""
    x = (int(seed) + 0x9E3779B97F4A7C15 * (int(index) + 1)) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.01
    targets: tuple = ("inputs", "outputs", "recurrent")

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise ValueError("dropout rate must lie in [0, 1)")
        for t in self.targets:
            if t not in MASKABLE_FAMILIES:
                raise ValueError(f"unknown dropout target {t!r}")


@dataclass
class MaskSet:
    masks: dict
    seed: int


@dataclass(frozen=True)
class PredictiveDistribution:
    """Collision probabilities from N stochastic forward passes."""

    samples: tuple

    def __post_init__(self):
        for s in self.samples:
            if not (0.0 <= s <= 1.0):
                raise ValueError(f"collision probability {s} outside [0, 1]")

    @property
    def n(self):
        return len(self.samples)


def _maskable_names(params, spec):
    fields = set()
    for target in spec.targets:
        fields.update(MASKABLE_FAMILIES[target])
    names = []
    for name in params.tensors():
        if name.split(".")[-1] in fields:
            names.append(name)
    return names


def sample_masks(spec, params, rng_seed):
    """Independent Bernoulli(1 - rate) entries per masked weight element."""
    rng = np.random.default_rng(int(rng_seed) & _MASK64)
    tensors = params.tensors()
    masks = {}
    for name in _maskable_names(params, spec):
        masks[name] = (rng.random(tensors[name].shape) >= spec.rate).astype(np.float64)
    return MaskSet(masks=masks, seed=int(rng_seed) & _MASK64)


def stochastic_forward(params, config, sample, spec, rng_seed, step_hook=None):
    """One stochastic pass; returns P(collision) with fresh masks."""
    mask_set = sample_masks(spec, params, rng_seed)
    probs = dpm_forward(params, config, sample, mask_set.masks, step_hook=step_hook)
    return float(probs[0])


def run_sfp(params, config, sample, spec, n, rng_seed):
    """N stochastic forward passes with seeds split from rng_seed."""
    if n < 1:
        raise ValueError("need at least one stochastic pass")
    values = tuple(
        stochastic_forward(params, config, sample, spec, mix64(rng_seed, i))
        for i in range(n)
    )
    return PredictiveDistribution(samples=values)


def write_distribution_csv(dist, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pass_index", "p_collision"])
        for i, p in enumerate(dist.samples):
            writer.writerow([i, repr(p)])
