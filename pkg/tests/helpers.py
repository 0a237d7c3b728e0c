"""Shared builders for the test suite."""

from collections import Counter

import numpy as np

from sakt.config import TrainConfig
from sakt.data import InteractionSequence, make_windows, stack_windows
from sakt.model import init_params

# executed hypothesis cases per property suite, read by the acceptance checks
CASES: Counter = Counter()

TINY = TrainConfig(d=8, n=10, h=2, blocks=1, dropout=0.0, dtype="float64")


def random_sequence(rng, num_exercises, length, student="s"):
    ex = rng.integers(0, num_exercises, length)
    rr = rng.integers(0, 2, length)
    return InteractionSequence(student, tuple(zip(ex.tolist(), rr.tolist())))


def random_batch(rng, num_exercises, n, count, min_len=2, max_len=None):
    """Stack the first window of ``count`` random sequences (some padded)."""
    max_len = max_len or n + 1
    windows = []
    for i in range(count):
        seq = random_sequence(rng, num_exercises, int(rng.integers(min_len, max_len + 1)), f"s{i}")
        windows.append(make_windows(seq, n, num_exercises)[-1])
    return stack_windows(windows)


def perturbed_params(config, num_exercises, seed, scale=0.3):
    """Initialized params plus noise, so gradients are not dominated by tiny weights."""
    rng = np.random.default_rng(seed)
    params = init_params(config, num_exercises, rng)
    for name, t in params.tensors.items():
        params.tensors[name] = t + scale * rng.standard_normal(t.shape)
    return params
