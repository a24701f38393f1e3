"""Sliding windows over a trial and trial-grouped fold assignment."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .data_model import TrialKey, Window


def window_count(duration_s: float, window_size_s: float, step_size_s: float) -> int:
    if duration_s < window_size_s:
        return 0
    # integer milliseconds keep 0.1-style steps exact
    d, w, s = (int(round(v * 1000)) for v in (duration_s, window_size_s, step_size_s))
    return (d - w) // s + 1


def partition(trial_duration_s: float, window_size_s: float, step_size_s: float,
              key: TrialKey | None = None) -> list[Window]:
    """Windows starting at 0, step, 2*step, ... that end within the trial.

    Trailing partial windows are dropped.
    """
    if window_size_s <= 0:
        raise ValueError("window size must be positive")
    if not 0 < step_size_s <= window_size_s:
        raise ValueError("step must satisfy 0 < step <= window")
    n = window_count(trial_duration_s, window_size_s, step_size_s)
    w_ms, s_ms = int(round(window_size_s * 1000)), int(round(step_size_s * 1000))
    return [Window(key, i * s_ms / 1000.0, (i * s_ms + w_ms) / 1000.0, i) for i in range(n)]


@dataclass(frozen=True)
class FoldAssignment:
    folds: Mapping[TrialKey, int]
    k: int
    seed: int

    def __getitem__(self, key: TrialKey) -> int:
        return self.folds[key]

    def __contains__(self, key) -> bool:
        return key in self.folds

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.folds.values():
            counts[f] += 1
        return counts

    def test_keys(self, fold: int) -> set[TrialKey]:
        return {k for k, f in self.folds.items() if f == fold}

    def train_keys(self, fold: int) -> set[TrialKey]:
        return {k for k, f in self.folds.items() if f != fold}


def assign_folds(keys: Iterable[TrialKey], k: int, seed: int) -> FoldAssignment:
    """Assign whole trials to k folds.

    Each user's trials are shuffled and dealt round-robin, continuing where the
    previous user stopped, so fold sizes differ by at most one both per user
    and overall.
    """
    keys = sorted(set(keys))
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(keys) < k:
        raise ValueError(f"fewer trials ({len(keys)}) than folds ({k})")
    rng = np.random.default_rng(seed)
    by_user = defaultdict(list)
    for key in keys:
        by_user[key.user_id].append(key)
    users = sorted(by_user)
    users = [users[i] for i in rng.permutation(len(users))]
    relabel = rng.permutation(k)
    folds, pos = {}, 0
    for u in users:
        trials = by_user[u]
        for j in rng.permutation(len(trials)):
            folds[trials[j]] = int(relabel[pos % k])
            pos += 1
    return FoldAssignment(dict(sorted(folds.items())), k, seed)


def assign_user_folds(keys: Iterable[TrialKey], seed: int = 0) -> FoldAssignment:
    """Leave-one-user-out: one fold per user."""
    keys = sorted(set(keys))
    users = sorted({k.user_id for k in keys})
    if len(users) < 2:
        raise ValueError("leave-one-user-out needs at least two users")
    index = {u: i for i, u in enumerate(users)}
    return FoldAssignment({k: index[k.user_id] for k in keys}, len(users), seed)


def check_no_leakage(train_keys: Iterable[TrialKey], test_keys: Iterable[TrialKey]) -> None:
    shared = set(train_keys) & set(test_keys)
    if shared:
        raise AssertionError(f"trial(s) in both train and test: {sorted(shared)[:5]}")
