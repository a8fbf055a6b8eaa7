"""Dirichlet label-skew partitioning of a training split across clients.

For every class a proportion vector over the ``m`` clients is drawn from
``Dir(alpha)`` and the class's examples are divided according to it, so a
small alpha concentrates each class on few clients while a large alpha
approaches a uniform split.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetHandle


class PartitionError(Exception):
    pass


@dataclass
class PartitionPlan:
    """Per-client index assignments for one train split."""

    alpha: float
    num_clients: int
    seed: int
    assignments: list[np.ndarray]

    @property
    def client_sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def total(self) -> int:
        return sum(self.client_sizes)


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer shares summing exactly to ``total``, split by ``proportions``.

    Fractional parts are rounded by largest remainder; ties go to the lower
    index so the result is deterministic.
    """
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        remainders = exact - counts
        # stable argsort on negated remainders: largest remainder first,
        # lowest index first among ties
        order = np.argsort(-remainders, kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    data: DatasetHandle,
    alpha: float,
    num_clients: int,
    seed: int,
    max_retries: int = 10,
) -> PartitionPlan:
    """Split ``data``'s indices across ``num_clients`` by per-class Dirichlet draws.

    Every train index lands in exactly one client. A draw that leaves some
    client with zero examples overall is rejected and retried with a fresh
    sub-seed (such a client could not train), up to ``max_retries`` times.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")

    labels = data.labels.numpy()
    num_classes = data.num_classes
    class_indices = [np.flatnonzero(labels == c) for c in range(num_classes)]

    for attempt in range(max_retries + 1):
        rng = np.random.default_rng([seed, attempt])
        assignments: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in class_indices:
            if len(idx) == 0:
                continue
            shuffled = rng.permutation(idx)
            props = rng.dirichlet(np.full(num_clients, alpha))
            counts = _largest_remainder_counts(props, len(idx))
            offsets = np.concatenate([[0], np.cumsum(counts)])
            for k in range(num_clients):
                assignments[k].append(shuffled[offsets[k] : offsets[k + 1]])
        merged = [
            np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
            for parts in assignments
        ]
        if all(len(a) > 0 for a in merged):
            return PartitionPlan(
                alpha=float(alpha),
                num_clients=num_clients,
                seed=seed,
                assignments=merged,
            )
    raise PartitionError(
        f"could not find a partition without empty clients after "
        f"{max_retries + 1} attempts (alpha={alpha}, m={num_clients})"
    )


def partition_summary(plan: PartitionPlan, data: DatasetHandle) -> np.ndarray:
    """(m, num_classes) matrix of per-client class counts."""
    labels = data.labels.numpy()
    n = len(labels)
    hist = np.zeros((plan.num_clients, data.num_classes), dtype=np.int64)
    for k, idx in enumerate(plan.assignments):
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise PartitionError(f"client {k} references indices outside the dataset")
        hist[k] = np.bincount(labels[idx], minlength=data.num_classes)
    return hist


def save_plan(plan: PartitionPlan, path: str | os.PathLike) -> None:
    payload = {
        "alpha": plan.alpha,
        "num_clients": plan.num_clients,
        "seed": plan.seed,
        "assignments": [a.tolist() for a in plan.assignments],
    }
    Path(path).write_text(json.dumps(payload))


def load_plan(path: str | os.PathLike) -> PartitionPlan:
    payload = json.loads(Path(path).read_text())
    return PartitionPlan(
        alpha=payload["alpha"],
        num_clients=payload["num_clients"],
        seed=payload["seed"],
        assignments=[np.asarray(a, dtype=np.int64) for a in payload["assignments"]],
    )
