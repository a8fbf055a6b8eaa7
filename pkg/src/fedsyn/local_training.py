"""Per-client supervised training with a pluggable loss registry.

Clients are trained independently with mini-batch SGD + momentum; each
client's RNG is derived from ``cfg.seed + client_index`` so results do not
depend on processing order or on whether clients run serially or in a
process pool.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, replace
from typing import Callable

import torch
from torch import nn

from .data import DatasetHandle
from .ensemble import EnsembleBundle
from .models import ClientModel, build_model
from .partition import PartitionPlan


class EmptyShardError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LocalTrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    loss_id: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


# loss_id -> factory(num_classes, class_counts) -> callable(logits, labels)
LOCAL_LOSSES: dict[str, Callable] = {}


def register_local_loss(loss_id: str, factory: Callable) -> None:
    """Register a local-training loss, e.g. a margin loss for imbalanced
    shards. The factory receives (num_classes, per-class counts of the
    shard) and returns ``fn(logits, labels) -> scalar``."""
    LOCAL_LOSSES[loss_id] = factory


register_local_loss("cross_entropy", lambda nc, counts: nn.CrossEntropyLoss())


def _resolve_loss(cfg: LocalTrainConfig, shard: DatasetHandle):
    try:
        factory = LOCAL_LOSSES[cfg.loss_id]
    except KeyError:
        raise ValueError(
            f"unknown loss_id {cfg.loss_id!r}; registered: {sorted(LOCAL_LOSSES)}"
        ) from None
    counts = torch.bincount(shard.labels, minlength=shard.num_classes)
    return factory(shard.num_classes, counts)


def local_update(
    model: ClientModel,
    shard: DatasetHandle,
    cfg: LocalTrainConfig,
) -> tuple[ClientModel, list[float]]:
    """Train ``model`` in place for ``cfg.epochs`` epochs on its shard.

    Returns the model and the per-epoch mean loss trace (length ``epochs``).
    """
    if len(shard) == 0:
        raise EmptyShardError("cannot train on an empty shard")
    if int(shard.labels.max()) >= model.num_classes:
        raise ValueError("shard contains labels outside the model's class range")

    loss_fn = _resolve_loss(cfg, shard)
    opt = torch.optim.SGD(model.net.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    rng = torch.Generator().manual_seed(cfg.seed)
    n = len(shard)
    trace: list[float] = []

    model.net.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=rng)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = model.net(shard.images[idx])
            loss = loss_fn(logits, shard.labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch offset {start} "
                    f"(lr={cfg.lr}, arch={model.arch_id})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        trace.append(epoch_loss / n)
    model.net.eval()
    return model, trace


def _train_one(args):
    (k, arch_id, num_classes, input_shape, width_scale, dataset,
     images, labels, cfg, init_state) = args
    shard = DatasetHandle(dataset, "train", images, labels, num_classes)
    model = build_model(
        arch_id, num_classes, cfg.seed,
        input_shape=input_shape, width_scale=width_scale, dataset=dataset,
    )
    if init_state is not None:
        model.net.load_state_dict(init_state)
    model, trace = local_update(model, shard, cfg)
    return k, model.net.state_dict(), trace


def train_all_clients(
    plan: PartitionPlan,
    data: DatasetHandle,
    arch_assignment: list[str],
    cfg: LocalTrainConfig,
    width_scale: float = 1.0,
    init_state: dict | None = None,
    workers: int = 0,
) -> EnsembleBundle:
    """Train one model per client shard and collect them into a bundle.

    Client ``k`` uses seed ``cfg.seed + k`` for both initialization and
    shuffling. With ``workers > 0`` clients train in a spawn-based process
    pool; results are bit-identical to the serial path.
    """
    if len(arch_assignment) != plan.num_clients:
        raise ValueError(
            f"arch_assignment has {len(arch_assignment)} entries for "
            f"{plan.num_clients} clients"
        )
    for k, idx in enumerate(plan.assignments):
        if len(idx) == 0:
            raise EmptyShardError(f"client {k} has an empty shard")

    jobs = []
    for k, arch_id in enumerate(arch_assignment):
        shard = data.select(plan.assignments[k])
        jobs.append((
            k, arch_id, data.num_classes, data.input_shape, width_scale,
            data.name, shard.images, shard.labels,
            replace(cfg, seed=cfg.seed + k), init_state,
        ))

    results: dict[int, tuple[dict, list[float]]] = {}
    if workers > 0:
        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=min(workers, plan.num_clients)) as pool:
            for k, state, trace in pool.map(_train_one, jobs):
                results[k] = (state, trace)
    else:
        for job in jobs:
            k, state, trace = _train_one(job)
            results[k] = (state, trace)

    clients = []
    for k, arch_id in enumerate(arch_assignment):
        model = build_model(
            arch_id, data.num_classes, cfg.seed + k,
            input_shape=data.input_shape, width_scale=width_scale, dataset=data.name,
        )
        model.net.load_state_dict(results[k][0])
        clients.append(model)
    return EnsembleBundle(
        clients=clients,
        sizes=plan.client_sizes,
        dataset=data.name,
        num_classes=data.num_classes,
    )
