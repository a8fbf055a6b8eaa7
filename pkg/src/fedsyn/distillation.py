"""Stage 2 distillation and the end-to-end orchestrators.

One epoch = sample a noise/label batch, refine the generator for ``t_g``
steps against the frozen ensemble, regenerate the batch from the *same*
noise with the updated generator, then take ``t_s`` SGD-with-momentum
steps moving the student's softmax toward the ensemble's.

``run_multiround`` repeats the whole one-shot pipeline, re-seeding clients
from the current global model between communication rounds.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .data import DatasetHandle
from .ensemble import EnsembleBundle, average_logits, evaluate
from .generator_stage import (
    GenLossWeights,
    _softmax64,
    _row_kl,
    generator_inner_loop,
    sample_noise_and_labels,
)
from .local_training import LocalTrainConfig, train_all_clients
from .models import ClientModel, GeneratorModel, build_generator, build_model
from .partition import PartitionPlan

# fixed offsets deriving the student/generator init streams from cfg.seed
_STUDENT_SEED_OFFSET = 10007
_GENERATOR_SEED_OFFSET = 20011
_ROUND_SEED_STRIDE = 100003


@dataclass
class FedSynConfig:
    """Knobs for one distillation run (and, via ``local``, the client side)."""

    epochs: int = 200              # global training epochs T
    t_g: int = 30                  # generator steps per epoch
    t_s: int = 1                   # student steps per epoch
    batch_size: int = 128
    lr_s: float = 0.01
    lr_g: float = 1e-3
    momentum_s: float = 0.9
    weights: GenLossWeights = field(default_factory=GenLossWeights)
    rounds: int = 1                # communication rounds T_c
    seed: int = 0
    noise_dim: int = 100
    kl_temperature: float = 1.0
    bn_norm: str = "l2"
    eval_every: int = 5
    fresh_z: bool = False          # resample noise for the distill batch
    width_scale: float = 1.0       # applied to student and generator
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.t_g < 0 or self.rounds < 1:
            raise ValueError("epochs/t_g must be >= 0 and rounds >= 1")
        if self.t_s < 1:
            raise ValueError("t_s must be >= 1")
        if min(self.batch_size, self.noise_dim) < 1:
            raise ValueError("batch_size and noise_dim must be >= 1")
        if self.lr_s < 0 or self.lr_g < 0:
            raise ValueError("learning rates must be >= 0")


@dataclass
class RunResult:
    model: ClientModel
    trace: list[dict]
    wall_clock: dict[str, float]

    def final_accuracy(self) -> float | None:
        for rec in reversed(self.trace):
            if rec.get("acc") is not None:
                return rec["acc"]
        return None


def distill_loss(
    avg_logits: torch.Tensor,
    student_logits: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """KL(teacher softmax || student softmax), mean over the batch.

    The teacher side is detached, so gradients reach only the student.
    """
    if avg_logits.shape != student_logits.shape:
        raise ValueError(f"shape mismatch: {avg_logits.shape} vs {student_logits.shape}")
    if not (torch.isfinite(avg_logits).all() and torch.isfinite(student_logits).all()):
        raise ValueError("non-finite logits")
    p = _softmax64(avg_logits.detach(), temperature)
    q = _softmax64(student_logits, temperature)
    return _row_kl(p, q).mean()


@dataclass
class FedSynState:
    gen: GeneratorModel
    student: ClientModel
    bundle: EnsembleBundle
    gen_opt: torch.optim.Optimizer
    student_opt: torch.optim.Optimizer
    rng: torch.Generator
    epoch: int = 0


def init_state(bundle: EnsembleBundle, student_arch: str, cfg: FedSynConfig) -> FedSynState:
    student = build_model(
        student_arch,
        bundle.num_classes,
        cfg.seed + _STUDENT_SEED_OFFSET,
        input_shape=bundle.input_shape,
        width_scale=cfg.width_scale,
        dataset=bundle.dataset,
    )
    gen = build_generator(
        cfg.noise_dim,
        bundle.input_shape,
        cfg.seed + _GENERATOR_SEED_OFFSET,
        width_scale=cfg.width_scale,
    )
    return FedSynState(
        gen=gen,
        student=student,
        bundle=bundle,
        gen_opt=torch.optim.Adam(gen.net.parameters(), lr=cfg.lr_g),
        student_opt=torch.optim.SGD(
            student.net.parameters(), lr=cfg.lr_s, momentum=cfg.momentum_s
        ),
        rng=torch.Generator().manual_seed(cfg.seed),
    )


def fedsyn_epoch(state: FedSynState, cfg: FedSynConfig) -> dict:
    """One epoch of Algorithm-style training; returns the epoch's metrics."""
    t0 = time.perf_counter()
    z, y = sample_noise_and_labels(
        cfg.batch_size, cfg.noise_dim, state.bundle.num_classes, state.rng
    )
    state.gen, parts = generator_inner_loop(
        state.gen, state.bundle, state.student, z, y,
        steps=cfg.t_g, lr=cfg.lr_g, weights=cfg.weights,
        optimizer=state.gen_opt,
        kl_temperature=cfg.kl_temperature, bn_norm=cfg.bn_norm,
    )
    t1 = time.perf_counter()

    if cfg.fresh_z:
        z, _ = sample_noise_and_labels(
            cfg.batch_size, cfg.noise_dim, state.bundle.num_classes, state.rng
        )
    state.gen.net.train()
    with torch.no_grad():
        x_hat = state.gen.net(z)
        teacher = average_logits(state.bundle, x_hat)

    dis_losses = []
    state.student.net.train()
    for _ in range(cfg.t_s):
        student_logits = state.student.net(x_hat)
        loss = distill_loss(teacher, student_logits, temperature=cfg.kl_temperature)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite distillation loss at epoch {state.epoch}")
        state.student_opt.zero_grad()
        loss.backward()
        state.student_opt.step()
        dis_losses.append(float(loss.detach()))
    state.student.net.eval()
    t2 = time.perf_counter()

    state.epoch += 1
    return {
        "epoch": state.epoch,
        "l_gen": parts["l_gen"],
        "l_ce": parts["l_ce"],
        "l_bn": parts["l_bn"],
        "l_div": parts["l_div"],
        "l_dis": sum(dis_losses) / len(dis_losses),
        "acc": None,
        "wall_ms": (t2 - t0) * 1000.0,
        "_gen_s": t1 - t0,
        "_dis_s": t2 - t1,
    }


def run_fedsyn(
    bundle: EnsembleBundle,
    student_arch: str,
    cfg: FedSynConfig,
    test: DatasetHandle | None = None,
    on_epoch=None,
) -> RunResult:
    """Train a global student from a frozen bundle; deterministic per seed.

    Test accuracy is recorded every ``cfg.eval_every`` epochs and at the
    final epoch when ``test`` is given.
    """
    state = init_state(bundle, student_arch, cfg)
    trace: list[dict] = []
    wall = {"generator_s": 0.0, "distill_s": 0.0, "eval_s": 0.0, "total_s": 0.0}
    t_start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rec = fedsyn_epoch(state, cfg)
        wall["generator_s"] += rec.pop("_gen_s")
        wall["distill_s"] += rec.pop("_dis_s")
        if test is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            t0 = time.perf_counter()
            rec["acc"] = evaluate(state.student, test)
            wall["eval_s"] += time.perf_counter() - t0
        trace.append(rec)
        if on_epoch is not None:
            on_epoch(rec, state)
    wall["total_s"] = time.perf_counter() - t_start
    return RunResult(model=state.student, trace=trace, wall_clock=wall)


def run_multiround(
    data: DatasetHandle,
    plan: PartitionPlan,
    archs: list[str],
    cfg: FedSynConfig,
    student_arch: str | None = None,
    test: DatasetHandle | None = None,
    client_width_scale: float | None = None,
    workers: int = 0,
) -> RunResult:
    """Multi-round extension: clients restart each round from the current
    global model (round 1 starts fresh), then the one-shot pipeline runs.

    With ``cfg.rounds == 1`` this is exactly train-clients-then-distill.
    """
    if student_arch is None:
        student_arch = archs[0]
    client_scale = cfg.width_scale if client_width_scale is None else client_width_scale
    if cfg.rounds > 1:
        if set(archs) != {student_arch} or client_scale != cfg.width_scale:
            raise ValueError(
                "multi-round training needs homogeneous client models matching "
                "the global architecture (clients must load the global state)"
            )

    trace: list[dict] = []
    wall = {"local_s": 0.0, "generator_s": 0.0, "distill_s": 0.0, "eval_s": 0.0}
    result: RunResult | None = None
    init = None
    for r in range(cfg.rounds):
        stride = r * _ROUND_SEED_STRIDE
        local_cfg = replace(cfg.local, seed=cfg.local.seed + stride)
        t0 = time.perf_counter()
        bundle = train_all_clients(
            plan, data, archs, local_cfg,
            width_scale=client_scale, init_state=init, workers=workers,
        )
        wall["local_s"] += time.perf_counter() - t0
        round_cfg = replace(cfg, seed=cfg.seed + stride)
        result = run_fedsyn(bundle, student_arch, round_cfg, test=test)
        for rec in result.trace:
            trace.append({"round": r + 1, **rec})
        for key in ("generator_s", "distill_s", "eval_s"):
            wall[key] += result.wall_clock[key]
        init = result.model.net.state_dict()
    assert result is not None
    wall["total_s"] = sum(v for k, v in wall.items() if k != "total_s")
    return RunResult(model=result.model, trace=trace, wall_clock=wall)


def write_metrics_jsonl(trace: list[dict], path: str | os.PathLike) -> None:
    """Persist one JSON record per epoch; atomic via temp file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        for rec in trace:
            f.write(json.dumps(rec) + "\n")
    os.replace(tmp, path)


def read_metrics_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
