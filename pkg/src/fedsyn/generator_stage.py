"""Stage 1: train the generator against the frozen ensemble and student.

The generator loss is ce + lambda1 * bn + lambda2 * div, where

* ce pushes synthetic images to be confidently classified as their sampled
  label by the ensemble's average logits,
* bn aligns the batch statistics each client observes at its BN layers
  with that client's stored running statistics,
* div (always <= 0) rewards samples on which the ensemble teacher and the
  current student disagree, i.e. samples between the two decision
  boundaries.

Loss arithmetic runs in float64 so values can be checked against
brute-force oracles at tight tolerance; gradients still flow back into the
float32 generator parameters.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import torch

from .ensemble import EnsembleBundle
from .models import (
    BatchStatsCapture,
    ClientModel,
    GeneratorModel,
    forward_logits,
    stored_bn_stats,
)

_EPS = 1e-8


class GeneratorDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenLossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (v >= 0 and v == v and v != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class SyntheticBatch:
    z: torch.Tensor      # (b, noise_dim), standard Gaussian
    y: torch.Tensor      # (b, num_classes) one-hot
    x_hat: torch.Tensor | None = None


def sample_noise_and_labels(
    batch_size: int,
    noise_dim: int,
    num_classes: int,
    rng: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Standard-normal noise and uniformly sampled one-hot labels."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    z = torch.randn(batch_size, noise_dim, generator=rng)
    classes = torch.randint(num_classes, (batch_size,), generator=rng)
    y = torch.zeros(batch_size, num_classes)
    y[torch.arange(batch_size), classes] = 1.0
    return z, y


def _softmax64(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    return torch.softmax(logits.to(torch.float64) / temperature, dim=1)


def ce_gen_loss(avg_logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between softmax of the averaged logits and the sampled
    one-hot labels, mean over the batch."""
    if avg_logits.shape != y.shape:
        raise ValueError(f"shape mismatch: {avg_logits.shape} vs {y.shape}")
    if not torch.isfinite(avg_logits).all():
        raise ValueError("non-finite logits")
    probs = _softmax64(avg_logits, 1.0)
    return -(y.to(torch.float64) * probs.clamp_min(_EPS).log()).sum(dim=1).mean()


def bn_loss(
    captures: list[BatchStatsCapture | None],
    bundle: EnsembleBundle,
    norm: str = "l2",
) -> torch.Tensor:
    """Distance between observed batch statistics and each client's stored
    running statistics, averaged over clients and summed over BN layers.

    ``norm="l2"`` uses plain L2 norms per layer; ``norm="squared"`` uses the
    squared variant. Clients without BN layers contribute zero.
    """
    if len(captures) != len(bundle):
        raise ValueError("need exactly one capture per client")
    if norm not in ("l2", "squared"):
        raise ValueError(f"norm must be 'l2' or 'squared', got {norm!r}")
    total = torch.zeros((), dtype=torch.float64)
    for capture, client in zip(captures, bundle.clients):
        stored = stored_bn_stats(client)
        if capture is None or len(capture) == 0:
            if stored:
                raise ValueError(f"client {client.arch_id} has BN layers but no capture")
            continue
        if len(capture.layers) != len(stored):
            raise ValueError(
                f"capture has {len(capture.layers)} layers, model has {len(stored)}"
            )
        for got, ref in zip(capture.layers, stored):
            if got.mean.numel() != ref.mean.numel():
                raise ValueError(f"BN layer {ref.name}: stats width mismatch")
            dm = torch.linalg.vector_norm(got.mean.to(torch.float64) - ref.mean.to(torch.float64))
            dv = torch.linalg.vector_norm(got.var.to(torch.float64) - ref.var.to(torch.float64))
            if norm == "squared":
                dm, dv = dm**2, dv**2
            total = total + dm + dv
    return total / len(bundle)


def _row_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    # KL(p || q) per row, eps-floored logs; clamped at 0 because KL is
    # nonnegative and float cancellation can land a hair below it
    return (p * (p.clamp_min(_EPS).log() - q.clamp_min(_EPS).log())).sum(dim=1).clamp_min(0.0)


def div_loss(
    avg_logits: torch.Tensor,
    student_logits: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Negative KL(teacher || student), counted only on rows where the two
    argmax predictions differ; mean over the whole batch.

    Ties inside a row's argmax resolve to the lowest class index on both
    sides, so the disagreement mask is deterministic.
    """
    if avg_logits.shape != student_logits.shape:
        raise ValueError(f"shape mismatch: {avg_logits.shape} vs {student_logits.shape}")
    if not (torch.isfinite(avg_logits).all() and torch.isfinite(student_logits).all()):
        raise ValueError("non-finite logits")
    p = _softmax64(avg_logits, temperature)
    q = _softmax64(student_logits, temperature)
    disagree = (avg_logits.argmax(dim=1) != student_logits.argmax(dim=1)).to(torch.float64)
    return -(disagree * _row_kl(p, q)).mean()


@contextmanager
def _params_frozen(*nets):
    saved = []
    for net in nets:
        for p in net.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def gen_loss(
    batch: SyntheticBatch,
    bundle: EnsembleBundle,
    student: ClientModel,
    gen: GeneratorModel,
    weights: GenLossWeights,
    kl_temperature: float = 1.0,
    bn_norm: str = "l2",
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full generator objective on x_hat = G(z), regenerated here.

    Only the generator's parameters participate in the autograd graph;
    client and student parameters are frozen for the duration, so gradients
    reach them neither from the classification terms nor from the
    disagreement term. Returns the scalar loss (graph attached) and the
    float values of each component.
    """
    gen.net.train()
    with _params_frozen(student.net, *(c.net for c in bundle.clients)):
        x_hat = gen.net(batch.z)
        if not torch.isfinite(x_hat).all():
            raise GeneratorDivergedError("generator produced non-finite images")
        batch.x_hat = x_hat.detach()

        logit_sum = None
        captures = []
        for client in bundle.clients:
            logits, cap = forward_logits(client, x_hat, capture_stats=True)
            captures.append(cap)
            logit_sum = logits if logit_sum is None else logit_sum + logits
        avg = logit_sum / len(bundle)

        l_ce = ce_gen_loss(avg, batch.y)
        l_bn = bn_loss(captures, bundle, norm=bn_norm)
        if weights.lambda2 != 0.0:
            student_logits, _ = forward_logits(student, x_hat)
            l_div = div_loss(avg, student_logits, temperature=kl_temperature)
        else:
            l_div = torch.zeros((), dtype=torch.float64)
        total = l_ce + weights.lambda1 * l_bn + weights.lambda2 * l_div

    if not torch.isfinite(total):
        raise GeneratorDivergedError(
            f"non-finite generator loss (ce={l_ce.detach()}, bn={l_bn.detach()}, "
            f"div={l_div.detach()})"
        )
    parts = {
        "l_ce": float(l_ce.detach()),
        "l_bn": float(l_bn.detach()),
        "l_div": float(l_div.detach()),
    }
    return total, parts


def generator_inner_loop(
    gen: GeneratorModel,
    bundle: EnsembleBundle,
    student: ClientModel,
    z: torch.Tensor,
    y: torch.Tensor,
    steps: int,
    lr: float,
    weights: GenLossWeights,
    optimizer: torch.optim.Optimizer | None = None,
    kl_temperature: float = 1.0,
    bn_norm: str = "l2",
) -> tuple[GeneratorModel, dict[str, float]]:
    """``steps`` Adam updates of the generator on a fixed (z, y) batch.

    Pass ``optimizer`` to keep Adam moments alive across epochs; otherwise a
    fresh one is created. Returns the generator and the loss components of
    the final step (zeros when ``steps == 0``).
    """
    if optimizer is None:
        optimizer = torch.optim.Adam(gen.net.parameters(), lr=lr)
    parts = {"l_gen": 0.0, "l_ce": 0.0, "l_bn": 0.0, "l_div": 0.0}
    batch = SyntheticBatch(z=z, y=y)
    for _ in range(steps):
        loss, comp = gen_loss(
            batch, bundle, student, gen, weights,
            kl_temperature=kl_temperature, bn_norm=bn_norm,
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        parts = {"l_gen": float(loss.detach()), **comp}
    for p in gen.net.parameters():
        if not torch.isfinite(p).all():
            raise GeneratorDivergedError(
                f"generator parameters became non-finite after {steps} steps "
                f"(lr={lr}, last losses: {parts})"
            )
    return gen, parts
