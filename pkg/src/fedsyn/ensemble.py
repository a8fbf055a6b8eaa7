"""The server's view of uploaded client models.

Two aggregation routes live here: the average-logit ensemble teacher,
which works for arbitrary mixed architectures, and the classic
size-weighted parameter average, which requires a homogeneous bundle.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .data import DatasetHandle
from .models import ClientModel, forward_logits, load_checkpoint, save_checkpoint


class UnsupportedAggregationError(RuntimeError):
    """Parameter averaging was asked for on a heterogeneous bundle."""


@dataclass
class EnsembleBundle:
    clients: list[ClientModel]
    sizes: list[int]
    dataset: str
    num_classes: int

    def __post_init__(self):
        if not self.clients:
            raise ValueError("a bundle needs at least one client")
        if len(self.sizes) != len(self.clients):
            raise ValueError("sizes and clients length mismatch")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("client sizes must be positive")
        if any(c.num_classes != self.num_classes for c in self.clients):
            raise ValueError("all clients must share the same class count")

    def __len__(self) -> int:
        return len(self.clients)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.clients[0].input_shape

    def is_homogeneous(self) -> bool:
        return len({c.arch_id for c in self.clients}) == 1 and len(
            {c.width_scale for c in self.clients}
        ) == 1


def average_logits(
    bundle: EnsembleBundle,
    batch: torch.Tensor,
    size_weighted: bool = False,
) -> torch.Tensor:
    """Mean of the client logits on ``batch``, unweighted by default.

    Client sizes deliberately play no role in the teacher (unlike
    parameter averaging); ``size_weighted=True`` switches to n_k / n
    weights for ablation. Summation order over clients is fixed for
    determinism, and gradients flow through the batch, not into client
    parameters.
    """
    shapes = {c.input_shape for c in bundle.clients}
    if len(shapes) != 1:
        raise ValueError(f"clients disagree on input shape: {shapes}")
    if size_weighted:
        n = sum(bundle.sizes)
        weights = [k / n for k in bundle.sizes]
    else:
        weights = [1.0 / len(bundle)] * len(bundle)
    total = None
    for client, w in zip(bundle.clients, weights):
        logits, _ = forward_logits(client, batch)
        term = logits * w
        total = term if total is None else total + term
    return total


def fedavg_aggregate(bundle: EnsembleBundle) -> ClientModel:
    """Size-weighted mean of all client state, including BN running stats.

    Weights are n_k / sum(n). Only homogeneous bundles can be averaged;
    mixed architectures raise UnsupportedAggregationError.
    """
    if not bundle.is_homogeneous():
        archs = sorted({c.arch_id for c in bundle.clients})
        raise UnsupportedAggregationError(
            f"parameter averaging needs one shared architecture, bundle has {archs}"
        )
    ref = bundle.clients[0]
    states = [c.net.state_dict() for c in bundle.clients]
    keys = list(states[0].keys())
    for st in states[1:]:
        if list(st.keys()) != keys or any(st[k].shape != states[0][k].shape for k in keys):
            raise UnsupportedAggregationError("client state_dicts are not shape-compatible")

    # (sum_k n_k * theta_k) / n in float64: products of float32 values by
    # integer sizes are exact, so identical clients average to themselves
    # bit-for-bit after the final cast
    total = sum(bundle.sizes)
    merged = {}
    for key in keys:
        ref_t = states[0][key]
        acc = torch.zeros(ref_t.shape, dtype=torch.float64)
        for n_k, st in zip(bundle.sizes, states):
            acc += st[key].to(torch.float64) * n_k
        acc /= total
        if ref_t.is_floating_point():
            merged[key] = acc.to(ref_t.dtype)
        else:
            merged[key] = acc.round().to(ref_t.dtype)

    out = ClientModel(
        arch_id=ref.arch_id,
        num_classes=ref.num_classes,
        net=copy.deepcopy(ref.net),
        input_shape=ref.input_shape,
        seed=ref.seed,
        width_scale=ref.width_scale,
        dataset=ref.dataset,
    )
    out.net.load_state_dict(merged)
    out.net.eval()
    return out


def evaluate(model: ClientModel, test: DatasetHandle, batch_size: int = 512) -> float:
    """Top-1 accuracy of argmax logits over a test split."""
    if len(test) == 0:
        raise ValueError("test split is empty")
    correct = 0
    with torch.no_grad():
        for start in range(0, len(test), batch_size):
            batch = test.images[start : start + batch_size]
            logits, _ = forward_logits(model, batch)
            pred = logits.argmax(dim=1)
            correct += int((pred == test.labels[start : start + batch_size]).sum())
    return correct / len(test)


def ensemble_accuracy(bundle: EnsembleBundle, test: DatasetHandle, batch_size: int = 512) -> float:
    """Accuracy of the average-logit teacher itself (diagnostic)."""
    correct = 0
    with torch.no_grad():
        for start in range(0, len(test), batch_size):
            batch = test.images[start : start + batch_size]
            pred = average_logits(bundle, batch).argmax(dim=1)
            correct += int((pred == test.labels[start : start + batch_size]).sum())
    return correct / len(test)


def save_bundle(bundle: EnsembleBundle, out_dir: str | Path) -> None:
    """Per-client checkpoint files plus a bundle manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, client in enumerate(bundle.clients):
        save_checkpoint(client, out / f"client_{k}.ckpt")
    manifest = {
        "num_clients": len(bundle),
        "sizes": list(bundle.sizes),
        "dataset": bundle.dataset,
        "num_classes": bundle.num_classes,
        "archs": [c.arch_id for c in bundle.clients],
    }
    (out / "bundle.json").write_text(json.dumps(manifest, indent=2))


def load_bundle(out_dir: str | Path) -> EnsembleBundle:
    out = Path(out_dir)
    manifest = json.loads((out / "bundle.json").read_text())
    clients = [
        load_checkpoint(out / f"client_{k}.ckpt") for k in range(manifest["num_clients"])
    ]
    return EnsembleBundle(
        clients=clients,
        sizes=manifest["sizes"],
        dataset=manifest["dataset"],
        num_classes=manifest["num_classes"],
    )
