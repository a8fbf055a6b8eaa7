"""Dataset registry, loading, and fixed per-dataset normalization.

Datasets are cached as uint8 npz files under the data directory
(``FEDSYN_DATA_DIR`` env var, default ``~/.cache/fedsyn``) and normalized
at load time with constants frozen here rather than recomputed, so two
machines always see bit-identical tensors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class UnknownDatasetError(DatasetError):
    pass


class DatasetUnavailableError(DatasetError):
    """Raised when a dataset is neither cached on disk nor fetchable."""


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    num_classes: int
    shape: tuple[int, int, int]  # (C, H, W)
    mean: tuple[float, ...]
    std: tuple[float, ...]
    train_size: int
    test_size: int


# Normalization constants are the conventional published per-channel
# statistics of each training set, frozen for reproducibility.
DATASETS: dict[str, DatasetInfo] = {
    "mnist": DatasetInfo("mnist", 10, (1, 28, 28), (0.1307,), (0.3081,), 60000, 10000),
    "fashionmnist": DatasetInfo(
        "fashionmnist", 10, (1, 28, 28), (0.2860,), (0.3530,), 60000, 10000
    ),
    "cifar10": DatasetInfo(
        "cifar10",
        10,
        (3, 32, 32),
        (0.4914, 0.4822, 0.4465),
        (0.2470, 0.2435, 0.2616),
        50000,
        10000,
    ),
    # Procedural 10-class toy set for fast tests and demos; generated on the
    # fly, never fetched.
    "synth": DatasetInfo("synth", 10, (1, 12, 12), (0.5,), (0.5,), 2000, 400),
}

_ALIASES = {
    "mnist": "mnist",
    "fashionmnist": "fashionmnist",
    "fashion-mnist": "fashionmnist",
    "fmnist": "fashionmnist",
    "cifar10": "cifar10",
    "cifar-10": "cifar10",
    "synth": "synth",
}

SPLITS = ("train", "test")


def canonical_name(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise UnknownDatasetError(
            f"unknown dataset {name!r}; supported: {sorted(set(_ALIASES.values()))}"
        ) from None


def dataset_info(name: str) -> DatasetInfo:
    return DATASETS[canonical_name(name)]


def data_dir(override: str | os.PathLike | None = None) -> Path:
    """Resolve the dataset cache directory (env ``FEDSYN_DATA_DIR`` aware)."""
    if override is not None:
        return Path(override)
    env = os.environ.get("FEDSYN_DATA_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "fedsyn"


@dataclass
class DatasetHandle:
    """An ordered, normalized view of one split of a labeled image dataset.

    ``images`` is float32 with layout (N, C, H, W), already normalized to the
    dataset's frozen per-channel statistics; ``labels`` is int64 in
    ``[0, num_classes)``.
    """

    name: str
    split: str
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def select(self, indices) -> "DatasetHandle":
        """A shard of this split (e.g. one client's slice of a partition)."""
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return DatasetHandle(
            name=self.name,
            split=self.split,
            images=self.images[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
        )

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.num_classes)


def _normalize(raw: np.ndarray, info: DatasetInfo) -> torch.Tensor:
    # raw is uint8 (N, H, W) or (N, H, W, C)
    if raw.ndim == 3:
        raw = raw[..., None]
    x = torch.from_numpy(np.ascontiguousarray(raw)).to(torch.float32).div_(255.0)
    x = x.permute(0, 3, 1, 2).contiguous()
    mean = torch.tensor(info.mean, dtype=torch.float32).view(1, -1, 1, 1)
    std = torch.tensor(info.std, dtype=torch.float32).view(1, -1, 1, 1)
    return (x - mean) / std


def _synth_split(info: DatasetInfo, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Procedural class-prototype images: prototype + noise, uint8."""
    n = info.train_size if split == "train" else info.test_size
    c, h, w = info.shape
    proto_rng = np.random.default_rng(20240100)
    protos = proto_rng.uniform(0.0, 1.0, size=(info.num_classes, h, w, c))
    rng = np.random.default_rng(20240101 if split == "train" else 20240102)
    labels = np.arange(n) % info.num_classes
    noise = rng.normal(0.0, 0.18, size=(n, h, w, c))
    images = np.clip(protos[labels] + noise, 0.0, 1.0)
    return (images * 255).astype(np.uint8), labels.astype(np.int64)


def _validate(images: np.ndarray, labels: np.ndarray, info: DatasetInfo, split: str):
    expected_n = info.train_size if split == "train" else info.test_size
    c, h, w = info.shape
    if images.shape != (expected_n, h, w, c):
        raise DatasetError(
            f"{info.name}/{split}: cached images have shape {images.shape}, "
            f"expected {(expected_n, h, w, c)}"
        )
    if labels.shape != (expected_n,):
        raise DatasetError(f"{info.name}/{split}: bad label array shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= info.num_classes:
        raise DatasetError(f"{info.name}/{split}: labels outside [0, {info.num_classes})")


def load_dataset(
    name: str,
    split: str,
    root: str | os.PathLike | None = None,
    fetch: bool = True,
) -> DatasetHandle:
    """Load one split of a supported dataset as a normalized DatasetHandle.

    Ordering is deterministic: the cached arrays preserve the dataset's
    canonical example order, so two loads of the same name+split are
    identical. When the npz cache is missing and ``fetch`` is true, the
    dataset is materialized first (see :mod:`fedsyn.fetch`).
    """
    cname = canonical_name(name)
    info = DATASETS[cname]
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")

    if cname == "synth":
        images, labels = _synth_split(info, split)
    else:
        path = data_dir(root) / cname / f"{split}.npz"
        if not path.exists():
            if not fetch:
                raise DatasetUnavailableError(
                    f"{cname}/{split} not cached at {path} and fetch disabled"
                )
            from . import fetch as _fetch

            _fetch.fetch_dataset(cname, root)
        try:
            with np.load(path) as z:
                images, labels = z["images"], z["labels"]
        except Exception as exc:  # corrupt zip, missing keys
            raise DatasetError(f"corrupt dataset cache at {path}: {exc}") from exc
        _validate(images, labels, info, split)

    return DatasetHandle(
        name=cname,
        split=split,
        images=_normalize(images, info),
        labels=torch.from_numpy(labels.astype(np.int64)),
        num_classes=info.num_classes,
    )
