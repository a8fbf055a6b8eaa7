"""Materialize dataset caches from local raw files or hub mirrors.

Two sources are tried in order:

1. canonical raw files dropped into ``<data_dir>/<name>/raw/`` by hand
   (IDX files for the MNIST family, the ``cifar-10-batches-py`` folder for
   CIFAR10), for fully offline machines;
2. the Hugging Face hosted parquet copies of the same datasets
   (``HF_ENDPOINT`` is honored, so private mirrors work).

Either way the result is one ``<split>.npz`` per split holding the raw
uint8 images and int64 labels in canonical order.
"""

from __future__ import annotations

import gzip
import io
import os
import pickle
import struct
from pathlib import Path

import numpy as np

from .data import DATASETS, DatasetUnavailableError, canonical_name, data_dir

# dataset -> (hub repo, path template, image column)
_HUB_SOURCES = {
    "mnist": ("ylecun/mnist", "mnist/{split}-00000-of-00001.parquet", "image"),
    "fashionmnist": (
        "zalando-datasets/fashion_mnist",
        "fashion_mnist/{split}-00000-of-00001.parquet",
        "image",
    ),
    "cifar10": ("uoft-cs/cifar10", "plain_text/{split}-00000-of-00001.parquet", "img"),
}

_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _open_maybe_gz(path: Path):
    gz = path.with_name(path.name + ".gz")
    if path.exists():
        return open(path, "rb")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(path)


def _read_idx_images(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 2051:
            raise ValueError(f"{path}: bad IDX image magic {magic}")
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(n, rows, cols)


def _read_idx_labels(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        magic, n = struct.unpack(">II", f.read(8))
        if magic != 2049:
            raise ValueError(f"{path}: bad IDX label magic {magic}")
        return np.frombuffer(f.read(), dtype=np.uint8).astype(np.int64)


def _from_idx_raw(raw_dir: Path, split: str) -> tuple[np.ndarray, np.ndarray] | None:
    img_name, lbl_name = _IDX_NAMES[split]
    try:
        images = _read_idx_images(raw_dir / img_name)
        labels = _read_idx_labels(raw_dir / lbl_name)
    except FileNotFoundError:
        return None
    return images, labels


def _from_cifar_batches(raw_dir: Path, split: str) -> tuple[np.ndarray, np.ndarray] | None:
    batch_dir = raw_dir / "cifar-10-batches-py"
    if not batch_dir.is_dir():
        return None
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    chunks, labels = [], []
    for name in names:
        with open(batch_dir / name, "rb") as f:
            d = pickle.load(f, encoding="bytes")
        chunks.append(np.asarray(d[b"data"], dtype=np.uint8))
        labels.extend(d[b"labels"])
    data = np.concatenate(chunks).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(data), np.asarray(labels, dtype=np.int64)


def _from_hub(name: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    import pyarrow.parquet as pq
    from huggingface_hub import hf_hub_download
    from PIL import Image

    repo, template, img_col = _HUB_SOURCES[name]
    local = hf_hub_download(repo, template.format(split=split), repo_type="dataset")
    table = pq.read_table(local)
    labels = np.asarray(table.column("label").to_pylist(), dtype=np.int64)
    images = np.stack(
        [
            np.asarray(Image.open(io.BytesIO(rec["bytes"])))
            for rec in table.column(img_col).to_pylist()
        ]
    )
    return images, labels


def fetch_dataset(name: str, root: str | os.PathLike | None = None) -> Path:
    """Ensure both splits of ``name`` are cached; returns the dataset dir.

    Raises DatasetUnavailableError when no source can provide the files.
    """
    cname = canonical_name(name)
    if cname == "synth":  # procedural, nothing to fetch
        return data_dir(root)
    info = DATASETS[cname]
    dest = data_dir(root) / cname
    dest.mkdir(parents=True, exist_ok=True)
    raw_dir = dest / "raw"

    for split in ("train", "test"):
        out = dest / f"{split}.npz"
        if out.exists():
            continue
        pair = None
        if raw_dir.is_dir():
            if cname in ("mnist", "fashionmnist"):
                pair = _from_idx_raw(raw_dir, split)
            elif cname == "cifar10":
                pair = _from_cifar_batches(raw_dir, split)
        if pair is None:
            try:
                pair = _from_hub(cname, split)
            except Exception as exc:
                raise DatasetUnavailableError(
                    f"cannot fetch {cname}/{split}: no raw files under {raw_dir} "
                    f"and hub download failed ({exc})"
                ) from exc
        images, labels = pair
        if images.ndim == 3:
            images = images[..., None]
        n_expected = info.train_size if split == "train" else info.test_size
        if images.shape[0] != n_expected:
            raise DatasetUnavailableError(
                f"{cname}/{split}: source provided {images.shape[0]} examples, "
                f"expected {n_expected}"
            )
        tmp = out.with_suffix(".npz.tmp")
        with open(tmp, "wb") as f:
            np.savez_compressed(f, images=images, labels=labels)
        os.replace(tmp, out)
    return dest
