"""Experiment matrix runner with an append-only JSONL results store.

Every grid cell (dataset x alpha x clients x method x repeat) is keyed by
a digest of its coordinates; reruns skip cells whose key is already in the
store unless forced, and trained client bundles are cached on disk so the
methods sharing a bundle (fedavg, fedsyn, ablations) train clients once.
"""

from __future__ import annotations

import hashlib
import json
import statistics
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from filelock import FileLock

from . import viz
from .data import DatasetHandle, load_dataset
from .distillation import FedSynConfig, run_fedsyn, write_metrics_jsonl
from .ensemble import evaluate, fedavg_aggregate, load_bundle, save_bundle
from .generator_stage import GenLossWeights
from .local_training import train_all_clients
from .partition import dirichlet_partition

METHODS = ("fedavg", "fedsyn", "fedsyn_ce_only", "fedsyn_no_bn", "fedsyn_no_div")


@dataclass
class ExperimentSpec:
    dataset: str
    alphas: list[float]
    clients: list[int]
    archs: str | list[str]          # one id replicated, or one id per client
    methods: list[str]
    config: FedSynConfig = field(default_factory=FedSynConfig)
    repeats: int = 1
    seed_base: int = 0
    student_arch: str | None = None

    def __post_init__(self):
        if not self.alphas or not self.clients or not self.methods:
            raise ValueError("alphas, clients, and methods grids must be nonempty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; known: {METHODS}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def arch_list(self, m: int) -> list[str]:
        if isinstance(self.archs, str):
            return [self.archs] * m
        if len(self.archs) != m:
            raise ValueError(f"explicit arch list has {len(self.archs)} entries for m={m}")
        return list(self.archs)

    def resolved_student(self, m: int) -> str:
        return self.student_arch or self.arch_list(m)[0]


@dataclass
class ReportRow:
    dataset: str
    alpha: float
    m: int
    method: str
    archs: str
    repeats: int
    mean_acc: float
    std_acc: float | None
    mean_runtime_s: float


def method_weights(method: str, base: GenLossWeights) -> GenLossWeights:
    """Ablations are pure weight configurations of the one code path."""
    if method == "fedsyn":
        return base
    if method == "fedsyn_ce_only":
        return GenLossWeights(0.0, 0.0)
    if method == "fedsyn_no_bn":
        return GenLossWeights(0.0, base.lambda2)
    if method == "fedsyn_no_div":
        return GenLossWeights(base.lambda1, 0.0)
    raise ValueError(f"no generator weights for method {method!r}")


def _digest(payload: dict) -> str:
    return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def config_digest(cfg: FedSynConfig) -> str:
    d = asdict(cfg)
    d.pop("seed")
    d["local"].pop("seed")
    return _digest(d)


def cell_key(dataset: str, alpha: float, m: int, archs: list[str], method: str,
             seed: int, cfg: FedSynConfig) -> str:
    return _digest({
        "dataset": dataset, "alpha": alpha, "m": m, "archs": archs,
        "method": method, "seed": seed, "config": config_digest(cfg),
    })


class ResultsStore:
    """Append-only JSONL store guarded by a file lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.path) + ".lock")

    def append(self, record: dict) -> None:
        line = json.dumps(record)
        with self._lock:
            with open(self.path, "a") as f:
                f.write(line + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as f:
            return [json.loads(line) for line in f if line.strip()]

    def keys(self) -> set[str]:
        return {r["key"] for r in self.records()}


def _bundle_key(dataset: str, alpha: float, m: int, archs: list[str], seed: int,
                cfg: FedSynConfig) -> str:
    local = asdict(cfg.local)
    local.pop("seed")
    return _digest({
        "dataset": dataset, "alpha": alpha, "m": m, "archs": archs,
        "seed": seed, "local": local, "width_scale": cfg.width_scale,
    })


def _get_bundle(train: DatasetHandle, alpha: float, m: int, archs: list[str],
                seed: int, cfg: FedSynConfig, cache_dir: Path, workers: int):
    key = _bundle_key(train.name, alpha, m, archs, seed, cfg)
    cached = cache_dir / key
    if (cached / "bundle.json").exists():
        return load_bundle(cached), key
    plan = dirichlet_partition(train, alpha, m, seed)
    local_cfg = replace(cfg.local, seed=seed)
    bundle = train_all_clients(
        plan, train, archs, local_cfg, width_scale=cfg.width_scale, workers=workers
    )
    save_bundle(bundle, cached)
    return bundle, key


def run_cell(
    train: DatasetHandle,
    test: DatasetHandle,
    alpha: float,
    m: int,
    archs: list[str],
    method: str,
    student_arch: str,
    seed: int,
    cfg: FedSynConfig,
    bundle_cache: Path,
    traces_dir: Path | None = None,
    workers: int = 0,
) -> dict:
    """Execute one grid cell and return its store record."""
    t0 = time.perf_counter()
    cfg = replace(cfg, seed=seed, local=replace(cfg.local, seed=seed))
    bundle, bkey = _get_bundle(train, alpha, m, archs, seed, cfg, bundle_cache, workers)
    key = cell_key(train.name, alpha, m, archs, method, seed, cfg)

    if method == "fedavg":
        model = fedavg_aggregate(bundle)
        acc = evaluate(model, test)
        curve = [{"epoch": 0, "acc": acc}]
    else:
        run_cfg = replace(cfg, weights=method_weights(method, cfg.weights))
        result = run_fedsyn(bundle, student_arch, run_cfg, test=test)
        acc = result.final_accuracy()
        curve = [
            {"epoch": r["epoch"], "acc": r["acc"]}
            for r in result.trace
            if r.get("acc") is not None
        ]
        if traces_dir is not None:
            write_metrics_jsonl(result.trace, traces_dir / f"{key}.jsonl")

    return {
        "key": key,
        "status": "ok",
        "dataset": train.name,
        "alpha": alpha,
        "m": m,
        "archs": archs,
        "method": method,
        "student_arch": student_arch,
        "seed": seed,
        "config": config_digest(cfg),
        "bundle": bkey,
        "accuracy": acc,
        "curve": curve,
        "runtime_s": time.perf_counter() - t0,
    }


def run_matrix(
    spec: ExperimentSpec,
    store_path: str | Path,
    force: bool = False,
    data_root=None,
    workers: int = 0,
) -> list[ReportRow]:
    """Run every cell of the grid, appending to the store idempotently.

    A failing cell is recorded with its error and does not abort the rest.
    """
    store = ResultsStore(store_path)
    done = set() if force else store.keys()
    base = store.path.parent
    bundle_cache = base / "bundles"
    traces_dir = base / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)

    train = load_dataset(spec.dataset, "train", root=data_root)
    test = load_dataset(spec.dataset, "test", root=data_root)

    for alpha in spec.alphas:
        for m in spec.clients:
            archs = spec.arch_list(m)
            student = spec.resolved_student(m)
            for method in spec.methods:
                for rep in range(spec.repeats):
                    seed = spec.seed_base + rep
                    cfg = replace(spec.config, seed=seed)
                    key = cell_key(spec.dataset, alpha, m, archs, method, seed, cfg)
                    if key in done:
                        continue
                    try:
                        record = run_cell(
                            train, test, alpha, m, archs, method, student,
                            seed, spec.config, bundle_cache, traces_dir, workers,
                        )
                    except Exception as exc:
                        record = {
                            "key": key, "status": "failed",
                            "dataset": spec.dataset, "alpha": alpha, "m": m,
                            "archs": archs, "method": method, "seed": seed,
                            "error": f"{type(exc).__name__}: {exc}",
                            "traceback": traceback.format_exc(limit=8),
                        }
                    store.append(record)
                    done.add(key)
    return aggregate_rows(store.records())


def aggregate_rows(records: list[dict]) -> list[ReportRow]:
    """Mean/std accuracy per cell group; the last record wins per key."""
    latest: dict[str, dict] = {}
    for r in records:
        latest[r["key"]] = r
    groups: dict[tuple, list[dict]] = {}
    for r in latest.values():
        if r.get("status") != "ok":
            continue
        gkey = (r["dataset"], r["alpha"], r["m"], r["method"],
                ",".join(r["archs"]), r["config"])
        groups.setdefault(gkey, []).append(r)
    rows = []
    for (dataset, alpha, m, method, archs, _cfg), rs in sorted(groups.items()):
        accs = [r["accuracy"] for r in rs]
        rows.append(ReportRow(
            dataset=dataset, alpha=alpha, m=m, method=method, archs=archs,
            repeats=len(rs),
            mean_acc=statistics.fmean(accs),
            std_acc=statistics.stdev(accs) if len(accs) > 1 else None,
            mean_runtime_s=statistics.fmean(r["runtime_s"] for r in rs),
        ))
    return rows


def render_report(store_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Emit per-dataset method-by-alpha tables (txt + csv) and accuracy
    curve plots from a results store."""
    store = ResultsStore(store_path)
    records = store.records()
    if not records:
        raise ValueError(f"results store {store_path} is empty")
    rows = aggregate_rows(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    datasets = sorted({r.dataset for r in rows})
    for dataset in datasets:
        drows = [r for r in rows if r.dataset == dataset]
        alphas = sorted({r.alpha for r in drows})
        methods = sorted({r.method for r in drows})
        cell = {(r.method, r.alpha): r for r in drows}

        txt_lines = [f"dataset: {dataset}", ""]
        header = ["method"] + [f"alpha={a}" for a in alphas]
        txt_lines.append("  ".join(f"{h:>16}" for h in header))
        csv_lines = ["dataset,method,alpha,m,repeats,mean_acc,std_acc,mean_runtime_s"]
        for method in methods:
            cells = []
            for a in alphas:
                r = cell.get((method, a))
                if r is None:
                    cells.append("-")
                else:
                    s = f"{r.mean_acc * 100:.2f}"
                    if r.std_acc is not None:
                        s += f"±{r.std_acc * 100:.2f}"
                    cells.append(s)
                    csv_lines.append(
                        f"{dataset},{method},{a},{r.m},{r.repeats},"
                        f"{r.mean_acc!r},{'' if r.std_acc is None else repr(r.std_acc)},"
                        f"{r.mean_runtime_s!r}"
                    )
            txt_lines.append("  ".join(f"{c:>16}" for c in [method] + cells))
        txt_path = out / f"report_{dataset}.txt"
        txt_path.write_text("\n".join(txt_lines) + "\n")
        csv_path = out / f"report_{dataset}.csv"
        csv_path.write_text("\n".join(csv_lines) + "\n")
        written += [txt_path, csv_path]

        latest = {}
        for r in records:
            latest[r["key"]] = r
        curves = [
            r for r in latest.values()
            if r.get("status") == "ok" and r["dataset"] == dataset and len(r.get("curve", [])) > 1
        ]
        if curves:
            plot_path = out / f"curves_{dataset}.png"
            viz.save_accuracy_curves(curves, plot_path)
            written.append(plot_path)
    return written
