import csv
import json

import pytest

from fedsyn import (
    ExperimentSpec,
    FedSynConfig,
    GenLossWeights,
    LocalTrainConfig,
    render_report,
    run_matrix,
)
from fedsyn.harness import (
    ResultsStore,
    aggregate_rows,
    cell_key,
    config_digest,
    method_weights,
)


def _spec(**kw) -> ExperimentSpec:
    base = dict(
        dataset="synth",
        alphas=[0.5],
        clients=[2],
        archs="cnn2",
        methods=["fedsyn"],
        config=FedSynConfig(
            epochs=2, t_g=1, t_s=1, batch_size=16, lr_s=0.05, noise_dim=16,
            width_scale=0.25, eval_every=1,
            local=LocalTrainConfig(epochs=1, batch_size=64),
        ),
        repeats=1,
        seed_base=0,
    )
    base.update(kw)
    return ExperimentSpec(**base)


def test_spec_validation():
    with pytest.raises(ValueError):
        _spec(methods=["gradient_marching"])
    with pytest.raises(ValueError):
        _spec(alphas=[])
    with pytest.raises(ValueError):
        _spec(repeats=0)
    spec = _spec(archs=["cnn1", "cnn2"])
    assert spec.arch_list(2) == ["cnn1", "cnn2"]
    with pytest.raises(ValueError):
        spec.arch_list(3)


def test_method_weights_are_pure_config():
    base = GenLossWeights(2.0, 0.8)
    assert method_weights("fedsyn", base) == base
    assert method_weights("fedsyn_ce_only", base) == GenLossWeights(0.0, 0.0)
    assert method_weights("fedsyn_no_bn", base) == GenLossWeights(0.0, 0.8)
    assert method_weights("fedsyn_no_div", base) == GenLossWeights(2.0, 0.0)


def test_config_digest_ignores_seed():
    a = FedSynConfig(seed=1)
    b = FedSynConfig(seed=99)
    c = FedSynConfig(seed=1, t_g=31)
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(c)


def test_cell_key_separates_coordinates():
    cfg = FedSynConfig()
    k1 = cell_key("synth", 0.5, 2, ["cnn2", "cnn2"], "fedsyn", 0, cfg)
    k2 = cell_key("synth", 0.5, 2, ["cnn2", "cnn2"], "fedavg", 0, cfg)
    k3 = cell_key("synth", 0.1, 2, ["cnn2", "cnn2"], "fedsyn", 0, cfg)
    k4 = cell_key("synth", 0.5, 2, ["cnn2", "cnn2"], "fedsyn", 1, cfg)
    assert len({k1, k2, k3, k4}) == 4


def test_store_is_append_only(tmp_path):
    store = ResultsStore(tmp_path / "results.jsonl")
    store.append({"key": "a", "x": 1})
    store.append({"key": "b", "x": 2})
    recs = store.records()
    assert [r["key"] for r in recs] == ["a", "b"]
    store.append({"key": "a", "x": 3})
    recs = store.records()
    assert len(recs) == 3  # superseding rows append, never mutate


def test_matrix_single_cell_matches_direct_run(tmp_path, synth_train, synth_test):
    spec = _spec()
    rows = run_matrix(spec, tmp_path / "results.jsonl")
    assert len(rows) == 1
    row = rows[0]
    assert row.method == "fedsyn" and row.repeats == 1

    from dataclasses import replace

    from fedsyn import dirichlet_partition, run_fedsyn, train_all_clients

    cfg = replace(spec.config, seed=0, local=replace(spec.config.local, seed=0))
    plan = dirichlet_partition(synth_train, 0.5, 2, 0)
    bundle = train_all_clients(plan, synth_train, ["cnn2", "cnn2"], cfg.local,
                               width_scale=cfg.width_scale)
    direct = run_fedsyn(bundle, "cnn2", cfg, test=synth_test)
    assert row.mean_acc == pytest.approx(direct.final_accuracy())


def test_matrix_rerun_is_idempotent(tmp_path):
    spec = _spec()
    store_path = tmp_path / "results.jsonl"
    run_matrix(spec, store_path)
    first = store_path.read_text()
    rows = run_matrix(spec, store_path)  # no new work, identical store
    assert store_path.read_text() == first
    assert len(rows) == 1


def test_matrix_force_appends_new_rows(tmp_path):
    spec = _spec()
    store_path = tmp_path / "results.jsonl"
    run_matrix(spec, store_path)
    n1 = len(ResultsStore(store_path).records())
    run_matrix(spec, store_path, force=True)
    n2 = len(ResultsStore(store_path).records())
    assert n2 == n1 + 1
    # aggregation still sees one logical row per cell
    assert len(aggregate_rows(ResultsStore(store_path).records())) == 1


def test_matrix_records_partial_failures(tmp_path):
    # fedavg over heterogeneous archs fails; the fedsyn cell still runs
    spec = _spec(archs=["cnn1", "cnn2"], methods=["fedavg", "fedsyn"])
    rows = run_matrix(spec, tmp_path / "results.jsonl")
    records = ResultsStore(tmp_path / "results.jsonl").records()
    by_method = {r["method"]: r for r in records}
    assert by_method["fedavg"]["status"] == "failed"
    assert "architecture" in by_method["fedavg"]["error"]
    assert by_method["fedsyn"]["status"] == "ok"
    assert [r.method for r in rows] == ["fedsyn"]


def test_matrix_repeats_produce_mean_and_std(tmp_path):
    spec = _spec(repeats=2, methods=["fedavg"])
    rows = run_matrix(spec, tmp_path / "results.jsonl")
    assert len(rows) == 1
    assert rows[0].repeats == 2
    assert rows[0].std_acc is not None


def test_report_rendering_and_csv_round_trip(tmp_path):
    spec = _spec(methods=["fedavg", "fedsyn"])
    store_path = tmp_path / "results.jsonl"
    rows = run_matrix(spec, store_path)
    written = render_report(store_path, tmp_path / "report")
    names = {p.name for p in written}
    assert "report_synth.txt" in names
    assert "report_synth.csv" in names
    assert "curves_synth.png" in names

    with open(tmp_path / "report" / "report_synth.csv") as f:
        loaded = list(csv.DictReader(f))
    by_method = {r["method"]: r for r in loaded}
    for row in rows:
        assert float(by_method[row.method]["mean_acc"]) == row.mean_acc

    # every eval event appears in the stored curve, epochs increasing
    for rec in ResultsStore(store_path).records():
        if rec["method"] == "fedsyn":
            epochs = [p["epoch"] for p in rec["curve"]]
            assert epochs == sorted(epochs)
            assert len(epochs) == 2  # eval_every=1, epochs=2


def test_report_empty_store_rejected(tmp_path):
    store = tmp_path / "none.jsonl"
    store.touch()
    with pytest.raises(ValueError):
        render_report(store, tmp_path / "out")


def test_bundle_cache_shared_between_methods(tmp_path):
    spec = _spec(methods=["fedavg", "fedsyn", "fedsyn_ce_only"])
    store_path = tmp_path / "results.jsonl"
    run_matrix(spec, store_path)
    bundles = list((tmp_path / "bundles").iterdir())
    assert len(bundles) == 1  # one bundle feeds all three methods
    records = ResultsStore(store_path).records()
    assert len({r["bundle"] for r in records}) == 1
