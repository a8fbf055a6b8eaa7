import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsyn import dirichlet_partition, load_plan, partition_summary, save_plan
from fedsyn.partition import PartitionError, _largest_remainder_counts

from conftest import make_handle, require_dataset


class TestLargestRemainder:
    def test_exact_total(self):
        counts = _largest_remainder_counts(np.array([0.5, 0.3, 0.2]), 10)
        assert counts.tolist() == [5, 3, 2]

    def test_remainder_goes_to_largest_fraction(self):
        counts = _largest_remainder_counts(np.array([0.55, 0.45]), 9)
        # 4.95 and 4.05 -> floor 4/4, remainder to index 0
        assert counts.tolist() == [5, 4]

    def test_ties_break_to_lowest_index(self):
        counts = _largest_remainder_counts(np.array([0.25, 0.25, 0.25, 0.25]), 5)
        assert counts.tolist() == [2, 1, 1, 1]

    @given(
        props=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=12),
        total=st.integers(0, 500),
    )
    @settings(max_examples=200, deadline=None)
    def test_conservation_property(self, props, total):
        p = np.asarray(props)
        p = p / p.sum()
        counts = _largest_remainder_counts(p, total)
        assert counts.sum() == total
        assert (counts >= 0).all()


def test_single_client_takes_everything():
    data = make_handle(n=50, num_classes=5)
    plan = dirichlet_partition(data, alpha=0.3, num_clients=1, seed=0)
    assert plan.client_sizes == [50]
    assert np.array_equal(plan.assignments[0], np.arange(50))


def test_conservation_and_disjointness():
    data = make_handle(n=200, num_classes=10, seed=3)
    plan = dirichlet_partition(data, alpha=0.5, num_clients=5, seed=11)
    merged = np.concatenate(plan.assignments)
    assert len(merged) == 200
    assert len(np.unique(merged)) == 200
    assert plan.total() == 200
    assert plan.client_sizes == [len(a) for a in plan.assignments]


def test_determinism_and_seed_sensitivity():
    data = make_handle(n=120, num_classes=6, seed=1)
    a = dirichlet_partition(data, 0.4, 4, seed=5)
    b = dirichlet_partition(data, 0.4, 4, seed=5)
    c = dirichlet_partition(data, 0.4, 4, seed=6)
    assert all(np.array_equal(x, y) for x, y in zip(a.assignments, b.assignments))
    assert any(not np.array_equal(x, y) for x, y in zip(a.assignments, c.assignments))


def test_invalid_parameters_rejected():
    data = make_handle()
    with pytest.raises(ValueError):
        dirichlet_partition(data, alpha=0.0, num_clients=2, seed=0)
    with pytest.raises(ValueError):
        dirichlet_partition(data, alpha=-1.0, num_clients=2, seed=0)
    with pytest.raises(ValueError):
        dirichlet_partition(data, alpha=1.0, num_clients=0, seed=0)


def test_empty_client_retries_then_fails():
    # 2 examples cannot feed 40 clients, every draw leaves empties
    data = make_handle(n=2, num_classes=1)
    with pytest.raises(PartitionError):
        dirichlet_partition(data, alpha=0.1, num_clients=40, seed=0)


def test_summary_matches_sizes_and_total():
    data = make_handle(n=300, num_classes=10, seed=2)
    plan = dirichlet_partition(data, 0.2, 6, seed=9)
    hist = partition_summary(plan, data)
    assert hist.shape == (6, 10)
    assert (hist >= 0).all()
    assert hist.sum() == 300
    assert hist.sum(axis=1).tolist() == plan.client_sizes


def test_summary_single_client_is_global_histogram():
    data = make_handle(n=77, num_classes=7, seed=4)
    plan = dirichlet_partition(data, 1.0, 1, seed=0)
    hist = partition_summary(plan, data)
    assert hist[0].tolist() == data.class_histogram().tolist()


def _mean_max_class_share(data, alpha, m, seed):
    hist = partition_summary(dirichlet_partition(data, alpha, m, seed), data)
    shares = hist.max(axis=1) / np.maximum(hist.sum(axis=1), 1)
    return shares.mean()


def test_skew_monotone_in_alpha_monte_carlo():
    """Smaller alpha concentrates classes: the expected per-client max-class
    share is non-increasing in alpha (100-seed Monte Carlo)."""
    data = make_handle(n=1000, num_classes=10, seed=0)
    seeds = range(100)
    means = {
        alpha: np.mean([_mean_max_class_share(data, alpha, 5, s) for s in seeds])
        for alpha in (0.1, 1.0, 100.0)
    }
    assert means[0.1] > means[1.0] > means[100.0]
    assert means[0.1] > means[100.0] + 0.1  # strictly, with margin


@require_dataset("cifar10")
def test_low_alpha_plan_is_visibly_skewed_on_cifar10():
    from fedsyn import load_dataset

    data = load_dataset("cifar10", "train")
    plan = dirichlet_partition(data, 0.1, 5, seed=0)
    hist = partition_summary(plan, data)
    # highly skewed rows: some client is missing some class entirely
    assert (hist == 0).any()
    assert hist.sum() == 50000


def test_plan_json_round_trip(tmp_path):
    data = make_handle(n=60, num_classes=3, seed=8)
    plan = dirichlet_partition(data, 0.7, 3, seed=21)
    path = tmp_path / "plan.json"
    save_plan(plan, path)
    loaded = load_plan(path)
    assert loaded.alpha == plan.alpha
    assert loaded.num_clients == plan.num_clients
    assert loaded.seed == plan.seed
    assert all(np.array_equal(a, b) for a, b in zip(loaded.assignments, plan.assignments))

    import json

    payload = json.loads(path.read_text())
    assert set(payload) == {"alpha", "num_clients", "seed", "assignments"}


def test_summary_rejects_mismatched_plan():
    data = make_handle(n=10, num_classes=2)
    plan = dirichlet_partition(data, 1.0, 2, seed=0)
    small = make_handle(n=4, num_classes=2)
    with pytest.raises(PartitionError, match="outside"):
        partition_summary(plan, small)
