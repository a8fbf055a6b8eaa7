import numpy as np
import pytest
import torch
from torch import nn

from fedsyn import (
    DatasetHandle,
    LocalTrainConfig,
    dirichlet_partition,
    local_update,
    register_local_loss,
    train_all_clients,
)
from fedsyn.local_training import EmptyShardError, TrainingDivergedError
from fedsyn.models import flatten_state
from fedsyn.partition import PartitionPlan

from conftest import FlatLinearNet, BNLinearNet, make_handle, toy_client
from reference import central_difference_grads, ref_ce_loss


def _shard(xs, ys, shape=(1, 1, 1), num_classes=2, dtype=torch.float32):
    images = torch.tensor(xs, dtype=dtype).view(-1, *shape)
    labels = torch.tensor(ys, dtype=torch.long)
    return DatasetHandle("unit", "train", images, labels, num_classes)


def test_config_validation():
    with pytest.raises(ValueError):
        LocalTrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        LocalTrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        LocalTrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        LocalTrainConfig(momentum=1.0)


def test_zero_epochs_is_a_no_op():
    model = toy_client(FlatLinearNet(1, 2, seed=0), 2, (1, 1, 1))
    before = flatten_state(model).clone()
    _, trace = local_update(model, _shard([0.5, -1.0], [1, 0]), LocalTrainConfig(epochs=0))
    assert trace == []
    assert torch.equal(flatten_state(model), before)


def test_empty_shard_rejected():
    model = toy_client(FlatLinearNet(1, 2, seed=0), 2, (1, 1, 1))
    empty = _shard([], [])
    with pytest.raises(EmptyShardError):
        local_update(model, empty, LocalTrainConfig(epochs=1))


def test_labels_outside_model_range_rejected():
    model = toy_client(FlatLinearNet(1, 2, seed=0), 2, (1, 1, 1))
    bad = DatasetHandle(
        "unit", "train", torch.randn(3, 1, 1, 1), torch.tensor([0, 1, 5]), 6
    )
    with pytest.raises(ValueError):
        local_update(model, bad, LocalTrainConfig(epochs=1))


def test_unknown_loss_id_rejected():
    model = toy_client(FlatLinearNet(1, 2, seed=0), 2, (1, 1, 1))
    with pytest.raises(ValueError):
        local_update(model, _shard([1.0], [0]), LocalTrainConfig(epochs=1, loss_id="focal"))


def test_one_sgd_step_matches_finite_difference_oracle():
    """Single full-batch step on a 2-parameter logistic model: the update
    must equal lr times the central-difference gradient of the loss."""
    xs = [0.8, -0.4, 1.5, -2.0, 0.3]
    ys = [1, 0, 1, 0, 1]
    net = FlatLinearNet(1, 2, seed=5, bias=False).double()
    model = toy_client(net, 2, (1, 1, 1))
    shard = _shard(xs, ys, dtype=torch.float64)
    lr = 0.25
    w_before = net.fc.weight.detach().clone()

    def loss_at_current_params():
        w = net.fc.weight.detach().numpy()
        logits = np.array([[w[0, 0] * x, w[1, 0] * x] for x in xs])
        y_onehot = np.eye(2)[ys]
        return ref_ce_loss(logits, y_onehot)

    (fd_grad,) = central_difference_grads(loss_at_current_params, [net.fc.weight])

    cfg = LocalTrainConfig(epochs=1, batch_size=len(xs), lr=lr, momentum=0.0)
    local_update(model, shard, cfg)
    expected = w_before.numpy() - lr * fd_grad
    np.testing.assert_allclose(net.fc.weight.detach().numpy(), expected, rtol=1e-5)


def test_one_step_gradient_on_small_mlp():
    """Finite-difference check over every parameter of a <=50 parameter MLP."""

    class TinyMLP(nn.Module):
        def __init__(self):
            super().__init__()
            with torch.random.fork_rng():
                torch.manual_seed(2)
                self.f1 = nn.Linear(2, 4)
                self.f2 = nn.Linear(4, 2)

        def forward(self, x):
            return self.f2(torch.tanh(self.f1(x.flatten(1))))

    net = TinyMLP().double()
    assert sum(p.numel() for p in net.parameters()) <= 50
    model = toy_client(net, 2, (1, 1, 2))
    g = torch.Generator().manual_seed(0)
    images = torch.randn(6, 1, 1, 2, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1, 0, 1, 1, 0])
    shard = DatasetHandle("unit", "train", images, labels, 2)

    params = list(net.parameters())
    before = [p.detach().clone() for p in params]
    ce = nn.CrossEntropyLoss()

    def loss_now():
        with torch.no_grad():
            return float(ce(net(images), labels))

    fd = central_difference_grads(loss_now, params, h=1e-6)
    lr = 0.1
    local_update(model, shard, LocalTrainConfig(epochs=1, batch_size=6, lr=lr, momentum=0.0))
    for p, b, g_fd in zip(params, before, fd):
        step = (b - p.detach()).numpy() / lr
        np.testing.assert_allclose(step, g_fd, rtol=1e-4, atol=1e-9)


def test_descent_on_separable_toy():
    g = torch.Generator().manual_seed(1)
    n = 60
    x0 = torch.randn(n // 2, generator=g) - 2.0
    x1 = torch.randn(n // 2, generator=g) + 2.0
    shard = _shard(
        torch.cat([x0, x1]).tolist(), [0] * (n // 2) + [1] * (n // 2)
    )
    model = toy_client(FlatLinearNet(1, 2, seed=3), 2, (1, 1, 1))
    _, trace = local_update(model, shard, LocalTrainConfig(epochs=20, batch_size=16, lr=0.1))
    assert len(trace) == 20
    assert all(np.isfinite(trace))
    assert trace[-1] < trace[0]


def test_bn_running_stats_update_during_training():
    model = toy_client(BNLinearNet(4, 2, seed=0), 2, (1, 2, 2))
    shard = DatasetHandle(
        "unit", "train", torch.randn(32, 1, 2, 2) + 3.0, torch.zeros(32, dtype=torch.long), 2
    )
    before = model.net.bn.running_mean.clone()
    local_update(model, shard, LocalTrainConfig(epochs=1, batch_size=8))
    assert not torch.equal(model.net.bn.running_mean, before)


def test_non_finite_loss_aborts_with_diagnostic():
    model = toy_client(FlatLinearNet(1, 2, seed=0), 2, (1, 1, 1))
    model.net.fc.weight.data[0, 0] = float("inf")
    shard = _shard([100.0, -100.0, 50.0, -50.0], [1, 0, 1, 0])
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        local_update(model, shard, LocalTrainConfig(epochs=5, batch_size=2))


def test_custom_loss_hook_is_used():
    calls = []

    def factory(num_classes, counts):
        assert num_classes == 2
        assert int(counts.sum()) == 4

        def fn(logits, labels):
            calls.append(1)
            return nn.functional.cross_entropy(logits, labels)

        return fn

    register_local_loss("counting_ce", factory)
    model = toy_client(FlatLinearNet(1, 2, seed=0), 2, (1, 1, 1))
    local_update(
        model,
        _shard([1.0, -1.0, 2.0, -2.0], [1, 0, 1, 0]),
        LocalTrainConfig(epochs=2, batch_size=2, loss_id="counting_ce"),
    )
    assert len(calls) == 4  # 2 epochs x 2 batches


# ---------------------------------------------------------------------------
# train_all_clients
# ---------------------------------------------------------------------------

def test_single_client_bundle_equals_direct_call(synth_train):
    plan = dirichlet_partition(synth_train, 1.0, 1, seed=0)
    cfg = LocalTrainConfig(epochs=1, batch_size=64, seed=4)
    bundle = train_all_clients(plan, synth_train, ["cnn2"], cfg, width_scale=0.25)

    from fedsyn import build_model

    direct = build_model("cnn2", 10, 4, input_shape=synth_train.input_shape,
                         width_scale=0.25, dataset="synth")
    local_update(direct, synth_train.select(plan.assignments[0]), cfg)
    assert torch.equal(flatten_state(bundle.clients[0]), flatten_state(direct))
    assert bundle.sizes == plan.client_sizes


def test_train_all_clients_deterministic(synth_train):
    plan = dirichlet_partition(synth_train, 0.7, 2, seed=1)
    cfg = LocalTrainConfig(epochs=1, batch_size=64, seed=0)
    a = train_all_clients(plan, synth_train, ["cnn2", "cnn2"], cfg, width_scale=0.25)
    b = train_all_clients(plan, synth_train, ["cnn2", "cnn2"], cfg, width_scale=0.25)
    for ca, cb in zip(a.clients, b.clients):
        assert torch.equal(flatten_state(ca), flatten_state(cb))
    # distinct per-client seeds: clients differ from each other
    assert not torch.equal(flatten_state(a.clients[0]), flatten_state(a.clients[1]))


def test_identical_seed_and_shard_give_identical_models(synth_train):
    shard = synth_train.select(range(128))
    cfg = LocalTrainConfig(epochs=1, batch_size=32, seed=9)
    from fedsyn import build_model

    results = []
    for _ in range(2):
        model = build_model("cnn2", 10, 9, input_shape=synth_train.input_shape,
                            width_scale=0.25)
        local_update(model, shard, cfg)
        results.append(flatten_state(model))
    assert torch.equal(results[0], results[1])


def test_arch_assignment_length_checked(synth_train):
    plan = dirichlet_partition(synth_train, 0.7, 2, seed=1)
    with pytest.raises(ValueError):
        train_all_clients(plan, synth_train, ["cnn2"], LocalTrainConfig(epochs=0))


def test_empty_client_shard_rejected(synth_train):
    plan = PartitionPlan(
        alpha=1.0, num_clients=2, seed=0,
        assignments=[np.arange(10), np.empty(0, dtype=np.int64)],
    )
    with pytest.raises(EmptyShardError):
        train_all_clients(plan, synth_train, ["cnn2", "cnn2"], LocalTrainConfig(epochs=1))


@pytest.mark.slow
def test_serial_and_parallel_bit_identical(synth_train):
    plan = dirichlet_partition(synth_train, 0.8, 3, seed=2)
    cfg = LocalTrainConfig(epochs=1, batch_size=64, seed=1)
    archs = ["cnn2", "cnn2", "cnn1"]
    serial = train_all_clients(plan, synth_train, archs, cfg, width_scale=0.25, workers=0)
    parallel = train_all_clients(plan, synth_train, archs, cfg, width_scale=0.25, workers=3)
    for cs, cp in zip(serial.clients, parallel.clients):
        assert torch.equal(flatten_state(cs), flatten_state(cp))
