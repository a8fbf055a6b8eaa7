import numpy as np
import pytest
import torch
from torch import nn

from fedsyn import (
    DatasetHandle,
    EnsembleBundle,
    LocalTrainConfig,
    dirichlet_partition,
    load_dataset,
    train_all_clients,
)
from fedsyn.data import DatasetUnavailableError
from fedsyn.models import ClientModel, GeneratorModel


def dataset_available(name: str) -> bool:
    try:
        load_dataset(name, "test", fetch=False)
        return True
    except DatasetUnavailableError:
        return False


def require_dataset(name: str):
    return pytest.mark.skipif(
        not dataset_available(name),
        reason=f"{name} not cached locally; run `fedsyn fetch --dataset {name}`",
    )


def make_handle(
    n: int = 40,
    num_classes: int = 4,
    shape=(1, 8, 8),
    seed: int = 0,
    name: str = "unit",
    split: str = "train",
) -> DatasetHandle:
    g = torch.Generator().manual_seed(seed)
    images = torch.randn(n, *shape, generator=g)
    labels = torch.arange(n, dtype=torch.long) % num_classes
    return DatasetHandle(name, split, images, labels, num_classes)


class FlatLinearNet(nn.Module):
    """BN-free toy classifier: flatten then one linear layer."""

    def __init__(self, in_features: int, num_classes: int, seed: int = 0, bias: bool = True):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.fc = nn.Linear(in_features, num_classes, bias=bias)

    def forward(self, x):
        return self.fc(x.flatten(1))


class BNLinearNet(nn.Module):
    """Toy classifier with one BatchNorm1d layer for capture tests."""

    def __init__(self, in_features: int, num_classes: int, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.bn = nn.BatchNorm1d(in_features)
            self.fc = nn.Linear(in_features, num_classes)

    def forward(self, x):
        return self.fc(self.bn(x.flatten(1)))


class FlatGenNet(nn.Module):
    """Toy generator: one linear map from noise to a flat image."""

    def __init__(self, noise_dim: int, out_shape, seed: int = 0, bias: bool = True):
        super().__init__()
        self.out_shape = tuple(out_shape)
        numel = int(np.prod(out_shape))
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.fc = nn.Linear(noise_dim, numel, bias=bias)

    def forward(self, z):
        return self.fc(z).view(z.shape[0], *self.out_shape)


def toy_client(net: nn.Module, num_classes: int, input_shape, arch_id="toy") -> ClientModel:
    return ClientModel(
        arch_id=arch_id,
        num_classes=num_classes,
        net=net,
        input_shape=tuple(input_shape),
        seed=0,
    )


def toy_generator(net: FlatGenNet, noise_dim: int) -> GeneratorModel:
    return GeneratorModel(noise_dim=noise_dim, net=net, output_shape=net.out_shape)


def toy_bundle(num_clients=2, num_classes=3, input_shape=(1, 2, 2), seed=0, with_bn=True):
    in_features = int(np.prod(input_shape))
    clients = []
    for k in range(num_clients):
        cls = BNLinearNet if with_bn else FlatLinearNet
        net = cls(in_features, num_classes, seed=seed + k).double()
        clients.append(toy_client(net, num_classes, input_shape))
    return EnsembleBundle(
        clients=clients,
        sizes=[10 * (k + 1) for k in range(num_clients)],
        dataset="unit",
        num_classes=num_classes,
    )


@pytest.fixture(scope="session")
def synth_train():
    return load_dataset("synth", "train")


@pytest.fixture(scope="session")
def synth_test():
    return load_dataset("synth", "test")


@pytest.fixture(scope="session")
def synth_bundle(synth_train):
    """Three small trained clients on synth shards (shared, read-only)."""
    plan = dirichlet_partition(synth_train, 0.5, 3, seed=7)
    cfg = LocalTrainConfig(epochs=2, batch_size=64, lr=0.05, seed=7)
    return train_all_clients(plan, synth_train, ["cnn2"] * 3, cfg, width_scale=0.25)


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
