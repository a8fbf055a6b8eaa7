"""Model zoo: client classifiers, the image generator, and BN introspection.

All classifiers expose raw logits (no softmax) and carry ordinary
``nn.BatchNorm2d`` layers whose running statistics are the per-client
distribution summary used by the synthesis stage. ``width_scale`` shrinks
every channel count proportionally for desk-scale runs.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .data import dataset_info


class UnknownArchitectureError(ValueError):
    pass


def _scaled(channels: int, scale: float) -> int:
    return max(4, int(round(channels * scale)))


def _conv_block(in_c: int, out_c: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_c, out_c, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_c),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class CNN1(nn.Module):
    """Three conv-BN-ReLU-pool blocks (32/64/128 channels) and a linear head."""

    def __init__(self, num_classes: int, in_channels: int, image_size: int, scale: float = 1.0):
        super().__init__()
        c1, c2, c3 = _scaled(32, scale), _scaled(64, scale), _scaled(128, scale)
        self.features = nn.Sequential(
            _conv_block(in_channels, c1),
            _conv_block(c1, c2),
            _conv_block(c2, c3),
        )
        spatial = image_size // 8
        self.head = nn.Linear(c3 * spatial * spatial, num_classes)

    def forward(self, x):
        x = self.features(x)
        return self.head(x.flatten(1))


class CNN2(nn.Module):
    """Two conv blocks (16/32 channels) followed by two linear layers."""

    def __init__(self, num_classes: int, in_channels: int, image_size: int, scale: float = 1.0):
        super().__init__()
        c1, c2 = _scaled(16, scale), _scaled(32, scale)
        hidden = _scaled(64, scale)
        self.features = nn.Sequential(_conv_block(in_channels, c1), _conv_block(c1, c2))
        spatial = image_size // 4
        self.classifier = nn.Sequential(
            nn.Linear(c2 * spatial * spatial, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, num_classes),
        )

    def forward(self, x):
        x = self.features(x)
        return self.classifier(x.flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, in_c: int, out_c: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_c, out_c, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_c)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_c)
        if stride != 1 or in_c != out_c:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_c, out_c, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_c),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """ResNet-18 with the 3x3 stem used for 28/32-pixel inputs."""

    def __init__(self, num_classes: int, in_channels: int, scale: float = 1.0):
        super().__init__()
        w = _scaled(64, scale)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, padding=1, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
        )
        self.layers = nn.Sequential(
            self._stage(w, w, stride=1),
            self._stage(w, 2 * w, stride=2),
            self._stage(2 * w, 4 * w, stride=2),
            self._stage(4 * w, 8 * w, stride=2),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(8 * w, num_classes)

    @staticmethod
    def _stage(in_c: int, out_c: int, stride: int) -> nn.Sequential:
        return nn.Sequential(BasicBlock(in_c, out_c, stride), BasicBlock(out_c, out_c))

    def forward(self, x):
        x = self.layers(self.stem(x))
        return self.fc(self.pool(x).flatten(1))


class PreActBlock(nn.Module):
    def __init__(self, in_c: int, out_c: int, stride: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_c)
        self.conv1 = nn.Conv2d(in_c, out_c, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_c)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1, bias=False)
        self.matched = stride == 1 and in_c == out_c
        if not self.matched:
            self.shortcut = nn.Conv2d(in_c, out_c, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        shortcut = x if self.matched else self.shortcut(out)
        out = self.conv2(F.relu(self.bn2(self.conv1(out))))
        return out + shortcut


class WideResNet(nn.Module):
    """WRN-depth-widen with pre-activation blocks; depth must be 6n+4."""

    def __init__(
        self,
        depth: int,
        widen: int,
        num_classes: int,
        in_channels: int,
        scale: float = 1.0,
    ):
        super().__init__()
        if (depth - 4) % 6 != 0:
            raise ValueError(f"WRN depth must be 6n+4, got {depth}")
        n = (depth - 4) // 6
        widths = [_scaled(16, scale)] + [_scaled(16 * widen * 2**i, scale) for i in range(3)]
        self.conv0 = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        # three groups of n blocks; the first block of a group downsamples
        self.groups = nn.Sequential()
        in_c = widths[0]
        for i, stride in enumerate((1, 2, 2)):
            blocks = []
            for j in range(n):
                blocks.append(PreActBlock(in_c, widths[i + 1], stride if j == 0 else 1))
                in_c = widths[i + 1]
            self.groups.append(nn.Sequential(*blocks))
        self.bn_final = nn.BatchNorm2d(in_c)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(in_c, num_classes)

    def forward(self, x):
        x = self.groups(self.conv0(x))
        x = F.relu(self.bn_final(x))
        return self.fc(self.pool(x).flatten(1))


class ImageGenerator(nn.Module):
    """Noise-to-image generator: linear projection then two upsampling conv
    stages, ending in tanh plus a non-affine BN that squashes outputs into
    the normalized-image value range."""

    def __init__(self, noise_dim: int, out_shape: tuple[int, int, int], scale: float = 1.0):
        super().__init__()
        c, h, w = out_shape
        if h % 4 or w % 4:
            raise ValueError(f"output height/width must be divisible by 4, got {h}x{w}")
        base = _scaled(128, scale)
        half = _scaled(64, scale)
        self.init_hw = (h // 4, w // 4)
        self.base = base
        self.l1 = nn.Linear(noise_dim, base * self.init_hw[0] * self.init_hw[1])
        self.block0 = nn.BatchNorm2d(base)
        self.block1 = nn.Sequential(
            nn.Conv2d(base, base, 3, padding=1),
            nn.BatchNorm2d(base),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(base, half, 3, padding=1),
            nn.BatchNorm2d(half),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(half, c, 3, padding=1),
            nn.Tanh(),
            nn.BatchNorm2d(c, affine=False),
        )

    def forward(self, z):
        out = self.l1(z).view(z.shape[0], self.base, *self.init_hw)
        out = F.interpolate(self.block0(out), scale_factor=2)
        out = F.interpolate(self.block1(out), scale_factor=2)
        return self.block2(out)


ARCHITECTURES = {
    "resnet18": lambda nc, ic, size, s: ResNet18(nc, ic, s),
    "cnn1": lambda nc, ic, size, s: CNN1(nc, ic, size, s),
    "cnn2": lambda nc, ic, size, s: CNN2(nc, ic, size, s),
    "wrn16_1": lambda nc, ic, size, s: WideResNet(16, 1, nc, ic, s),
    "wrn40_1": lambda nc, ic, size, s: WideResNet(40, 1, nc, ic, s),
}


@dataclass
class ClientModel:
    """A classifier plus the metadata needed to rebuild and aggregate it."""

    arch_id: str
    num_classes: int
    net: nn.Module
    input_shape: tuple[int, int, int]
    seed: int
    width_scale: float = 1.0
    dataset: str = ""


@dataclass
class GeneratorModel:
    noise_dim: int
    net: nn.Module
    output_shape: tuple[int, int, int]
    width_scale: float = 1.0


def build_model(
    arch_id: str,
    num_classes: int,
    seed: int,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    width_scale: float = 1.0,
    dataset: str = "",
) -> ClientModel:
    """Freshly initialized classifier; bit-identical for identical seeds."""
    if arch_id not in ARCHITECTURES:
        raise UnknownArchitectureError(
            f"unknown architecture {arch_id!r}; available: {sorted(ARCHITECTURES)}"
        )
    c, h, w = input_shape
    if h != w:
        raise ValueError(f"only square inputs supported, got {input_shape}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ARCHITECTURES[arch_id](num_classes, c, h, width_scale)
    net.eval()
    return ClientModel(
        arch_id=arch_id,
        num_classes=num_classes,
        net=net,
        input_shape=tuple(input_shape),
        seed=seed,
        width_scale=width_scale,
        dataset=dataset,
    )


def build_generator(
    noise_dim: int,
    output_shape: tuple[int, int, int],
    seed: int,
    width_scale: float = 1.0,
) -> GeneratorModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ImageGenerator(noise_dim, output_shape, width_scale)
    net.eval()
    return GeneratorModel(
        noise_dim=noise_dim,
        net=net,
        output_shape=tuple(output_shape),
        width_scale=width_scale,
    )


def generate(gen: GeneratorModel, z: torch.Tensor) -> torch.Tensor:
    """Decode a noise batch in inference mode (deterministic, no grads)."""
    if z.ndim != 2 or z.shape[1] != gen.noise_dim:
        raise ValueError(f"noise must be (b, {gen.noise_dim}), got {tuple(z.shape)}")
    if z.shape[0] == 0:
        return torch.empty(0, *gen.output_shape)
    gen.net.eval()
    with torch.no_grad():
        return gen.net(z)


# ---------------------------------------------------------------------------
# BN statistics
# ---------------------------------------------------------------------------

@dataclass
class LayerStats:
    name: str
    mean: torch.Tensor
    var: torch.Tensor


@dataclass
class BatchStatsCapture:
    """Per-BN-layer batch mean/variance observed during one forward pass."""

    layers: list[LayerStats] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)


def bn_module_names(net: nn.Module) -> list[str]:
    return [n for n, m in net.named_modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def stored_bn_stats(model: ClientModel) -> list[LayerStats]:
    """The running mean/variance buffers of every BN layer, in module order."""
    out = []
    for name, mod in model.net.named_modules():
        if isinstance(mod, nn.modules.batchnorm._BatchNorm):
            out.append(LayerStats(name, mod.running_mean.detach(), mod.running_var.detach()))
    return out


def _batch_stats(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    # channel dim is 1; population (biased) variance, matching what BN itself
    # normalizes with during training
    dims = (0,) + tuple(range(2, x.dim()))
    return x.mean(dim=dims), x.var(dim=dims, unbiased=False)


@contextmanager
def bn_capture(net: nn.Module):
    """Record batch statistics at every BN layer's input during forwards.

    The captured tensors stay attached to the autograd graph so losses on
    them can backpropagate into whatever produced the batch.
    """
    capture = BatchStatsCapture()
    recorded: dict[str, LayerStats] = {}
    handles = []

    def make_hook(name):
        def hook(_module, inputs):
            mean, var = _batch_stats(inputs[0])
            recorded[name] = LayerStats(name, mean, var)

        return hook

    names = bn_module_names(net)
    modules = dict(net.named_modules())
    for name in names:
        handles.append(modules[name].register_forward_pre_hook(make_hook(name)))
    try:
        yield capture
    finally:
        for h in handles:
            h.remove()
        capture.layers = [recorded[n] for n in names if n in recorded]


def forward_logits(
    model: ClientModel,
    batch: torch.Tensor,
    capture_stats: bool = False,
) -> tuple[torch.Tensor, BatchStatsCapture | None]:
    """Inference-mode logits, optionally with BN input statistics.

    Running statistics are used for normalization (the model is put in eval
    mode); the capture reports the batch's own mean/variance at each BN
    layer's input during this same pass.
    """
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ValueError(
            f"batch shape {tuple(batch.shape[1:])} does not match model input "
            f"{model.input_shape}"
        )
    model.net.eval()
    if not capture_stats:
        return model.net(batch), None
    with bn_capture(model.net) as cap:
        logits = model.net(batch)
    return logits, cap


# ---------------------------------------------------------------------------
# Parameter flattening and checkpoints
# ---------------------------------------------------------------------------

def flatten_state(model: ClientModel) -> torch.Tensor:
    """All state (parameters and buffers) as one float32 vector, in
    state_dict key order. Integer buffers are exactly representable."""
    parts = [t.detach().reshape(-1).to(torch.float32) for t in model.net.state_dict().values()]
    return torch.cat(parts) if parts else torch.empty(0)


def load_flat_state(model: ClientModel, vector: torch.Tensor) -> None:
    sd = model.net.state_dict()
    total = sum(t.numel() for t in sd.values())
    if vector.numel() != total:
        raise ValueError(f"flat vector has {vector.numel()} entries, model needs {total}")
    offset = 0
    new_sd = {}
    for key, t in sd.items():
        chunk = vector[offset : offset + t.numel()].reshape(t.shape)
        if not t.is_floating_point():
            chunk = chunk.round()
        new_sd[key] = chunk.to(t.dtype)
        offset += t.numel()
    model.net.load_state_dict(new_sd)


def save_checkpoint(model: ClientModel, path: str | Path) -> None:
    """Parameter blob at ``path`` plus a ``<path>.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(model.net.state_dict(), tmp)
    os.replace(tmp, path)
    manifest = {
        "arch_id": model.arch_id,
        "num_classes": model.num_classes,
        "seed": model.seed,
        "dataset": model.dataset,
        "bn_layer_shapes": [
            [s.name, int(s.mean.numel())] for s in stored_bn_stats(model)
        ],
        "input_shape": list(model.input_shape),
        "width_scale": model.width_scale,
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path: str | Path) -> ClientModel:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    model = build_model(
        manifest["arch_id"],
        manifest["num_classes"],
        manifest["seed"],
        input_shape=tuple(manifest["input_shape"]),
        width_scale=manifest["width_scale"],
        dataset=manifest.get("dataset", ""),
    )
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.net.load_state_dict(state)
    return model


def input_shape_for(dataset_name: str) -> tuple[int, int, int]:
    return dataset_info(dataset_name).shape
