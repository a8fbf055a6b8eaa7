"""Backend determinism switch.

All run entry points already derive their randomness from explicit seeds;
this additionally forces torch onto deterministic kernels so repeated runs
produce bit-identical metric traces.
"""

from __future__ import annotations

import torch


def enable_determinism(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)


def is_deterministic() -> bool:
    return torch.are_deterministic_algorithms_enabled()
