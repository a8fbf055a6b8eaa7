"""Watching the synthesis stage learn.

Builds a small trained ensemble, then trains the generator against it for
a number of epochs, printing the three loss components. Synthetic image
grids are dumped every few epochs so you can watch noise turn into
class-conditional-looking samples (on real data; the synth toy set just
shows blobs sharpening).

The components behave differently by design: the confidence term falls
toward zero as samples become classifiable, the statistics term keeps
batch moments near each client's stored BN moments, and the disagreement
term is the (negative) reward for samples the student still gets wrong.

Run:  python demos/03_generator_synthesis.py [--dataset mnist --epochs 30]
"""

import argparse
from pathlib import Path

import torch

from fedsyn import (
    FedSynConfig,
    LocalTrainConfig,
    dirichlet_partition,
    generate,
    load_dataset,
    train_all_clients,
)
from fedsyn.distillation import fedsyn_epoch, init_state
from fedsyn.viz import save_image_grid

parser = argparse.ArgumentParser()
parser.add_argument("--dataset", default="synth")
parser.add_argument("--epochs", type=int, default=10)
parser.add_argument("--dump-every", type=int, default=5)
parser.add_argument("--width-scale", type=float, default=0.25)
args = parser.parse_args()

train = load_dataset(args.dataset, "train")
plan = dirichlet_partition(train, 0.5, 3, seed=0)
local = LocalTrainConfig(epochs=2, batch_size=64, lr=0.02, seed=0)
print("training a 3-client ensemble ...")
bundle = train_all_clients(plan, train, ["cnn1"] * 3, local, width_scale=args.width_scale)

cfg = FedSynConfig(
    epochs=args.epochs, t_g=10, t_s=1, batch_size=64, noise_dim=64,
    width_scale=args.width_scale, seed=0, local=local,
)
state = init_state(bundle, "cnn1", cfg)
out_dir = Path(__file__).parent / "synthesis_grids"
probe = torch.randn(16, cfg.noise_dim, generator=torch.Generator().manual_seed(1))

print(f"{'epoch':>5} {'confidence':>11} {'bn-match':>9} {'disagree':>9}")
for epoch in range(1, args.epochs + 1):
    rec = fedsyn_epoch(state, cfg)
    print(f"{epoch:>5} {rec['l_ce']:>11.4f} {rec['l_bn']:>9.4f} {rec['l_div']:>9.4f}")
    if epoch % args.dump_every == 0 or epoch == args.epochs:
        path = save_image_grid(generate(state.gen, probe), out_dir / f"epoch{epoch:03d}.png")
        print(f"      grid -> {path}")
