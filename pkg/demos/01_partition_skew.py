"""How the Dirichlet concentration alpha shapes client label skew.

Draws partitions of the same training split at three alphas and prints the
per-client class histograms side by side: at alpha=0.1 most clients see a
couple of dominant classes, at alpha=100 every client looks like the
global distribution. A heatmap of the histograms is saved next to this
script.

Run:  python demos/01_partition_skew.py [--dataset mnist]
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from fedsyn import dirichlet_partition, load_dataset, partition_summary

parser = argparse.ArgumentParser()
parser.add_argument("--dataset", default="synth", help="synth runs instantly; mnist needs the cache")
parser.add_argument("--clients", type=int, default=5)
args = parser.parse_args()

train = load_dataset(args.dataset, "train")
alphas = [0.1, 1.0, 100.0]

fig, axes = plt.subplots(1, len(alphas), figsize=(4 * len(alphas), 3.2))
for ax, alpha in zip(axes, alphas):
    plan = dirichlet_partition(train, alpha, args.clients, seed=0)
    hist = partition_summary(plan, train)
    print(f"\nalpha={alpha}: client sizes {plan.client_sizes}")
    for k, row in enumerate(hist):
        top = row.argmax()
        share = row[top] / row.sum()
        print(f"  client {k}: {row.tolist()}  (max class {top}: {share:.0%})")
    ax.imshow(hist, aspect="auto", cmap="viridis")
    ax.set_title(f"alpha = {alpha}")
    ax.set_xlabel("class")
    ax.set_ylabel("client")

out = Path(__file__).with_suffix(".png")
fig.tight_layout()
fig.savefig(out, dpi=120)
print(f"\nheatmap saved to {out}")
