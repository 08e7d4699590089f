"""Render a grid of synthetic source / mild / strong samples with their masks."""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from udaclr.datasets import SHIFT_PRESETS, SOURCE_SPEC, generate_synthetic_sample, perturb  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="benchmark.png")
    ap.add_argument("--n", type=int, default=6)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()

    rows = [("source", SOURCE_SPEC), ("mild", SHIFT_PRESETS["mild"]), ("strong", SHIFT_PRESETS["strong"])]
    fig, axes = plt.subplots(len(rows) + 2, args.n, figsize=(2 * args.n, 2 * (len(rows) + 2)))
    for j in range(args.n):
        for i, (name, spec) in enumerate(rows):
            s = generate_synthetic_sample(spec, j, args.size)
            axes[i, j].imshow(s.image)
            axes[i, 0].set_ylabel(name)
        strong = generate_synthetic_sample(SHIFT_PRESETS["strong"], j, args.size)
        axes[len(rows), j].imshow(perturb(strong.image))
        axes[len(rows), 0].set_ylabel("strong, perturbed")
        axes[len(rows) + 1, j].imshow(strong.masks[0] + strong.masks[1], vmin=0, vmax=2)
        axes[len(rows) + 1, 0].set_ylabel("disc + cup")
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(args.out, dpi=100)
    print("wrote", args.out)


if __name__ == "__main__":
    main()
