"""Mean |<enc ci, enc cj> - rbf(ci, cj)| against the number of nested lattice anchors.

    python scripts/nystrom_convergence.py --pairs 1000 --out runs/nystrom.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from iar.georope import DTYPE, NystromBasis, lattice_anchors, nystrom_encode


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=1000)
    ap.add_argument("--bandwidth", type=float, default=1.5)
    ap.add_argument("--half-width", type=float, default=4.0)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out", default=None, help="optional plot path")
    args = ap.parse_args()

    w = args.half_width
    anchors = lattice_anchors(-w, w, (4, 4, 4))
    ms = (1, 2, 4, 8, 16, 32, 64)
    print("seed " + " ".join(f"m={m:<6d}" for m in ms))
    curves = []
    for seed in range(args.seeds):
        gen = torch.Generator().manual_seed(seed)
        ci = (torch.rand(args.pairs, 3, generator=gen, dtype=DTYPE) * 2 - 1) * w
        cj = (torch.rand(args.pairs, 3, generator=gen, dtype=DTYPE) * 2 - 1) * w
        exact = torch.exp(-((ci - cj) ** 2).sum(-1) / (2 * args.bandwidth**2))
        errs = []
        for m in ms:
            b = NystromBasis.build(anchors[:m], args.bandwidth, 1e-8)
            approx = (nystrom_encode(ci, b) * nystrom_encode(cj, b)).sum(-1)
            errs.append(torch.mean(torch.abs(approx - exact)).item())
        curves.append(errs)
        print(f"{seed:<4d} " + " ".join(f"{e:<8.4f}" for e in errs))

    if args.out:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for seed, errs in enumerate(curves):
            ax.plot(ms, errs, marker="o", label=f"seed {seed}")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("anchors m")
        ax.set_ylabel("mean |approx - rbf|")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.out, dpi=100)
        print(f"plot written to {args.out}")


if __name__ == "__main__":
    main()
