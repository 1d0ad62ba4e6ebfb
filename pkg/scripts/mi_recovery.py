"""Fit one discriminator on correlated Gaussians and compare its MI estimate to the closed form.

    python scripts/mi_recovery.py --rho 0 0.5 0.8 --seeds 0 1 2
"""

import argparse
import math

import numpy as np
import torch

from infomae.info import Discriminator, fit_discriminator, log_density_ratio


def estimate(rho: float, seed: int, n: int, steps: int) -> float:
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, 2, generator=g)
    a, b = z[:, :1], rho * z[:, :1] + math.sqrt(1 - rho**2) * z[:, 1:]
    torch.manual_seed(seed)
    disc = Discriminator("SELF", [(1,), (1,)])
    fit_discriminator(disc, [a, b], (1,), steps=steps, seed=seed)
    with torch.no_grad():
        return log_density_ratio(disc, [a, b]).mean().item()


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--rho", type=float, nargs="+", default=[0.0, 0.5, 0.8])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--samples", type=int, default=50_000)
    p.add_argument("--steps", type=int, default=1500)
    args = p.parse_args()
    print("rho\ttrue\tmedian\tper-seed")
    for rho in args.rho:
        est = [estimate(rho, s, args.samples, args.steps) for s in args.seeds]
        truth = -0.5 * math.log(1 - rho**2)
        print(f"{rho}\t{truth:.4f}\t{np.median(est):.4f}\t" + " ".join(f"{e:.4f}" for e in est))


if __name__ == "__main__":
    main()
