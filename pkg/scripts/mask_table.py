"""Share of pixels in A1/A2/A3 at several alphas (second spike eigenvector) for a synthetic cohort."""
import argparse

from sml.dataset import SynthParams, synth_cohort
from sml.pipeline import mask_stats


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--p", type=int, default=32)
    ap.add_argument("--ell", type=int, choices=(1, 2), default=2)
    args = ap.parse_args()

    cohort = synth_cohort(SynthParams(n_normal=50, n_abnormal=200, p=args.p), args.seed, lazy=True)
    rows = mask_stats(cohort, (0.0, 0.2, 0.4, 0.6, 0.8, 1.0), args.ell)
    print(f"{'alpha':>6}{'A1 %':>8}{'A2 %':>8}{'A3 %':>8}")
    for alpha, a1, a2, a3 in rows:
        print(f"{alpha:>6.1f}{a1:>8.1f}{a2:>8.1f}{a3:>8.1f}")


if __name__ == "__main__":
    main()
