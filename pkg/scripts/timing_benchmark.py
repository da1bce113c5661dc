"""Wall-clock training and scoring times at 128 x 128 with about 200 slices per scan."""
import argparse
import logging
import resource

from sml.dataset import SynthParams, split_train_test, synth_cohort
from sml.pipeline import RunConfig, test_pipeline, train_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=int, default=128)
    ap.add_argument("--m", type=int, default=200)
    ap.add_argument("--quantiles", type=int, choices=(5, 9), default=9)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    params = SynthParams(n_normal=82, n_abnormal=281, m_range=(args.m - 10, args.m + 10), p=args.p)
    train, test = split_train_test(synth_cohort(params, args.seed, lazy=True), 50, 200, seed=args.seed)
    model, in_sample = train_pipeline(RunConfig(quantile_count=args.quantiles, workers=args.workers), train)
    report = test_pipeline(model, test, args.workers)
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
    print(f"quantiles={args.quantiles} workers={args.workers} kept pixels={model.n_features}")
    print(f"training (250 scans): {in_sample.train_seconds:.1f} s")
    print(f"scoring (113 scans):  {report.test_seconds:.1f} s")
    print(f"test accuracy {report.accuracy:.3f}, AUC {report.auc:.3f}, peak RSS {peak:.0f} MiB")


if __name__ == "__main__":
    main()
