"""Seed-averaged mean squared gradient norm at several horizons with eta = c / sqrt(T).

Usage: python3 scripts/rate_probe.py [--T 100 400 1600] [--seeds 5] [--c 1.0] [--compressor none --bits 32]
"""

import argparse

from cvfl.analysis import rate_probe
from cvfl.compressors import CompressorSpec
from cvfl.config import COMPRESSORS
from cvfl.data import synthetic_teacher_dataset
from cvfl.protocol import StepSchedule, TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, nargs="+", default=[100, 400, 1600])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--c", type=float, default=1.0)
    ap.add_argument("--Q", type=int, default=1)
    ap.add_argument("--compressor", choices=sorted(COMPRESSORS), default="none")
    ap.add_argument("--bits", type=int, default=32)
    ap.add_argument("--bits-schedule", choices=["fixed", "required_q"], default="fixed")
    args = ap.parse_args()
    ds = synthetic_teacher_dataset(500, 8, 3, 4, seed=0)
    spec = CompressorSpec(COMPRESSORS[args.compressor], args.bits)
    tmpl = TrainConfig(M=4, Q=args.Q, R=1, B=32, schedule=StepSchedule("fixed", args.c), party_spec=spec,
                       bits_schedule=args.bits_schedule)
    print("T,mean_grad_sq,diverged")
    for row in rate_probe(tmpl, ds, args.T, list(range(args.seeds))):
        print(f"{row.T},{row.mean_grad_sq:.6g},{row.diverged}")


if __name__ == "__main__":
    main()
