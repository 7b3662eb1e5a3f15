"""Bytes needed to reach a target loss for each codec on the reference task (M=4, Q=10, B=64).

Usage: python3 scripts/comm_reduction.py [--target 0.7] [--seeds 5] [--rounds 100] [--out runs/comm]
"""

import argparse
from pathlib import Path

import numpy as np

from cvfl.config import parse_config
from cvfl.harness import NOT_REACHED, comm_cost_report, run_experiment

CODECS = [("none", 32), ("scalar", 2), ("vector", 2), ("topk", 2), ("scalar", 4), ("vector", 4), ("topk", 8)]

TEMPLATE = """\
dataset = synthetic
n_samples = 1000
n_features = 16
M = 4
Q = 10
batch = 64
eta = 0.03
server_hidden = 0
rounds = {rounds}
compressor = {comp}
bits = {bits}
seed = {seed}
out = {out}
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--target", type=float, default=0.7)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--rounds", type=int, default=100)
    ap.add_argument("--out", default="runs/comm")
    args = ap.parse_args()
    paper = {c: [] for c in CODECS}
    for seed in range(args.seeds):
        named = []
        for comp, bits in CODECS:
            out = Path(args.out) / f"{comp}{bits}_s{seed}"
            cfg = parse_config(TEMPLATE.format(rounds=args.rounds, comp=comp, bits=bits, seed=seed, out=out))
            named.append(((comp, bits), run_experiment(cfg).series))
        for row in comm_cost_report(named, args.target):
            paper[row.name].append(row.paper_bytes)
    base = np.mean(paper[("none", 32)]) if None not in paper[("none", 32)] else None
    print(f"codec,bits,mean_MB_to_target,fraction_of_uncompressed (target {args.target})")
    for (comp, bits), vals in paper.items():
        if None in vals:
            print(f"{comp},{bits},{NOT_REACHED},{NOT_REACHED}")
            continue
        mb = np.mean(vals) / 1e6
        frac = f"{np.mean(vals) / base:.4f}" if base else NOT_REACHED
        print(f"{comp},{bits},{mb:.6f},{frac}")


if __name__ == "__main__":
    main()
