"""Empirical codec error against the worst-case bounds, for b = 1..6.

Usage: python3 scripts/codec_bounds.py [--trials 1000] [--B 16] [--P 8]
"""

import argparse

from cvfl.analysis import codec_bound_check
from cvfl.compressors import CompressorSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--B", type=int, default=16)
    ap.add_argument("--P", type=int, default=8)
    args = ap.parse_args()
    print("codec,bits,dither,measured,bound,ratio")
    for kind in ("scalar", "lattice2d", "topk"):
        for dither in ((True, False) if kind != "topk" else (True,)):
            for b in range(1, 7):
                r = codec_bound_check(CompressorSpec(kind, b, dither=dither), args.trials, args.B, args.P)
                print(f"{kind},{b},{int(dither)},{r.lhs:.6g},{r.rhs:.6g},{r.lhs / r.rhs:.4f}")


if __name__ == "__main__":
    main()
