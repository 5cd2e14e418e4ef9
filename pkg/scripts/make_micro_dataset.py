#!/usr/bin/env python3
"""Write the synthetic copy/arithmetic dataset as JSON-lines for the CLI."""

import argparse
from pathlib import Path

from tpn2f.data import save_dataset
from tpn2f.synthetic import make_micro_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="micro.jsonl")
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    samples = make_micro_dataset(args.n, seed=args.seed)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples -> {Path(args.out).resolve()}")


if __name__ == "__main__":
    main()
