"""Write a synthetic monthly-temperature CSV in the TPT-48 input schema.

    python scripts/make_tpt48_surrogate.py data/tpt48.csv --seed 0
"""
import argparse

from vdi.datasets import write_tpt48_surrogate

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("out")
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()
print(write_tpt48_surrogate(args.out, args.seed))
