"""Coverage upper bounds of several lattices on an annotation file.

    python scripts/upper_bounds.py annotations.jsonl --n 512 --tau 1.0

Prints Rank1 upper bounds at IoU 0.1/0.3/0.5/0.7 for the dense map and for
multi-scale maps with A=8 and K=1..7.
"""
import argparse

from momentmap.cli import upper_bound_table
from momentmap.dataio import load_annotations
from momentmap.lattice import MapKind

THRESHOLDS = (0.1, 0.3, 0.5, 0.7)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("annotations")
    ap.add_argument("--format", default="canonical", choices=("canonical", "charades_txt"))
    ap.add_argument("--durations")
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--tau", type=float, default=1.0)
    ap.add_argument("--a", type=int, default=8)
    args = ap.parse_args()

    recs = load_annotations(args.annotations, args.format, args.durations)
    print("map,A,K," + ",".join(f"r1@{m:g}" for m in THRESHOLDS))
    settings = [(MapKind.DENSE, args.a, 1)] + [(MapKind.MULTI, args.a, k) for k in range(1, 8)]
    for kind, a, k in settings:
        table = upper_bound_table(recs, kind, args.n, a, k, args.tau, THRESHOLDS)
        print(f"{kind.value},{a},{k}," + ",".join(f"{table[m]:.2f}" for m in THRESHOLDS))


if __name__ == "__main__":
    main()
