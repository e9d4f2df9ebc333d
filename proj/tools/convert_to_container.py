#!/usr/bin/env python3
"""Convert a NumPy or CSV time-series dataset to the on-disk container format.

Container layout (one directory per domain):
  manifest.json  {"n": N, "d": D, "l": L, "k": K, "dtype": "f32le",
                  "has_labels": true/false}
  series.bin     raw little-endian float32, row-major [N, D, L]
  labels.bin     raw little-endian int64 [N] (only when labels are given)

Examples:
  # X.npy with shape [N, D, L] (or [N, L] for single-channel), y.npy with [N]
  python3 tools/convert_to_container.py --series X.npy --labels y.npy \
      --classes 6 --out data/source

  # unlabeled target domain
  python3 tools/convert_to_container.py --series X_target.npy \
      --classes 6 --out data/target

  # CSV with one row per instance (single channel)
  python3 tools/convert_to_container.py --series X.csv --labels y.csv \
      --classes 5 --out data/source
"""

import argparse
import json
import pathlib
import sys

import numpy as np


def load_array(path: str) -> np.ndarray:
    p = pathlib.Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    if p.suffix == ".csv":
        return np.loadtxt(p, delimiter=",")
    sys.exit(f"unsupported input format: {p.suffix} (expected .npy or .csv)")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--series", required=True,
                    help="series array, [N, D, L] or [N, L]")
    ap.add_argument("--labels", help="integer label array, [N] (optional)")
    ap.add_argument("--classes", type=int, required=True,
                    help="number of classes K")
    ap.add_argument("--out", required=True, help="output container directory")
    args = ap.parse_args()

    x = load_array(args.series).astype("<f4")
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3:
        sys.exit(f"series must be [N, D, L] or [N, L], got shape {x.shape}")
    n, d, l = x.shape

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x.tofile(out / "series.bin")

    has_labels = args.labels is not None
    if has_labels:
        y = load_array(args.labels).astype("<i8").ravel()
        if y.shape[0] != n:
            sys.exit(f"label count {y.shape[0]} != instance count {n}")
        if y.min() < 0 or y.max() >= args.classes:
            sys.exit(f"labels must lie in [0, {args.classes})")
        y.tofile(out / "labels.bin")

    manifest = {"n": n, "d": d, "l": l, "k": args.classes,
                "dtype": "f32le", "has_labels": has_labels}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {out}: n={n} d={d} l={l} k={args.classes} "
          f"labels={'yes' if has_labels else 'no'}")


if __name__ == "__main__":
    main()
