"""Convert a CSV of MNIST digits (784 pixel columns, then the label) into IDX files.

The 5,000-digit sample bundled with mlxtend (``mlxtend/data/data/mnist_5k.csv.gz``)
has this layout; it can be fetched without installing anything::

    pip download mlxtend --no-deps -d /tmp/mlx
    python -c "import zipfile, glob; zipfile.ZipFile(glob.glob('/tmp/mlx/*.whl')[0]).extract('mlxtend/data/data/mnist_5k.csv.gz', '/tmp/mlx')"
    python scripts/make_mnist_idx.py /tmp/mlx/mlxtend/data/data/mnist_5k.csv.gz data/mnist
"""
import argparse
from pathlib import Path

import numpy as np

from rnp.data import write_idx


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv", help="CSV or CSV.gz with 784 pixel values then the label per row")
    ap.add_argument("out", help="output directory")
    ap.add_argument("--prefix", default="mnist5k")
    args = ap.parse_args()

    rows = np.loadtxt(args.csv, delimiter=",", dtype=np.int64)
    if rows.ndim != 2 or rows.shape[1] != 785:
        raise SystemExit(f"expected 785 columns, got {rows.shape}")
    pixels, labels = rows[:, :-1], rows[:, -1]
    if pixels.min() < 0 or pixels.max() > 255 or labels.min() < 0 or labels.max() > 9:
        raise SystemExit("pixel or label values out of range")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / f"{args.prefix}-images-idx3-ubyte", pixels.reshape(-1, 28, 28))
    write_idx(out / f"{args.prefix}-labels-idx1-ubyte", labels)
    print(f"wrote {len(rows)} digits to {out}")


if __name__ == "__main__":
    main()
