#!/usr/bin/env python3
"""Fetch MovieLens-100K into data/ml-100k/ in the original GroupLens layout.

The GroupLens host is not always reachable from CI sandboxes, so this pulls
the copy bundled inside the RecBole wheel on PyPI and rewrites it as
`u.data` (user \t item \t rating \t timestamp) and `u.item` (pipe-separated,
19 genre flags).
"""

import argparse
import pathlib
import subprocess
import sys
import tempfile
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
PREFIX = "recbole/dataset_example/ml-100k/"


def main() -> int:
    parser = argparse.ArgumentParser()
    root = pathlib.Path(__file__).resolve().parent.parent
    parser.add_argument("--out", default=str(root / "data" / "ml-100k"))
    args = parser.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1",
             "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            inter = z.read(PREFIX + "ml-100k.inter").decode("utf-8").splitlines()
            items = z.read(PREFIX + "ml-100k.item").decode("latin-1").splitlines()

    with open(out / "u.data", "w") as f:
        for line in inter[1:]:
            user, item, rating, ts = line.split("\t")
            f.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")

    with open(out / "u.item", "w", encoding="latin-1") as f:
        for line in items[1:]:
            cols = line.split("\t")
            item_id, title, year, classes = cols[0], cols[1], cols[2], cols[3]
            present = set(classes.split(" ")) if classes else set()
            # RecBole splits "Children's" and "Film-Noir" into tokens verbatim.
            flags = ["1" if g in present else "0" for g in GENRES]
            f.write("|".join([item_id, title, year, "", ""] + flags) + "\n")

    print(f"wrote {out / 'u.data'} ({len(inter) - 1} ratings)")
    print(f"wrote {out / 'u.item'} ({len(items) - 1} items)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
