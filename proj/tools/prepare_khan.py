#!/usr/bin/env python3
"""Convert the Khan (2001) SRBCT expression data shipped with the ISLP
package into the loader's layout:

  khan_expression.csv  genes in rows, samples in columns (2308 x 83)
  khan_labels.csv      sample_id,class with class in {BL, EWS, NB, RMS}

Source: ISLP/data/Khan_{xtrain,xtest,ytrain,ytest}.csv (train samples first,
then test samples). Values are copied verbatim as text.

usage: prepare_khan.py SOURCE OUTDIR
  SOURCE is either the ISLP wheel (.whl) or a directory holding the four CSVs.
"""
import csv
import io
import sys
import zipfile
from pathlib import Path

CLASSES = {"1": "BL", "2": "EWS", "3": "NB", "4": "RMS"}


def read_source(source: Path, name: str) -> list[list[str]]:
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as z:
            text = z.read(f"ISLP/data/{name}").decode()
    else:
        text = (source / name).read_text()
    return list(csv.reader(io.StringIO(text)))


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    source, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    rows, labels = [], []
    for part in ("train", "test"):
        x = read_source(source, f"Khan_x{part}.csv")
        y = read_source(source, f"Khan_y{part}.csv")
        body, ys = x[1:], [r[-1] for r in y[1:]]
        if len(body) != len(ys):
            raise SystemExit(f"{part}: {len(body)} samples but {len(ys)} labels")
        rows.extend(body)
        labels.extend(ys)
    genes = [g.strip('"') for g in read_source(source, "Khan_xtrain.csv")[0]]
    samples = [f"S{i + 1}" for i in range(len(rows))]
    with open(out / "khan_expression.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["gene_id", *samples])
        for j, gene in enumerate(genes):
            w.writerow([gene, *(r[j] for r in rows)])
    with open(out / "khan_labels.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "class"])
        for s, c in zip(samples, labels):
            w.writerow([s, CLASSES[c]])
    print(f"{len(genes)} genes x {len(samples)} samples written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
