#!/usr/bin/env python3
"""Convert the Golub et al. (1999) leukemia files into the loader's layout:

  golub_expression.csv  genes in rows, patients in columns (7129 x 72)
  golub_labels.csv      sample_id,class with class in {ALL, AML}

Expected inputs (the layout distributed by the Broad Institute and mirrored
on Kaggle as "gene-expression"):

  data_set_ALL_AML_train.csv        38 patients
  data_set_ALL_AML_independent.csv  34 patients
  actual.csv                        patient,cancer

Expression files carry "Gene Description", "Gene Accession Number", then a
numbered column per patient, each followed by a "call" column (dropped).

usage: prepare_golub.py SOURCE_DIR OUTDIR
"""
import csv
import sys
from pathlib import Path


def read_expression(path: Path) -> tuple[list[str], dict[str, list[str]]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = [h.strip() for h in rows[0]]
    acc = header.index("Gene Accession Number")
    patients = [(j, h) for j, h in enumerate(header)
                if h and not h.lower().startswith("call") and j > acc]
    genes = [r[acc] for r in rows[1:] if r]
    cols = {h: [r[j].strip() for r in rows[1:] if r] for j, h in patients}
    return genes, cols


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    genes, cols = read_expression(src / "data_set_ALL_AML_train.csv")
    genes2, cols2 = read_expression(src / "data_set_ALL_AML_independent.csv")
    if genes != genes2:
        raise SystemExit("gene order differs between the two expression files")
    cols.update(cols2)
    with open(src / "actual.csv", newline="") as f:
        labels = {r["patient"].strip(): r["cancer"].strip() for r in csv.DictReader(f)}
    patients = sorted(cols, key=int)
    missing = [p for p in patients if p not in labels]
    if missing:
        raise SystemExit(f"patients without labels: {missing}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "golub_expression.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["gene_id", *(f"P{p}" for p in patients)])
        for i, gene in enumerate(genes):
            w.writerow([gene, *(cols[p][i] for p in patients)])
    with open(out / "golub_labels.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "class"])
        for p in patients:
            w.writerow([f"P{p}", labels[p]])
    print(f"{len(genes)} genes x {len(patients)} patients written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
