#!/usr/bin/env python3
"""Build the bundled data/ directory from raw benchmark distributions.

The repository ships ready-to-use copies under data/, so normally nothing
has to be run. This script documents how that bundle was produced and
re-creates it from the original distribution files:

  aifb:      aifb.n3 (a.k.a. aifbfixed_complete.n3, Mannheim RDF benchmark
             collection) + trainingSet.tsv/testSet.tsv benchmark splits
  mutag:     carcinogenesis.owl (DL-Learner distribution) + splits
  fb15k:     train/valid/test.txt triple TSVs (Bordes et al. splits)
  wn18:      train/valid/test.txt triple TSVs (Bordes et al. splits)
  fb15k-237: train/valid/test.txt triple TSVs (Toutanova & Chen splits)

RDF inputs are converted to gzipped N-Triples with rdflib (install the
`rdf` extra); the package's own loader deliberately parses N-Triples only.
Triple TSVs are gzipped byte-for-byte as distributed (the loader tolerates
CRLF line endings).

Usage:
    python scripts/prepare_data.py --raw-dir RAW --out-dir data
with RAW laid out as:
    RAW/aifb/{aifb.n3,trainingSet.tsv,testSet.tsv}
    RAW/mutag/{carcinogenesis.owl,trainingSet.tsv,testSet.tsv}
    RAW/{fb15k,wn18,fb15k-237}/{train,valid,test}.txt
"""

import argparse
import gzip
import shutil
import sys
from pathlib import Path


def gzip_copy(src: Path, dst: Path) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    with open(src, "rb") as f_in:
        # mtime=0 keeps the archive bytes reproducible
        with gzip.GzipFile(filename="", mode="wb", fileobj=open(dst, "wb"), mtime=0) as f_out:
            shutil.copyfileobj(f_in, f_out)
    print(f"  {src} -> {dst}")


def convert_rdf(src: Path, dst: Path, fmt: str) -> None:
    try:
        import rdflib
    except ImportError:
        sys.exit("rdflib is required to convert RDF inputs: pip install rdflib")
    graph = rdflib.Graph()
    graph.parse(src, format=fmt)
    dst.parent.mkdir(parents=True, exist_ok=True)
    payload = graph.serialize(format="nt", encoding="utf-8")
    with gzip.GzipFile(filename="", mode="wb", fileobj=open(dst, "wb"), mtime=0) as f_out:
        f_out.write(payload)
    print(f"  {src} -> {dst} ({len(graph)} statements)")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--raw-dir", type=Path, required=True)
    parser.add_argument("--out-dir", type=Path, default=Path("data"))
    args = parser.parse_args()
    raw, out = args.raw_dir, args.out_dir

    print("aifb")
    convert_rdf(raw / "aifb" / "aifb.n3", out / "aifb" / "aifb.nt.gz", fmt="n3")
    for split in ("trainingSet.tsv", "testSet.tsv"):
        shutil.copy(raw / "aifb" / split, out / "aifb" / split)
        print(f"  {raw / 'aifb' / split} -> {out / 'aifb' / split}")

    print("mutag")
    convert_rdf(raw / "mutag" / "carcinogenesis.owl", out / "mutag" / "mutag.nt.gz", fmt="xml")
    for split in ("trainingSet.tsv", "testSet.tsv"):
        shutil.copy(raw / "mutag" / split, out / "mutag" / split)
        print(f"  {raw / 'mutag' / split} -> {out / 'mutag' / split}")

    for name in ("fb15k", "wn18", "fb15k-237"):
        print(name)
        for split in ("train", "valid", "test"):
            gzip_copy(raw / name / f"{split}.txt", out / name / f"{split}.txt.gz")


if __name__ == "__main__":
    main()
