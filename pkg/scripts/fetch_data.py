#!/usr/bin/env python3
"""Fetch MNIST and a public-domain English text into a data directory.

Both come from npm package tarballs (``npm pack``), which is the one network
route reliably available in the build sandbox:

  mnist-data   -> <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
  bible-kjv    -> <root>/text/kjv.txt   (King James Version, public domain)

Usage: python scripts/fetch_data.py [--root DIR]   (default $TWINNET_DATA_DIR or ~/data)
"""
import argparse
import gzip
import json
import os
import re
import shutil
import subprocess
import tarfile
import tempfile
from pathlib import Path

MNIST_FILES = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]


def npm_pack(name: str, workdir: Path) -> Path:
    out = subprocess.run(["npm", "pack", name, "--silent"], cwd=workdir, check=True,
                         capture_output=True, text=True).stdout.strip().splitlines()[-1]
    tgz = workdir / out
    dest = workdir / name
    with tarfile.open(tgz) as tf:
        tf.extractall(dest, filter="data")
    return dest / "package"


def fetch_mnist(root: Path, work: Path) -> None:
    dest = root / "mnist"
    if all((dest / f).exists() for f in MNIST_FILES):
        print(f"mnist: present in {dest}")
        return
    pkg = npm_pack("mnist-data", work)
    dest.mkdir(parents=True, exist_ok=True)
    for f in MNIST_FILES:
        hits = list(pkg.rglob(f)) + list(pkg.rglob(f + ".gz"))
        if not hits:
            raise SystemExit(f"mnist-data package has no {f}")
        src = hits[0]
        if src.suffix == ".gz":
            with gzip.open(src) as fi, open(dest / f, "wb") as fo:
                shutil.copyfileobj(fi, fo)
        else:
            shutil.copyfile(src, dest / f)
    print(f"mnist: wrote {dest}")


_FOOTNOTE = re.compile(r"<RF>.*?<Rf>", re.S)
_MARKUP = re.compile(r"<[^>]*>")


def fetch_kjv(root: Path, work: Path) -> None:
    dest = root / "text" / "kjv.txt"
    if dest.exists():
        print(f"text: present at {dest}")
        return
    pkg = npm_pack("bible-kjv", work) / "dist"
    books = json.loads((pkg / "content" / "books.json").read_text())
    lines = []
    for i, book in enumerate(books, start=1):
        lines.append(book["name"])
        for ch in range(1, book["chapters"] + 1):
            verses = json.loads((pkg / "resources" / str(i) / f"{ch}.json").read_text())
            lines.extend(_MARKUP.sub("", _FOOTNOTE.sub("", v)).strip() for v in verses)
        lines.append("")
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"text: wrote {dest} ({dest.stat().st_size} bytes)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default=os.environ.get("TWINNET_DATA_DIR", str(Path.home() / "data")))
    args = ap.parse_args()
    root = Path(args.root)
    with tempfile.TemporaryDirectory() as tmp:
        fetch_mnist(root, Path(tmp))
        fetch_kjv(root, Path(tmp))


if __name__ == "__main__":
    main()
