#!/usr/bin/env python3
"""Rebuild data/corpus.txt from the Project Gutenberg Shakespeare plays
shipped in the `shakespeare` sdist on PyPI (public domain text).

    python3 scripts/make_corpus.py [path/to/shakespeare-0.6.tar.gz]

Without an argument the sdist is fetched with `pip download`.
"""
import hashlib
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

SIZE = 2_000_000
OUT = Path(__file__).resolve().parent.parent / "data" / "corpus.txt"


def fetch(tmp):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:",
         "shakespeare==0.6", "-d", tmp],
        check=True,
    )
    return next(Path(tmp).glob("shakespeare-*.tar.gz"))


def main():
    with tempfile.TemporaryDirectory() as tmp:
        sdist = Path(sys.argv[1]) if len(sys.argv) > 1 else fetch(tmp)
        with tarfile.open(sdist) as tar:
            members = sorted(
                (m for m in tar.getmembers()
                 if "/shksprdata/texts/" in m.name and m.name.endswith("_gut.txt")),
                key=lambda m: m.name,
            )
            parts = [tar.extractfile(m).read() for m in members]
    text = b"\n\n".join(p.strip() for p in parts)[:SIZE]
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_bytes(text)
    print(f"{OUT}: {len(text)} bytes from {len(parts)} plays, "
          f"sha256 {hashlib.sha256(text).hexdigest()}")


if __name__ == "__main__":
    main()
