#!/usr/bin/env python3
"""Download DaISy benchmark files and verify them against a checksum list.

    python3 scripts/fetch_daisy.py --base-url URL [--dest data/daisy] [--record] [names...]

Each dataset is fetched from ``<base-url>/<name>.dat.gz`` and stored
decompressed as ``<dest>/<name>.dat``. Checksums (sha256 of the decompressed
file) live in ``daisy_checksums.sha256`` next to this script, one
``<digest>  <name>.dat`` line per file. ``--record`` appends digests for
files that have none yet; otherwise a missing or mismatching digest is an
error.
"""

from __future__ import annotations

import argparse
import gzip
import hashlib
import sys
import urllib.request
from pathlib import Path

DATASETS = ("actuator", "ballbeam", "drive", "dryer", "gas_furnace")
CHECKSUMS = Path(__file__).with_name("daisy_checksums.sha256")


def read_checksums(path=CHECKSUMS):
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            digest, name = line.split()
            out[name] = digest
    return out


def fetch(name, base_url, dest: Path) -> tuple[Path, str]:
    url = f"{base_url.rstrip('/')}/{name}.dat.gz"
    with urllib.request.urlopen(url, timeout=60) as resp:
        raw = resp.read()
    data = gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw
    dest.mkdir(parents=True, exist_ok=True)
    path = dest / f"{name}.dat"
    path.write_bytes(data)
    return path, hashlib.sha256(data).hexdigest()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="*", default=list(DATASETS))
    p.add_argument("--base-url", required=True, help="directory URL holding <name>.dat.gz files")
    p.add_argument("--dest", default="data/daisy")
    p.add_argument("--record", action="store_true", help="append digests for files without one")
    args = p.parse_args(argv)

    known = read_checksums()
    status = 0
    for name in args.names:
        path, digest = fetch(name, args.base_url, Path(args.dest))
        key = path.name
        if key in known:
            if known[key] != digest:
                print(f"{key}: checksum mismatch ({digest})", file=sys.stderr)
                status = 1
                continue
            print(f"{key}: ok")
        elif args.record:
            with CHECKSUMS.open("a") as fh:
                fh.write(f"{digest}  {key}\n")
            print(f"{key}: recorded {digest}")
        else:
            print(f"{key}: no checksum on file (rerun with --record to pin {digest})", file=sys.stderr)
            status = 1
    return status


if __name__ == "__main__":
    sys.exit(main())
