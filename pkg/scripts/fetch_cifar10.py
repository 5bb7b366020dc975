"""Download the CIFAR-10 binary release for use with ``--dataset raw:...``.

The engine itself never touches the network; this helper is the only piece
that does. Source: https://www.cs.toronto.edu/~kriz/cifar.html, file
``cifar-10-binary.tar.gz`` (about 160 MB). Each ``data_batch_N.bin`` holds
10000 records of one label byte plus 3072 channel-major pixel bytes.

    python scripts/fetch_cifar10.py data/
    chansel prune --spec vgg16 --dataset raw:path=data/cifar-10-batches-bin/data_batch_1.bin
"""

import argparse
import hashlib
import tarfile
import urllib.request
from pathlib import Path

URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
MD5 = "c32a1d4ab5d03f1284b67883e8d87530"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dest", type=Path)
    args = ap.parse_args()
    args.dest.mkdir(parents=True, exist_ok=True)
    archive = args.dest / "cifar-10-binary.tar.gz"
    if not archive.exists():
        print(f"downloading {URL}")
        urllib.request.urlretrieve(URL, archive)
    digest = hashlib.md5(archive.read_bytes()).hexdigest()
    if digest != MD5:
        raise SystemExit(f"checksum mismatch for {archive}: {digest}")
    with tarfile.open(archive) as tar:
        tar.extractall(args.dest)
    batches = sorted((args.dest / "cifar-10-batches-bin").glob("data_batch_*.bin"))
    print("raw:path=" + "+".join(str(p) for p in batches))


if __name__ == "__main__":
    main()
