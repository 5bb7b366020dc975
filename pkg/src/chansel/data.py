"""Datasets: seeded synthetic Gaussian-blob images and a raw binary loader.

Raw binary format (the CIFAR-10 "binary version" layout): a file is a flat
sequence of records, each one label byte followed by ``C*H*W`` uint8 pixels in
channel-major, row-major order. Default shape is 3x32x32 (3073-byte records).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} images but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    def subsample(self, ratio: float, seed: int = 0) -> "Dataset":
        """Random subset holding ``ceil(ratio * N)`` examples, original order preserved."""
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"sample ratio must lie in (0, 1], got {ratio}")
        if ratio == 1.0:
            return self
        n = max(1, int(np.ceil(ratio * len(self))))
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None
                ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """One epoch of (optionally shuffled) mini-batches."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(self), batch_size):
            sel = order[i:i + batch_size]
            yield self.x[sel], self.y[sel]

    def stream(self, batch_size: int, rng: np.random.Generator
               ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Endless batches, reshuffled every epoch."""
        while True:
            yield from self.batches(batch_size, rng)


def make_blobs(num_classes: int = 4, per_class: int = 128, size: int = 16, channels: int = 3,
               noise: float = 0.5, jitter: float = 1.5, blobs: int = 2, seed: int = 0) -> Dataset:
    """Images made of Gaussian bumps whose positions and amplitudes depend on the class.

    Each class owns ``blobs`` bump templates (centre, width, per-channel
    amplitude); a sample jitters every centre by N(0, jitter) pixels and adds
    N(0, noise) pixel noise.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    centres = rng.uniform(2.0, size - 3.0, size=(num_classes, blobs, 2))
    widths = rng.uniform(1.0, 2.5, size=(num_classes, blobs))
    amps = rng.normal(0.0, 1.0, size=(num_classes, blobs, channels))

    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    x = np.empty((n, channels, size, size))
    for i, c in enumerate(labels):
        img = np.zeros((channels, size, size))
        for b in range(blobs):
            cy, cx = centres[c, b] + rng.normal(0.0, jitter, size=2)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * widths[c, b] ** 2))
            img += amps[c, b][:, None, None] * bump[None]
        x[i] = img + rng.normal(0.0, noise, size=img.shape)
    return Dataset(x, labels.astype(np.int64), num_classes)


def read_raw(paths: Sequence, shape: Tuple[int, int, int] = (3, 32, 32),
             num_classes: int = 10, standardize: bool = True) -> Dataset:
    c, h, w = shape
    rec = 1 + c * h * w
    chunks = []
    for p in paths:
        buf = np.fromfile(Path(p), dtype=np.uint8)
        if buf.size % rec:
            raise ValueError(f"{p}: size {buf.size} is not a multiple of the {rec}-byte record")
        chunks.append(buf.reshape(-1, rec))
    data = np.concatenate(chunks) if chunks else np.zeros((0, rec), np.uint8)
    y = data[:, 0].astype(np.int64)
    if y.size and y.max() >= num_classes:
        raise ValueError(f"label {y.max()} out of range for {num_classes} classes")
    x = data[:, 1:].reshape(-1, c, h, w).astype(np.float64) / 255.0
    if standardize and len(x):
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        std = x.std(axis=(0, 2, 3), keepdims=True) + 1e-8
        x = (x - mean) / std
    return Dataset(x, y, num_classes)


def write_raw(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``images[N,C,H,W]`` and ``labels[N]`` in the raw record format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    recs = np.concatenate([labels[:, None], images.reshape(len(images), -1)], axis=1)
    recs.tofile(Path(path))


def _parse_kv(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise ValueError(f"expected key=value in dataset options, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_dataset(source: str) -> Dataset:
    """Resolve a dataset source string.

    * ``blobs`` or ``blobs:classes=4,per_class=128,size=16,channels=3,noise=0.5,jitter=1.5,seed=0``
    * ``raw:path=a.bin+b.bin,shape=3x32x32,classes=10``
    """
    kind, _, rest = source.partition(":")
    opts = _parse_kv(rest)
    if kind == "blobs":
        return make_blobs(num_classes=int(opts.get("classes", 4)),
                          per_class=int(opts.get("per_class", 128)),
                          size=int(opts.get("size", 16)), channels=int(opts.get("channels", 3)),
                          noise=float(opts.get("noise", 0.5)), jitter=float(opts.get("jitter", 1.5)),
                          blobs=int(opts.get("blobs", 2)), seed=int(opts.get("seed", 0)))
    if kind == "raw":
        if "path" not in opts:
            raise ValueError("raw dataset needs path=FILE[+FILE...]")
        shape = tuple(int(v) for v in opts.get("shape", "3x32x32").split("x"))
        return read_raw(opts["path"].split("+"), shape, int(opts.get("classes", 10)))
    raise ValueError(f"unknown dataset source {source!r}")
