"""Multi-low-resolution (MLR) data: LR synthesis, toy identities, PK batches, disk format."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .tensor import DTYPE, resize_matrix

TRAIN_RATES = (2, 3, 4)
SPLITS = ("train", "query", "gallery")


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class LabeledImage:
    """One H x W x 3 image in [0, 1].

    ``rate`` is the down-sampling factor the image went through (1 = HR).
    LR images are stored already resized back to the canonical size.
    ``source`` optionally holds the HR ground truth of an LR image.
    """

    pixels: np.ndarray
    identity: int
    camera: int = 0
    rate: int = 1
    source: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=DTYPE)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DatasetError(f"pixels must be H x W x 3, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DatasetError(f"pixel values outside [0, 1] for identity {self.identity}")
        if self.rate < 1:
            raise DatasetError(f"rate must be >= 1, got {self.rate}")
        if self.source is not None:
            self.source = np.asarray(self.source, dtype=DTYPE)
            if self.source.shape != self.pixels.shape:
                raise DatasetError(f"source shape {self.source.shape} differs from pixels {self.pixels.shape}")


@dataclass(eq=False)
class MlrDataset:
    train: list[LabeledImage]
    queries: list[LabeledImage]
    gallery: list[LabeledImage]
    num_identities: int = field(default=0)

    def __post_init__(self):
        train_ids = {im.identity for im in self.train}
        test_ids = {im.identity for im in self.queries} | {im.identity for im in self.gallery}
        overlap = train_ids & test_ids
        if overlap:
            raise DatasetError(f"train and test identities overlap: {sorted(overlap)[:5]}")
        missing = {im.identity for im in self.queries} - {im.identity for im in self.gallery}
        if missing:
            raise DatasetError(f"query identities absent from gallery: {sorted(missing)[:5]}")
        if not self.num_identities:
            self.num_identities = len(train_ids)
        elif self.num_identities != len(train_ids):
            raise DatasetError(f"num_identities={self.num_identities} but train has {len(train_ids)} identities")
        shapes = {im.pixels.shape for im in self.train + self.queries + self.gallery}
        if len(shapes) > 1:
            raise DatasetError(f"images do not share a canonical size: {sorted(shapes)}")

    @property
    def image_size(self) -> tuple[int, int]:
        first = (self.train or self.gallery or self.queries)[0]
        return first.pixels.shape[:2]

    @cached_property
    def class_of(self) -> dict[int, int]:
        """Train identity -> contiguous classifier index."""
        return {ident: k for k, ident in enumerate(sorted({im.identity for im in self.train}))}

    @cached_property
    def train_pixels(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.train])

    @cached_property
    def train_classes(self) -> np.ndarray:
        return np.array([self.class_of[im.identity] for im in self.train])

    @cached_property
    def _by_class(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.train_classes == c) for c in range(self.num_identities)]


# ---------------------------------------------------------------------------
# LR synthesis


def block_downsample(pixels: np.ndarray, rate: int) -> np.ndarray:
    """Average ``rate x rate`` cells; edge cells average whatever pixels they cover."""
    h, w = pixels.shape[-3:-1]
    hs, ws = math.ceil(h / rate), math.ceil(w / rate)
    rows = np.minimum(np.arange(h) // rate, hs - 1)
    cols = np.minimum(np.arange(w) // rate, ws - 1)
    py = np.zeros((hs, h))
    py[rows, np.arange(h)] = 1.0
    px = np.zeros((ws, w))
    px[cols, np.arange(w)] = 1.0
    py /= py.sum(axis=1, keepdims=True)
    px /= px.sum(axis=1, keepdims=True)
    out = np.einsum("oh,...hwc->...owc", py, pixels.astype(np.float64))
    return np.einsum("pw,...owc->...opc", px, out)


def upsample(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    ry = resize_matrix(pixels.shape[-3], size[0])
    rx = resize_matrix(pixels.shape[-2], size[1])
    out = np.einsum("oh,...hwc->...owc", ry, pixels.astype(np.float64))
    return np.einsum("pw,...owc->...opc", rx, out)


def synth_lr_pixels(pixels: np.ndarray, rate: int) -> np.ndarray:
    """Down-sample by ``rate`` then resize back; works on (..., H, W, 3) arrays."""
    if rate < 2:
        raise ValueError(f"down-sampling rate must be >= 2, got {rate}")
    size = pixels.shape[-3:-1]
    out = upsample(block_downsample(pixels, rate), size)
    return np.clip(out, 0.0, 1.0).astype(DTYPE)


def synth_lr(image: LabeledImage, rate: int) -> LabeledImage:
    return LabeledImage(
        synth_lr_pixels(image.pixels, rate),
        identity=image.identity,
        camera=image.camera,
        rate=rate,
        source=image.pixels if image.source is None else image.source,
    )


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round trips are exact."""
    return (np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(DTYPE)


# ---------------------------------------------------------------------------
# toy identities


@dataclass(frozen=True)
class _Identity:
    top: np.ndarray
    bottom: np.ndarray
    accent: np.ndarray
    stripe_period: int
    stripe_phase: int
    accent_side: int


def _random_identity(rng: np.random.Generator) -> _Identity:
    return _Identity(
        top=rng.uniform(0.05, 0.95, 3),
        bottom=rng.uniform(0.05, 0.95, 3),
        accent=rng.uniform(0.05, 0.95, 3),
        stripe_period=int(rng.integers(2, 5)),
        stripe_phase=int(rng.integers(0, 4)),
        accent_side=int(rng.integers(0, 2)),
    )


def _render(ident: _Identity, hw: tuple[int, int], rng: np.random.Generator | None) -> np.ndarray:
    h, w = hw
    img = np.empty((h, w, 3))
    if rng is None:
        img[:] = 0.5
        dy = dx = 0
        gain = 1.0
    else:
        # random base colour with a vertical gradient
        base = rng.uniform(0.0, 1.0, 3)
        tilt = rng.uniform(-0.3, 0.3, 3)
        img[:] = base + np.linspace(-0.5, 0.5, h)[:, None, None] * tilt
        dy = int(rng.integers(-h // 16, h // 16 + 1))
        dx = int(rng.integers(-w // 8, w // 8 + 1))
        gain = rng.uniform(0.9, 1.1)

    def box(y0, y1, x0, x1):
        y0, y1 = np.clip([int(round(y0 * h)) + dy, int(round(y1 * h)) + dy], 0, h)
        x0, x1 = np.clip([int(round(x0 * w)) + dx, int(round(x1 * w)) + dx], 0, w)
        return slice(y0, y1), slice(x0, x1)

    head = box(0.06, 0.18, 0.38, 0.62)
    img[head] = (0.85, 0.7, 0.6)
    torso = box(0.18, 0.55, 0.25, 0.75)
    img[torso] = ident.top
    ys = np.arange(img[torso].shape[0])
    stripes = ((ys + ident.stripe_phase) // ident.stripe_period) % 2 == 1
    img[torso][stripes] = 0.6 * ident.top[None, :] + 0.4 * ident.accent[None, :]
    img[box(0.55, 0.92, 0.28, 0.72)] = ident.bottom
    side = (0.12, 0.3) if ident.accent_side == 0 else (0.7, 0.88)
    img[box(0.3, 0.5, *side)] = ident.accent
    img = img * gain
    if rng is not None:
        img = img + rng.normal(0.0, 0.03, img.shape)
    return quantize(img)


def make_toy_dataset(
    num_ids: int,
    imgs_per_id: int,
    hw: tuple[int, int] = (32, 16),
    seed: int = 0,
    jitter: bool = True,
    rates: Sequence[int] = TRAIN_RATES,
) -> MlrDataset:
    """Synthetic MLR corpus with ``num_ids`` train and ``num_ids`` disjoint test identities.

    Train images are HR views; LR training inputs are synthesized per batch.
    Each test identity contributes ``imgs_per_id`` HR gallery views (camera 0)
    and ``imgs_per_id`` LR queries (camera 1) at a rate drawn from ``rates``.
    """
    if num_ids < 2 or imgs_per_id < 2:
        raise DatasetError(f"need num_ids >= 2 and imgs_per_id >= 2, got {num_ids}, {imgs_per_id}")
    h, w = hw
    if h < 8 or w < 4:
        raise DatasetError(f"image size {hw} too small")
    rng = np.random.default_rng(seed)
    idents = [_random_identity(rng) for _ in range(2 * num_ids)]
    jrng = rng if jitter else None

    train = [
        LabeledImage(_render(idents[i], hw, jrng), identity=i, camera=k % 2)
        for i in range(num_ids)
        for k in range(imgs_per_id)
    ]
    gallery, queries = [], []
    for i in range(num_ids, 2 * num_ids):
        for _ in range(imgs_per_id):
            gallery.append(LabeledImage(_render(idents[i], hw, jrng), identity=i, camera=0))
        for _ in range(imgs_per_id):
            hr = _render(idents[i], hw, jrng)
            r = int(rng.choice(rates))
            queries.append(LabeledImage(quantize(synth_lr_pixels(hr, r)), identity=i, camera=1, rate=r, source=hr))
    return MlrDataset(train, queries, gallery, num_ids)


# ---------------------------------------------------------------------------
# PK batches


@dataclass
class TrainBatch:
    """HR and LR streams of the same P x K samples, each in its own random order.

    ``lr_targets[i]`` is the HR image ``lr[i]`` was synthesized from.
    """

    hr: np.ndarray
    hr_labels: np.ndarray
    lr: np.ndarray
    lr_labels: np.ndarray
    lr_targets: np.ndarray
    lr_rates: np.ndarray

    def __len__(self) -> int:
        return len(self.hr_labels)


def next_batch(
    dataset: MlrDataset,
    batch_size: int,
    pk: tuple[int, int],
    rng: np.random.Generator,
    rates: Sequence[int] = TRAIN_RATES,
) -> TrainBatch:
    p, k = pk
    if batch_size != p * k:
        raise ValueError(f"batch size {batch_size} != P*K = {p}*{k}")
    if p > dataset.num_identities:
        raise ValueError(f"P={p} exceeds the {dataset.num_identities} training identities")
    classes = rng.choice(dataset.num_identities, size=p, replace=False)
    picks = []
    for c in classes:
        pool = dataset._by_class[c]
        picks.append(rng.choice(pool, size=k, replace=len(pool) < k))
    idx = np.concatenate(picks)
    labels = dataset.train_classes[idx]
    pixels = dataset.train_pixels[idx]

    hr_order = rng.permutation(len(idx))
    lr_order = rng.permutation(len(idx))
    lr_rates = rng.choice(np.asarray(rates), size=len(idx))
    lr = np.empty_like(pixels)
    for r in np.unique(lr_rates):
        sel = lr_rates == r
        lr[sel] = synth_lr_pixels(pixels[sel], int(r))
    return TrainBatch(
        hr=pixels[hr_order],
        hr_labels=labels[hr_order],
        lr=lr[lr_order],
        lr_labels=labels[lr_order],
        lr_targets=pixels[lr_order],
        lr_rates=lr_rates[lr_order],
    )


# ---------------------------------------------------------------------------
# on-disk format: <root>/images/*.png + <root>/index.tsv
#   path  identity  camera  rate  split  [source]


def _write_png(path: Path, pixels: np.ndarray) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png(path: Path | str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise DatasetError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise DatasetError(f"{path}: pixel values out of the 8-bit range")
    return (arr.astype(np.float64) / 255.0).astype(DTYPE)


def write_png(path: Path | str, pixels: np.ndarray) -> None:
    _write_png(Path(path), pixels)


def save_dataset(dataset: MlrDataset, root: Path | str) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    for split, images in (("train", dataset.train), ("query", dataset.queries), ("gallery", dataset.gallery)):
        for n, im in enumerate(images):
            rel = f"images/{split}_{n:05d}.png"
            _write_png(root / rel, im.pixels)
            row = [rel, im.identity, im.camera, im.rate, split]
            if im.source is not None:
                src = f"images/{split}_{n:05d}_hr.png"
                _write_png(root / src, im.source)
                row.append(src)
            writer.writerow(row)
    index = root / "index.tsv"
    index.write_text(buf.getvalue())
    return index


def load_dataset(root: Path | str, index_file: str = "index.tsv") -> MlrDataset:
    """Read the directory format; smaller images are resized to the canonical size."""
    root = Path(root)
    index = root / index_file
    if not index.is_file():
        raise FileNotFoundError(f"index file not found: {index}")
    rows = []
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (5, 6):
            raise DatasetError(f"{index}:{lineno}: expected 5 or 6 tab-separated columns, got {len(cols)}")
        try:
            ident, cam, rate = int(cols[1]), int(cols[2]), int(cols[3])
        except ValueError:
            raise DatasetError(f"{index}:{lineno}: identity, camera and rate must be integers") from None
        if rate < 1:
            raise DatasetError(f"{index}:{lineno}: rate must be >= 1, got {rate}")
        if cols[4] not in SPLITS:
            raise DatasetError(f"{index}:{lineno}: split must be one of {SPLITS}, got {cols[4]!r}")
        rows.append((lineno, cols[0], ident, cam, rate, cols[4], cols[5] if len(cols) == 6 else None))
    if not rows:
        raise DatasetError(f"{index}: no entries")

    pixels = {}
    for _, rel, *_rest, src in rows:
        for p in (rel, src):
            if p is not None and p not in pixels:
                pixels[p] = read_png(root / p)
    canonical = next(
        (pixels[r[1]].shape for r in rows if r[5] in ("train", "gallery")), pixels[rows[0][1]].shape
    )

    def fit(arr):
        return arr if arr.shape == canonical else np.clip(upsample(arr, canonical[:2]), 0, 1).astype(DTYPE)

    out = {s: [] for s in SPLITS}
    for lineno, rel, ident, cam, rate, split, src in rows:
        out[split].append(
            LabeledImage(fit(pixels[rel]), ident, cam, rate, source=None if src is None else fit(pixels[src]))
        )
    return MlrDataset(out["train"], out["query"], out["gallery"])
