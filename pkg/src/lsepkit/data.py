"""Dataset ingestion, the synthetic desk dataset, and the prefetching batch stream."""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ValidationError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".ppm", ".tif", ".tiff", ".webp"}


@dataclass
class LabeledImages:
    images: torch.Tensor  # (N, C, H, W) float32 in [-1, 1]
    labels: torch.Tensor  # (N,) int64, dense in [0, num_classes)
    class_names: list
    skipped: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def preprocess(img: Image.Image, image_size: int) -> np.ndarray:
    """Centre-crop to a square, resize to image_size, return uint8 HWC."""
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != image_size:
        img = img.resize((image_size, image_size), resample=Image.BICUBIC)
    return np.asarray(img, dtype=np.uint8)


def to_unit_range(arr_uint8: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(arr_uint8)).float()
    return (x.permute(0, 3, 1, 2) / 127.5) - 1.0


def _load_folder(root: Path, image_size: int, channels: int):
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValidationError(f"{root} contains no class folders")
    arrays, labels, skipped = [], [], 0
    for idx, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        kept = 0
        for f in files:
            try:
                with Image.open(f) as img:
                    img.load()
                    if len(img.getbands()) != channels:
                        skipped += 1
                        continue
                    arrays.append(preprocess(img, image_size))
            except (UnidentifiedImageError, OSError):
                skipped += 1
                continue
            labels.append(idx)
            kept += 1
        if kept == 0:
            raise ValidationError(f"class folder {name!r} has no usable images")
    return np.stack(arrays), np.asarray(labels), classes, skipped


def _load_container(path: Path, image_size: int, channels: int):
    with np.load(path, allow_pickle=False) as z:
        images, labels = z["images"], z["labels"].astype(np.int64)
        classes = [str(c) for c in z["class_names"]] if "class_names" in z else None
    if images.ndim != 4 or images.dtype != np.uint8:
        raise ValidationError("container 'images' must be uint8 (N, H, W, C)")
    keep = np.ones(len(images), dtype=bool)
    skipped = 0
    if images.shape[-1] != channels:
        raise ValidationError(f"container images have {images.shape[-1]} channels, expected {channels}")
    if images.shape[1:3] != (image_size, image_size):
        images = np.stack([preprocess(Image.fromarray(a), image_size) for a in images])
    classes = classes or [str(i) for i in range(int(labels.max()) + 1)]
    present = np.unique(labels)
    if len(present) != len(classes) or present.min() < 0 or present.max() >= len(classes):
        raise ValidationError("container labels must cover every class in [0, num_classes)")
    return images[keep], labels[keep], classes, skipped


def ingest_dataset(path, image_size: int = 32, channels: int = 3, seed: int = 0, shuffle: bool = True) -> LabeledImages:
    """Load a directory of class folders or an .npz container (images, labels[, class_names]).

    Images without ``channels`` bands or that fail to decode are skipped and
    counted. Ordering is a seeded permutation of the sorted file order.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"dataset path {path} does not exist")
    if path.is_dir():
        images, labels, classes, skipped = _load_folder(path, image_size, channels)
    else:
        images, labels, classes, skipped = _load_container(path, image_size, channels)
    if skipped:
        log.warning("skipped %d unreadable or wrong-shaped images under %s", skipped, path)
    order = np.random.default_rng(seed).permutation(len(labels)) if shuffle else np.arange(len(labels))
    return LabeledImages(to_unit_range(images[order]), torch.from_numpy(labels[order]).long(), classes, skipped)


class LatentCodec(Protocol):
    """Image <-> latent map, e.g. a VAE giving (4, H/8, W/8) latents. None ships; training runs in pixel space."""

    latent_channels: int
    downsample: int

    def encode(self, x: torch.Tensor) -> torch.Tensor: ...

    def decode(self, z: torch.Tensor) -> torch.Tensor: ...


class PoolingCodec:
    """Stand-in codec: area pooling plus a fixed orthonormal channel lift. Decode is the least-squares inverse."""

    def __init__(self, in_channels: int = 3, latent_channels: int = 4, downsample: int = 8, seed: int = 0):
        if latent_channels < in_channels:
            raise ValidationError("latent_channels must be >= in_channels for an invertible lift")
        g = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(latent_channels, in_channels, generator=g))
        self.lift = q  # (latent, in) with orthonormal columns
        self.latent_channels = latent_channels
        self.downsample = downsample

    def encode(self, x):
        pooled = F.avg_pool2d(x, self.downsample)
        return torch.einsum("lc,bchw->blhw", self.lift, pooled)

    def decode(self, z):
        pooled = torch.einsum("lc,blhw->bchw", self.lift, z)
        return F.interpolate(pooled, scale_factor=self.downsample, mode="nearest")


@torch.no_grad()
def encode_dataset(data: LabeledImages, codec: LatentCodec, batch_size: int = 256) -> LabeledImages:
    """Replace images by their latents; labels and order are kept."""
    z = torch.cat([codec.encode(data.images[s:s + batch_size]) for s in range(0, len(data), batch_size)])
    return LabeledImages(z, data.labels, data.class_names, data.skipped)


# ---------------------------------------------------------------------------
# Synthetic desk dataset
# ---------------------------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "cross", "ring")
PALETTES = ((0.9, 0.35, 0.2), (0.2, 0.55, 0.95))


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(kind)


def render_shape_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One uint8 (size, size, 3) image; the class fixes the shape and the colour family."""
    kind = SHAPES[label % len(SHAPES)]
    palette = np.array(PALETTES[(label // len(SHAPES)) % len(PALETTES)])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = rng.uniform(0.1, 0.5, size=3)
    grad = (yy / size)[..., None] * rng.uniform(-0.2, 0.2, size=3)
    img = bg + grad + rng.normal(0, 0.03, size=(size, size, 3))
    r = rng.uniform(0.22, 0.36) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    colour = np.clip(palette + rng.normal(0, 0.08, size=3), 0, 1)
    mask = _shape_mask(kind, yy, xx, cy, cx, r)
    img[mask] = colour * rng.uniform(0.8, 1.0)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_shapes_dataset(out, num_classes: int = 10, per_class: int = 500, size: int = 32, seed: int = 0):
    """Write the synthetic class-structured image set as class folders of PNGs, or an .npz if ``out`` ends with .npz."""
    out = Path(out)
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(num_classes):
        for _ in range(per_class):
            images.append(render_shape_image(c, size, rng))
            labels.append(c)
    names = [f"{c:02d}_{SHAPES[c % len(SHAPES)]}" for c in range(num_classes)]
    if out.suffix == ".npz":
        out.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(out, images=np.stack(images), labels=np.asarray(labels), class_names=np.asarray(names))
        return out
    for c, name in enumerate(names):
        (out / name).mkdir(parents=True, exist_ok=True)
    counters = [0] * num_classes
    for img, c in zip(images, labels):
        Image.fromarray(img).save(out / names[c] / f"{counters[c]:05d}.png")
        counters[c] += 1
    return out


# ---------------------------------------------------------------------------
# Batch stream
# ---------------------------------------------------------------------------


class BatchStream:
    """Deterministic batches: step s takes positions [s*B, (s+1)*B) of a sequence of per-epoch permutations.

    Stateless in the step index, so resuming only needs the step counter.
    """

    def __init__(self, data: LabeledImages, batch_size: int, seed: int):
        if batch_size > len(data):
            raise ValidationError(f"batch_size {batch_size} exceeds dataset size {len(data)}")
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self._perm_cache = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perm_cache:
            self._perm_cache = {epoch: np.random.default_rng([self.seed, epoch]).permutation(len(self.data))}
        return self._perm_cache[epoch]

    def indices(self, step: int) -> np.ndarray:
        n = len(self.data)
        start = step * self.batch_size
        out = []
        while len(out) < self.batch_size:
            epoch, offset = divmod(start + len(out), n)
            take = min(self.batch_size - len(out), n - offset)
            out.extend(self._perm(epoch)[offset:offset + take].tolist())
        return np.asarray(out)

    def batch(self, step: int):
        idx = self.indices(step)
        t_idx = torch.from_numpy(idx)
        return t_idx, self.data.images[t_idx], self.data.labels[t_idx]


class Prefetcher:
    """Producer thread filling a bounded queue; ``put`` blocks once ``depth`` batches are waiting."""

    _DONE = object()

    def __init__(self, stream: BatchStream, start_step: int, stop_step: int, depth: int = 2):
        self.queue = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self._error = None
        self._thread = threading.Thread(target=self._run, args=(stream, start_step, stop_step), daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, stream, start, stop):
        try:
            for step in range(start, stop):
                if not self._put((step, *stream.batch(step))):
                    return
        except Exception as exc:  # surfaced on the consumer side
            self._error = exc
        self._put(self._DONE)

    def __iter__(self):
        while True:
            item = self.queue.get()
            if item is self._DONE:
                if self._error is not None:
                    raise self._error
                return
            yield item

    def close(self):
        self._stop.set()
        try:
            while True:
                self.queue.get_nowait()
        except queue.Empty:
            pass
        self._thread.join(timeout=5)
