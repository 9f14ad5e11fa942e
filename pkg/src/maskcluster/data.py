"""Dataset ingestion, the procedural shapes set, and the kNN probe."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, forward_views
from .tensor import Tensor

logger = logging.getLogger(__name__)

SHAPE_NAMES = ("circle", "square", "triangle", "plus", "ring")
COLORS = ((0.9, 0.2, 0.2), (0.25, 0.45, 0.95))


class IngestionError(ValueError):
    """Dataset cannot be read as declared."""


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic:shapes"
    image_size: int = 32
    n: int = 512
    seed: int = 0


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx ** 2 + dy ** 2 < r ** 2
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) < r
    if kind == "triangle":
        return (dy > -r) & (dy < r) & (np.abs(dx) < (r - dy) / 2)
    if kind == "plus":
        return ((np.abs(dx) < r / 3) & (np.abs(dy) < r)) | \
               ((np.abs(dy) < r / 3) & (np.abs(dx) < r))
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 < r ** 2) & (d2 > (r / 2) ** 2)
    raise ValueError(f"unknown shape {kind}")


def make_shapes(n: int, size: int = 32,
                seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """10 classes of colored geometric shapes: 5 shapes x 2 colors on a
    noisy gray background. Returns (images (n,3,size,size) in [0,1], labels)."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, size, size))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = int(rng.integers(0, 10))
        shape = SHAPE_NAMES[label % 5]
        color = COLORS[label // 5]
        img = np.full((3, size, size), 0.5) + rng.normal(0, 0.04, (3, size, size))
        cx = size / 2 + rng.uniform(-size / 8, size / 8)
        cy = size / 2 + rng.uniform(-size / 8, size / 8)
        r = rng.uniform(size / 4, size / 2.4)
        mask = _shape_mask(shape, size, cx, cy, r)
        for c in range(3):
            img[c][mask] = color[c] + rng.normal(0, 0.02)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = label
    return images, labels


def write_shapes_dataset(out_dir: str, n: int, size: int = 32, seed: int = 0):
    """Write the shapes set to disk as root/<label>/img_*.png."""
    from PIL import Image

    images, labels = make_shapes(n, size, seed)
    for i in range(n):
        cls_dir = os.path.join(out_dir, f"{labels[i]:02d}")
        os.makedirs(cls_dir, exist_ok=True)
        arr = (images[i].transpose(1, 2, 0) * 255).round().astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(cls_dir, f"img_{i:05d}.png"))


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    from .trainer import _resize_bilinear

    if img.shape[1] == size and img.shape[2] == size:
        return img
    return _resize_bilinear(img, size, size)


def load_dataset(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """(images, labels) in deterministic shuffled order under spec.seed."""
    if spec.source.startswith("synthetic:"):
        name = spec.source.split(":", 1)[1]
        if name != "shapes":
            raise IngestionError(f"unknown synthetic dataset '{name}'")
        images, labels = make_shapes(spec.n, spec.image_size, spec.seed)
    else:
        images, labels = _load_image_folder(spec)
    order = np.random.default_rng(spec.seed).permutation(len(labels))
    return images[order], labels[order]


def _load_image_folder(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    from PIL import Image

    root = spec.source
    if not os.path.isdir(root):
        raise IngestionError(f"dataset root '{root}' is not a directory")
    class_dirs = sorted(d for d in os.listdir(root)
                        if os.path.isdir(os.path.join(root, d)))
    if not class_dirs:
        raise IngestionError(f"dataset root '{root}' has no class folders")
    images, labels = [], []
    skipped = 0
    for label, cls in enumerate(class_dirs):
        cls_path = os.path.join(root, cls)
        count = 0
        for fname in sorted(os.listdir(cls_path)):
            fpath = os.path.join(cls_path, fname)
            try:
                with Image.open(fpath) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except Exception:
                skipped += 1
                logger.warning("skipping undecodable file %s", fpath)
                continue
            images.append(_resize(arr.transpose(2, 0, 1), spec.image_size))
            labels.append(label)
            count += 1
        if count == 0:
            raise IngestionError(f"class folder '{cls}' has no decodable images")
    if skipped:
        logger.warning("skipped %d undecodable files", skipped)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def embed_images(params: dict, ecfg: EncoderConfig, images: np.ndarray,
                 prefix: str = "teacher.enc.", batch: int = 64) -> np.ndarray:
    """L2-normalized class-token embeddings from a frozen encoder."""
    enc = {k[len(prefix):]: t.detach()
           for k, t in params.items() if k.startswith(prefix)}
    chunks = []
    for i in range(0, images.shape[0], batch):
        last = forward_views(Tensor(images[i:i + batch]), enc, ecfg)[-1]
        chunks.append(last.data[:, 0, :])
    emb = np.concatenate(chunks, axis=0)
    return emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)


def knn_probe(params: dict, ecfg: EncoderConfig,
              train_images: np.ndarray, train_labels: np.ndarray,
              test_images: np.ndarray, test_labels: np.ndarray,
              k: int = 5) -> float:
    """k-nearest-neighbor majority-vote accuracy on frozen teacher
    embeddings; ties break toward the lowest label index."""
    if k > len(train_labels):
        raise ValueError(f"k={k} exceeds train set size {len(train_labels)}")
    train = embed_images(params, ecfg, train_images)
    test = embed_images(params, ecfg, test_images)
    sims = test @ train.T
    n_classes = int(train_labels.max()) + 1
    correct = 0
    for i in range(test.shape[0]):
        nearest = np.argsort(-sims[i], kind="stable")[:k]
        votes = np.bincount(train_labels[nearest], minlength=n_classes)
        if votes.argmax() == test_labels[i]:
            correct += 1
    return correct / test.shape[0]
