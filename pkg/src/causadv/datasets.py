"""MNIST IDX and CIFAR-10 binary parsing plus evaluation-set sampling.

Files must be pre-decompressed. Pixels are scaled to [0,1]; no mean/std
normalization is applied, so the attack clipping box is always [0,1].
"""

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
CIFAR_CLASSES = 10


class DatasetError(Exception):
    pass


class BadMagic(DatasetError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [C,H,W] float32 in [0,1]
    label: int
    id: str


@dataclass
class EvalSet:
    by_class: Dict[int, List[LabeledImage]]
    classes: int
    per_class: int

    def all(self):
        out = []
        for c in sorted(self.by_class):
            out.extend(self.by_class[c])
        return out


def load_mnist(images_path, labels_path):
    """Parse an MNIST IDX image/label file pair into LabeledImages."""
    with open(images_path, "rb") as fh:
        img_data = fh.read()
    with open(labels_path, "rb") as fh:
        lbl_data = fh.read()
    if len(img_data) < 16:
        raise DatasetError(f"{images_path}: file too short for an IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", img_data[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise BadMagic(f"{images_path}: expected image magic {MNIST_IMAGE_MAGIC:#010x}, "
                       f"got {magic:#010x}")
    if len(lbl_data) < 8:
        raise DatasetError(f"{labels_path}: file too short for an IDX label header")
    lmagic, lcount = struct.unpack(">II", lbl_data[:8])
    if lmagic != MNIST_LABEL_MAGIC:
        raise BadMagic(f"{labels_path}: expected label magic {MNIST_LABEL_MAGIC:#010x}, "
                       f"got {lmagic:#010x}")
    if count != lcount:
        raise DatasetError(f"image count {count} != label count {lcount}")
    need = 16 + count * rows * cols
    if len(img_data) < need:
        raise DatasetError(f"{images_path}: expected {need} bytes, got {len(img_data)}")
    if len(lbl_data) < 8 + count:
        raise DatasetError(f"{labels_path}: expected {8 + count} bytes, got {len(lbl_data)}")
    pixels = np.frombuffer(img_data, dtype=np.uint8, count=count * rows * cols, offset=16)
    pixels = pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0
    labels = np.frombuffer(lbl_data, dtype=np.uint8, count=count, offset=8)
    stem = os.path.basename(str(images_path))
    return [LabeledImage(pixels=pixels[i], label=int(labels[i]), id=f"{stem}:{i}")
            for i in range(count)]


def load_cifar10(batch_path):
    """Parse a CIFAR-10 binary batch (1 label byte + 3072 RGB-plane bytes per record)."""
    with open(batch_path, "rb") as fh:
        data = fh.read()
    if len(data) % CIFAR_RECORD_BYTES != 0:
        raise DatasetError(f"{batch_path}: length {len(data)} is not a multiple of "
                           f"{CIFAR_RECORD_BYTES}")
    count = len(data) // CIFAR_RECORD_BYTES
    raw = np.frombuffer(data, dtype=np.uint8).reshape(count, CIFAR_RECORD_BYTES)
    labels = raw[:, 0]
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        raise DatasetError(f"{batch_path}: record {bad[0]} has label {labels[bad[0]]} >= 10")
    pixels = raw[:, 1:].reshape(count, 3, 32, 32).astype(np.float32) / 255.0
    stem = os.path.basename(str(batch_path))
    return [LabeledImage(pixels=pixels[i], label=int(labels[i]), id=f"{stem}:{i}")
            for i in range(count)]


def build_eval_set(images, classes, per_class, seed):
    """Sample per_class images per class, uniformly without replacement, seeded."""
    groups = {c: [] for c in range(classes)}
    for img in images:
        if img.label in groups:
            groups[img.label].append(img)
    rng = np.random.default_rng(seed)
    by_class = {}
    for c in range(classes):
        pool = groups[c]
        if len(pool) < per_class:
            raise DatasetError(f"class {c} has only {len(pool)} images, need {per_class}")
        picked = rng.choice(len(pool), size=per_class, replace=False) if per_class else []
        by_class[c] = [pool[int(i)] for i in picked]
    return EvalSet(by_class=by_class, classes=classes, per_class=per_class)
