"""Synthetic digit corpus in MNIST IDX format.

Stand-in for the real MNIST files in offline environments: renders 5x7
digit glyphs at 28x28 with random placement, stroke intensity, scale and
pixel noise, and serializes them to bit-exact IDX image/label files so
the normal ingestion path is exercised end to end.
"""

import struct

import numpy as np

GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}

_BITMAPS = {d: np.array([[int(ch) for ch in row] for row in rows], dtype=np.float32)
            for d, rows in GLYPHS.items()}


def render_digit(digit, rng, size=28):
    """One noisy 28x28 rendering of a digit; returns float32 [0,1] grid.

    Stroke dropout and an occasional faint "ghost" of another digit give
    intra-class variety and boundary cases (sloppy handwriting), while the
    background stays exactly zero so clean images drive only a sparse
    subset of filters.
    """
    glyph = _BITMAPS[digit].copy()
    sy, sx = 3, 3  # stroke scale
    big = np.repeat(np.repeat(glyph, sy, axis=0), sx, axis=1)
    big = big * (rng.random(big.shape) > 0.2)  # stroke dropout
    if rng.random() < 0.3:  # faint overlay of a competing digit
        other = int((digit + int(rng.integers(1, 10))) % 10)
        ghost = np.repeat(np.repeat(_BITMAPS[other], sy, axis=0), sx, axis=1)
        ghost = ghost * (rng.random(ghost.shape) > 0.35)
        big = np.maximum(big, ghost * float(rng.uniform(0.3, 0.6)))
    gh, gw = big.shape
    canvas = np.zeros((size, size), dtype=np.float32)
    oy = int(rng.integers(0, size - gh + 1))
    ox = int(rng.integers(0, size - gw + 1))
    intensity = float(rng.uniform(0.55, 1.0))
    canvas[oy:oy + gh, ox:ox + gw] = big * intensity
    # clutter: a few faint random strokes elsewhere on the canvas
    for _ in range(int(rng.integers(1, 4))):
        r = int(rng.integers(0, size))
        c = int(rng.integers(0, size - 6))
        horiz = bool(rng.integers(0, 2))
        val = float(rng.uniform(0.2, 0.6))
        if horiz:
            canvas[r, c:c + 6] = np.maximum(canvas[r, c:c + 6], val)
        else:
            rr = min(r, size - 6)
            canvas[rr:rr + 6, c] = np.maximum(canvas[rr:rr + 6, c], val)
    canvas += rng.normal(0.0, 0.1, size=canvas.shape).astype(np.float32)
    return np.clip(canvas, 0.0, 1.0)


def make_corpus(per_class, seed, size=28):
    """Balanced digit corpus: returns (images [N,28,28] float32, labels [N])."""
    rng = np.random.default_rng(seed)
    images = []
    labels = []
    for digit in range(10):
        for _ in range(per_class):
            images.append(render_digit(digit, rng, size=size))
            labels.append(digit)
    order = np.random.default_rng(seed + 1).permutation(len(images))
    # quantize to 8-bit depth so in-memory pixels match an IDX round trip exactly
    images = np.round(np.stack(images)[order] * 255.0).astype(np.float32) / np.float32(255.0)
    labels = np.asarray(labels, dtype=np.uint8)[order]
    return images, labels


def write_idx(images, labels, images_path, labels_path):
    """Serialize a corpus to MNIST IDX image/label files (big-endian, 1 byte/pixel)."""
    images = np.asarray(images)
    n, rows, cols = images.shape
    bytes_img = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        fh.write(bytes_img.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def write_corpus(data_dir, train_per_class=500, test_per_class=100, seed=0):
    """Write train/test IDX file pairs into data_dir; returns the four paths."""
    import os
    os.makedirs(data_dir, exist_ok=True)
    paths = {}
    for split, per_class, offset in (("train", train_per_class, 0), ("t10k", test_per_class, 7919)):
        images, labels = make_corpus(per_class, seed + offset)
        ip = os.path.join(data_dir, f"{split}-images-idx3-ubyte")
        lp = os.path.join(data_dir, f"{split}-labels-idx1-ubyte")
        write_idx(images, labels, ip, lp)
        paths[split] = (ip, lp)
    return paths
