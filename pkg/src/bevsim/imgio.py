"""Zero-dependency PGM/PPM writers and feature-map image export."""

import numpy as np


def write_pgm(path, img):
    """Binary P5 graymap from a (H, W) uint8 array."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_ppm(path, img):
    """Binary P6 pixmap from a (H, W, 3) uint8 array."""
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pnm(path):
    """Read back P5/P6 files written by this module (tests and tooling)."""
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(b"\n", 3)
    kind, dims, maxval, payload = parts[0], parts[1], parts[2], parts[3]
    w, h = (int(v) for v in dims.split())
    if maxval != b"255":
        raise ValueError(f"{path}: unsupported maxval {maxval!r}")
    if kind == b"P5":
        return np.frombuffer(payload, dtype=np.uint8, count=h * w).reshape(h, w)
    if kind == b"P6":
        return np.frombuffer(payload, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    raise ValueError(f"{path}: unknown PNM kind {kind!r}")


def feature_to_gray(feat):
    """Channel-average and min-max scale a (C, H, W) map to 8-bit.

    A constant map (zero range) renders as uniform mid-gray rather than
    dividing by zero. Returns (image, lo, hi) with the scaling constants.
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim == 3:
        feat = feat.mean(axis=0)
    lo = float(feat.min()) if feat.size else 0.0
    hi = float(feat.max()) if feat.size else 0.0
    if hi - lo < 1e-12:
        return np.full(feat.shape, 128, dtype=np.uint8), lo, hi
    img = np.round(255.0 * (feat - lo) / (hi - lo)).astype(np.uint8)
    return img, lo, hi
