"""File formats: GML1 latents, key/mask JSON, PNG images and masks, transform JSON."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import GeometricTransform
from .spectral import LatentGrid, RingMask, WatermarkKey, make_ring_mask

LATENT_MAGIC = b"GML1"


def write_latent(path, values) -> Path:
    """``GML1``, u32 LE c, h, w, then ``c*h*w`` LE float32 values, row-major per channel."""
    v = values.values if isinstance(values, LatentGrid) else np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise ValueError(f"expected a (c, h, w) array, got shape {v.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(LATENT_MAGIC + struct.pack("<3I", *v.shape) + v.astype("<f4").tobytes())
    return path


def read_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != LATENT_MAGIC:
        raise ValueError(f"{path}: not a GML1 file (bad magic)")
    c, h, w = struct.unpack("<3I", data[4:16])
    body = np.frombuffer(data[16:], dtype="<f4")
    if body.size != c * h * w:
        raise ValueError(f"{path}: header says {c}x{h}x{w} values, found {body.size}")
    return body.astype(np.float64).reshape(c, h, w)


def read_latent(path) -> LatentGrid:
    return LatentGrid(read_array(path))


def write_key(path, mask: RingMask, key: WatermarkKey) -> Path:
    doc = {
        "width": mask.width,
        "height": mask.height,
        "r_min": mask.r_min,
        "r_max": mask.r_max,
        "channel": mask.channel,
        "seed": int(key.seed),
        "coords": mask.coords.tolist(),
        "eta": key.values.tolist(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def read_key(path) -> tuple[RingMask, WatermarkKey]:
    """Rebuild the mask from its bounds and check the stored coordinate list."""
    doc = json.loads(Path(path).read_text())
    mask = make_ring_mask(int(doc["width"]), int(doc["height"]), float(doc["r_min"]),
                          float(doc["r_max"]), int(doc.get("channel", 0)))
    coords = np.asarray(doc["coords"], dtype=np.int64).reshape(-1, 2)
    if not np.array_equal(coords, mask.coords):
        raise ValueError(f"{path}: coordinate list does not match the ring bounds")
    eta = np.asarray(doc["eta"], dtype=np.float64)
    if eta.shape != (len(mask),):
        raise ValueError(f"{path}: {eta.size} key values for {len(mask)} coordinates")
    return mask, WatermarkKey(eta, int(doc["seed"]))


def write_png(path, img) -> Path:
    """8-bit PNG of a ``(C, H, W)`` or ``(H, W)`` image, clamped to [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] == 1:
            a = a[0]
        else:
            a = a.transpose(1, 2, 0)
    u8 = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path)
    return path


def read_png(path) -> np.ndarray:
    """``(3, H, W)`` float image in [0, 1]; grayscale is replicated, alpha dropped."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return a.transpose(2, 0, 1)


def read_image(path) -> np.ndarray:
    """PNG for display images, GML1 for lossless signal images."""
    return read_array(path) if Path(path).suffix.lower() == ".gml" else read_png(path)


def write_image(path, img) -> Path:
    return write_latent(path, img) if Path(path).suffix.lower() == ".gml" else write_png(path, img)


def write_mask_png(path, mask) -> Path:
    m = np.asarray(mask, dtype=bool)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(m).convert("1").save(path)
    return path


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


def read_transform(path) -> GeometricTransform:
    return GeometricTransform.from_json(json.loads(Path(path).read_text()))


def write_transform(path, t: GeometricTransform) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(t.to_json(), indent=1) + "\n")
    return path
