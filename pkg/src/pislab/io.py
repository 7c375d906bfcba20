"""Plain-file artifacts: binary PPM/PGM images, JSONL datasets and overlays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .scenes import DatasetRecord

OVERLAY_COLOR = (1.0, 0.0, 1.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 by rounding; integer input passes through."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    if img.dtype == bool:
        return img.astype(np.uint8) * 255
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(img: np.ndarray) -> bytes:
    """P6 for (H, W, 3) arrays, P5 for (H, W) arrays."""
    data = to_bytes(img)
    if data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    elif data.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot encode array of shape {data.shape} as PNM")
    h, w = data.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes()


def decode_pnm(blob: bytes) -> np.ndarray:
    """Inverse of :func:`encode_pnm`; returns uint8 arrays."""
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6"):
        raise ValueError("not a binary PPM/PGM file")
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    # the pixel block starts one whitespace byte after maxval
    raw = blob[len(blob) - n:] if len(parts[4]) >= n else None
    if raw is None:
        raise ValueError("truncated image data")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_pnm(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pnm(img))
    return path


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def blend_overlay(image: np.ndarray, mask: np.ndarray, color=OVERLAY_COLOR) -> np.ndarray:
    """0.5 * image + 0.5 * color on mask pixels, the image elsewhere."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} differ")
    out = image.copy()
    out[mask] = 0.5 * image[mask] + 0.5 * np.asarray(color, dtype=np.float32)
    return out


def render_overlay(image: np.ndarray, mask: np.ndarray, out_path, color=OVERLAY_COLOR) -> Path:
    return write_pnm(out_path, blend_overlay(image, mask, color))


# -- JSONL -----------------------------------------------------------------------

def dumps(obj) -> str:
    """Canonical single-line JSON used for every artifact we hash."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(dumps(r) + "\n" for r in rows))
    return path


def read_jsonl(path) -> list[dict]:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: {e.msg}") from e
    return rows


def write_dataset(path, records: list[DatasetRecord]) -> Path:
    return write_jsonl(path, (r.to_dict() for r in records))


def read_dataset(path) -> list[DatasetRecord]:
    try:
        return [DatasetRecord.from_dict(d) for d in read_jsonl(path)]
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: malformed dataset record ({e})") from e
