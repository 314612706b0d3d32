"""Image and buffer files: binary PPM, optional PNG, raw f32 planes."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray):
    data = to_uint8(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError("expected an H×W×3 image")
    H, W, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    W, H = int(tokens[1]), int(tokens[2])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=H * W * 3, offset=pos)
    return data.reshape(H, W, 3).astype(np.float64) / 255.0


def write_png(path, img: np.ndarray):
    from PIL import Image

    Image.fromarray(to_uint8(img)).save(path)


def write_image(path, img: np.ndarray):
    if str(path).lower().endswith(".png"):
        write_png(path, img)
    else:
        write_ppm(path, img)


def write_planes(path, buf: np.ndarray):
    """Little-endian f32 raw planes (channel-major) plus a JSON sidecar."""
    buf = np.asarray(buf)
    if buf.ndim == 2:
        buf = buf[..., None]
    H, W, C = buf.shape
    path = Path(path)
    np.ascontiguousarray(np.moveaxis(buf, -1, 0)).astype("<f4").tofile(path)
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump({"H": H, "W": W, "channels": C, "dtype": "f32le", "layout": "planar"}, fh)


def read_planes(path) -> np.ndarray:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as fh:
        meta = json.load(fh)
    data = np.fromfile(path, dtype="<f4").reshape(meta["channels"], meta["H"], meta["W"])
    return np.moveaxis(data, 0, -1).astype(np.float64)
