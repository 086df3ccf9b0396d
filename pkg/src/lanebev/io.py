"""On-disk formats: tensor blobs, point clouds, calibration/pose text, PNG."""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .geometry import CameraModel, Pose

TENSOR_MAGIC = b"TNSR"
POINTS_MAGIC = b"PCL1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2,
             np.dtype(np.bool_): 2}


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    code = _CODE_FOR[arr.dtype]
    if arr.ndim > 255:
        raise FormatError("rank too large")
    header = TENSOR_MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 6)
    offset = 6 + 8 * rank
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != count * dtype.itemsize:
        raise FormatError("payload length does not match dims")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_tensors(directory, tensors: Dict[str, np.ndarray]) -> None:
    """One ``<name>.tnsr`` blob per entry."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in tensors.items():
        save_tensor(d / f"{name}.tnsr", arr)


def load_tensors(directory) -> Dict[str, np.ndarray]:
    d = Path(directory)
    return {p.stem: load_tensor(p) for p in sorted(d.glob("*.tnsr"))}


def save_points(path, points: np.ndarray) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 4)
    Path(path).write_bytes(POINTS_MAGIC + struct.pack("<Q", len(pts)) + pts.tobytes())


def load_points(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != POINTS_MAGIC:
        raise FormatError(f"{path}: bad point-cloud magic")
    (n,) = struct.unpack_from("<Q", buf, 4)
    if len(buf) != 12 + 16 * n:
        raise FormatError(f"{path}: truncated point cloud")
    return np.frombuffer(buf, dtype="<f4", count=4 * n, offset=12).reshape(n, 4).astype(np.float32)


def _fmt(x: float) -> str:
    return repr(float(x))


def parse_keyvalues(text: str) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _floats(s: str, n: int, key: str):
    # float() is locale independent
    vals = [float(tok) for tok in s.replace(",", " ").split()]
    if len(vals) != n:
        raise FormatError(f"{key}: expected {n} values, got {len(vals)}")
    return vals


def format_calibration(cam: CameraModel) -> str:
    R = cam.extrinsics.rotation.reshape(-1)
    t = cam.extrinsics.translation
    lines = [f"fx = {_fmt(cam.fx)}", f"fy = {_fmt(cam.fy)}", f"cx = {_fmt(cam.cx)}",
             f"cy = {_fmt(cam.cy)}", f"width = {cam.width}", f"height = {cam.height}",
             "R = " + " ".join(_fmt(v) for v in R), "t = " + " ".join(_fmt(v) for v in t)]
    return "\n".join(lines) + "\n"


def parse_calibration(text: str) -> CameraModel:
    kv = parse_keyvalues(text)
    try:
        R = np.array(_floats(kv["R"], 9, "R")).reshape(3, 3)
        t = _floats(kv["t"], 3, "t")
        return CameraModel(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                           int(kv["width"]), int(kv["height"]), Pose(R, t))
    except KeyError as e:
        raise FormatError(f"calibration missing key {e.args[0]}") from None


def format_pose(p: Pose) -> str:
    return ("R = " + " ".join(_fmt(v) for v in p.rotation.reshape(-1)) + "\n"
            + "t = " + " ".join(_fmt(v) for v in p.translation) + "\n")


def parse_pose(text: str) -> Pose:
    kv = parse_keyvalues(text)
    try:
        return Pose(np.array(_floats(kv["R"], 9, "R")).reshape(3, 3), _floats(kv["t"], 3, "t"))
    except KeyError as e:
        raise FormatError(f"pose missing key {e.args[0]}") from None


def save_png(path, image: np.ndarray) -> None:
    """Write an HxW or HxWx3 array; floats are taken to be in [0, 1]."""
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    tmp = f"{path}.tmp"
    Image.fromarray(arr).save(tmp, format="PNG")
    os.replace(tmp, path)


def load_png(path) -> np.ndarray:
    """Read a PNG as a uint8 HxWx3 (or HxW) array."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).copy()
