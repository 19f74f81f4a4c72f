"""Scene bundle disk formats: binary PPM (P6), PFM depth maps, the camera
text format, and key=value manifests.

Camera file layout (whitespace-exact on write):

    extrinsic
    <4 lines x 4 floats>          world-to-camera
    <blank>
    intrinsic
    <3 lines x 3 floats>
    <blank>
    depth_min depth_interval [num_planes [depth_max]]

PFM files are little-endian grayscale ('Pf', scale -1.0) with rows stored
bottom-to-top.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .cameras import CameraModel
from .scenes import SceneBundle


class DataFormatError(ValueError):
    """Malformed on-disk data; message carries file and position context."""


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"PPM writer needs uint8 [H,W,3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise DataFormatError(f"{path}: not a binary PPM (expected P6 magic at byte 0)")
    # header: magic, width, height, maxval, single whitespace, raster
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated header at byte {pos}")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataFormatError(f"{path}: non-numeric header token near byte {pos}") from None
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise DataFormatError(
            f"{path}: truncated raster at byte {pos + len(raster)} (need {need} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pfm(path, depth: np.ndarray) -> None:
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError(f"PFM writer needs [H,W], got {d.shape}")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(d[::-1].tobytes())  # bottom-to-top rows


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"Pf"):
        raise DataFormatError(f"{path}: not a grayscale PFM (expected Pf magic at byte 0)")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated header at byte {pos}")
        tokens.append(data[start:pos])
    pos += 1
    try:
        w, h = int(tokens[0]), int(tokens[1])
        scale = float(tokens[2])
    except ValueError:
        raise DataFormatError(f"{path}: bad header token near byte {pos}") from None
    endian = "<" if scale < 0 else ">"
    need = w * h * 4
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise DataFormatError(
            f"{path}: truncated raster at byte {pos + len(raster)} (need {need} bytes)")
    arr = np.frombuffer(raster, dtype=endian + "f4").reshape(h, w)
    return arr[::-1].astype(np.float64)


def _fmt_row(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def write_cam(path, cam: CameraModel) -> None:
    lines = ["extrinsic"]
    lines += [_fmt_row(cam.T[i]) for i in range(4)]
    lines.append("")
    lines.append("intrinsic")
    lines += [_fmt_row(cam.K[i]) for i in range(3)]
    lines.append("")
    lines.append(f"{cam.depth_min!r} {cam.depth_interval!r} {cam.num_planes}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_cam(path, default_num_planes: int = 48) -> CameraModel:
    with open(path, "r", encoding="ascii") as f:
        raw = [ln.strip() for ln in f]
    lines = [ln for ln in raw if ln != ""]
    try:
        if lines[0] != "extrinsic":
            raise DataFormatError(f"{path}: line 1 must be 'extrinsic', got {lines[0]!r}")
        T = np.array([[float(v) for v in lines[1 + i].split()] for i in range(4)])
        if lines[5] != "intrinsic":
            raise DataFormatError(f"{path}: expected 'intrinsic' header, got {lines[5]!r}")
        K = np.array([[float(v) for v in lines[6 + i].split()] for i in range(3)])
        depth_tokens = lines[9].split()
    except (IndexError, ValueError) as e:
        raise DataFormatError(f"{path}: malformed camera file ({e})") from None
    if len(depth_tokens) < 2:
        raise DataFormatError(f"{path}: depth line needs 'depth_min depth_interval'")
    depth_min = float(depth_tokens[0])
    depth_interval = float(depth_tokens[1])
    num_planes = int(float(depth_tokens[2])) if len(depth_tokens) >= 3 else default_num_planes
    return CameraModel(K, T, depth_min, depth_interval, num_planes)


def write_manifest(path, entries: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k in entries:
            f.write(f"{k}={entries[k]}\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            out[k] = v
    return out


def write_bundle(bundle: SceneBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (img, cam, gt) in enumerate(zip(bundle.images, bundle.cameras, bundle.gt_depth)):
        write_ppm(d / f"view_{i}.ppm", img)
        write_cam(d / f"cam_{i}.txt", cam)
        write_pfm(d / f"gt_depth_{i}.pfm", gt)
    write_manifest(d / "manifest.txt", bundle.manifest)


def read_bundle(directory) -> SceneBundle:
    d = Path(directory)
    manifest = read_manifest(d / "manifest.txt")
    images, cams, depths = [], [], []
    i = 0
    while (d / f"view_{i}.ppm").exists():
        images.append(read_ppm(d / f"view_{i}.ppm"))
        cams.append(read_cam(d / f"cam_{i}.txt"))
        depths.append(read_pfm(d / f"gt_depth_{i}.pfm"))
        i += 1
    if not images:
        raise DataFormatError(f"{directory}: no view_<i>.ppm files found")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DataFormatError(f"{directory}: views disagree on resolution: {shapes}")
    for i, (img, gt) in enumerate(zip(images, depths)):
        if gt.shape != img.shape[:2]:
            raise DataFormatError(f"{directory}: gt_depth_{i} shape {gt.shape} does not "
                                  f"match image {img.shape[:2]}")
    return SceneBundle(images, cams, depths, manifest)


def list_bundles(directory) -> list[Path]:
    """Scene bundle subdirectories (those carrying a manifest), sorted by name."""
    root = Path(directory)
    if not root.is_dir():
        raise DataFormatError(f"{directory}: not a directory")
    return sorted(p for p in root.iterdir() if (p / "manifest.txt").is_file())
