"""File formats: PFM rasters, PNG images, OBJ/PLY meshes, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MissingInput, ParseError


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bytes(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def write_text(path, text: str) -> None:
    write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"no such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from exc


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------------------
# PFM


def encode_pfm(data: np.ndarray) -> bytes:
    """Little-endian PFM bytes. Rows are stored bottom-to-top per the format."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        kind = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3) arrays, got {a.shape}")
    h, w = a.shape[:2]
    header = kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    return header + np.ascontiguousarray(a[::-1]).tobytes()


def write_pfm(path, data: np.ndarray) -> None:
    write_bytes(path, encode_pfm(data))


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"no such file: {path}")
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ParseError(f"{path}: not a PFM file", line=1)
        dims = fh.readline().split()
        scale_line = fh.readline().strip()
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(scale_line)
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}: bad PFM header", line=2) from exc
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        raw = np.frombuffer(fh.read(), dtype=dtype)
    if raw.size != w * h * channels:
        raise ParseError(f"{path}: expected {w * h * channels} floats, found {raw.size}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return raw.reshape(shape)[::-1].astype(np.float32)


# ----------------------------------------------------------------------------
# PNG


def write_png(path, image: np.ndarray) -> None:
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    with atomic_path(path) as tmp:
        # fixed parameters keep output bytes reproducible
        Image.fromarray(a).save(tmp, format="PNG", optimize=False, compress_level=6)


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"no such file: {path}")
    with Image.open(path) as im:
        return np.array(im)


# ----------------------------------------------------------------------------
# meshes


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def read_obj(path):
    """Vertices and triangles from an ASCII OBJ; polygons are fan-triangulated.

    Returns ``(vertices (N, 3) float64, faces (M, 3) int64, groups)`` where
    ``groups`` maps each face to the most recent ``g``/``o`` name.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"no such file: {path}")
    verts, faces, groups = [], [], []
    group = ""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(t) for t in parts[1:4]])
                except ValueError as exc:
                    raise ParseError(f"{path}: bad vertex", line=lineno) from exc
                if len(verts[-1]) != 3:
                    raise ParseError(f"{path}: vertex needs 3 coordinates", line=lineno)
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError as exc:
                        raise ParseError(f"{path}: bad face index {tok!r}", line=lineno) from exc
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ParseError(f"{path}: face with < 3 vertices", line=lineno)
                for tri in _fan(idx):
                    faces.append(tri)
                    groups.append(group)
            elif tag in ("g", "o"):
                group = " ".join(parts[1:])
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError(f"{path}: face index out of range")
    return v, f, groups


def write_obj(path, vertices, faces, groups=None) -> None:
    lines = []
    for x, y, z in np.asarray(vertices, dtype=np.float64):
        lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
    current = None
    for k, tri in enumerate(np.asarray(faces, dtype=np.int64)):
        if groups is not None and groups[k] != current:
            current = groups[k]
            lines.append(f"g {current}")
        lines.append("f {} {} {}".format(*(int(i) + 1 for i in tri)))
    write_text(path, "\n".join(lines) + "\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path):
    """Binary little-endian PLY with ``vertex`` (x, y, z) and ``face`` lists."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"no such file: {path}")
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file", line=1)
    header = data[:end].decode("ascii").splitlines()
    body = data[data.index(b"\n", end) + 1:]
    elements = []
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "binary_little_endian":
            raise ParseError(f"{path}: only binary_little_endian PLY is supported", line=lineno)
        if parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1]["props"].append(("list", parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                elements[-1]["props"].append(("scalar", parts[2], _PLY_TYPES[parts[1]]))
    offset = 0
    verts = np.zeros((0, 3))
    faces = []
    for el in elements:
        if all(p[0] == "scalar" for p in el["props"]):
            dt = np.dtype([(p[1], "<" + p[2]) for p in el["props"]])
            arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
            offset += dt.itemsize * el["count"]
            if el["name"] == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            continue
        for _ in range(el["count"]):
            row = []
            for prop in el["props"]:
                if prop[0] == "scalar":
                    size = np.dtype(prop[2]).itemsize
                    offset += size
                else:
                    _, name, ctype, itype = prop
                    n = int(np.frombuffer(body, dtype="<" + ctype, count=1, offset=offset)[0])
                    offset += np.dtype(ctype).itemsize
                    vals = np.frombuffer(body, dtype="<" + itype, count=n, offset=offset)
                    offset += np.dtype(itype).itemsize * n
                    if name in ("vertex_indices", "vertex_index"):
                        row = [int(v) for v in vals]
            if el["name"] == "face":
                faces.extend(_fan(row))
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(verts)):
        raise ParseError(f"{path}: face index out of range")
    return verts, f


def write_ply(path, vertices, faces) -> None:
    v = np.asarray(vertices, dtype="<f8")
    f = np.asarray(faces, dtype="<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(v)}\nproperty double x\nproperty double y\nproperty double z\n"
        f"element face {len(f)}\nproperty list uchar int vertex_indices\nend_header\n"
    ).encode("ascii")
    rows = b"".join(struct.pack("<B3i", 3, *map(int, tri)) for tri in f)
    write_bytes(path, header + v.tobytes() + rows)


_SAFE = re.compile(r"[^A-Za-z0-9_.-]+")


def safe_name(*parts: str) -> str:
    """Filesystem-safe identifier joined from ``parts``."""
    return "__".join(_SAFE.sub("-", str(p)) for p in parts)
