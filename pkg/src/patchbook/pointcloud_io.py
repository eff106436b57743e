"""Readers and writers for PLY, OBJ and XYZ point-cloud files.

Supported subset:
  PLY  ascii and binary_little_endian, float32/float64 x/y/z, optional
       nx/ny/nz and uchar red/green/blue vertex properties.
  OBJ  'v' lines; 'f' lines are only consumed by the mesh surface sampler.
  XYZ  whitespace-separated floats, 3 or 6 columns.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BadCount, EmptyCloud, MalformedFile
from .geometry import PointCloud

_PLY_SCALARS = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "char": ("<i1", 1),
    "int8": ("<i1", 1),
    "short": ("<i2", 2),
    "ushort": ("<u2", 2),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "uint": ("<u4", 4),
    "uint32": ("<u4", 4),
}


def load_pointcloud(path, fmt: str | None = None, sample_n: int | None = None, seed: int = 0) -> PointCloud:
    """Load a point cloud, inferring the format from the suffix by default.

    For OBJ meshes, sample_n switches to uniform surface sampling of
    sample_n points (area-weighted over triangulated faces). For the other
    formats sample_n must be None.
    """
    p = Path(path)
    if not p.exists():
        raise MalformedFile(f"no such file: {p}")
    kind = (fmt or p.suffix.lstrip(".")).lower()
    if kind == "ply":
        cloud = _read_ply(p)
    elif kind == "obj":
        cloud = _read_obj(p, sample_n=sample_n, seed=seed)
        return cloud
    elif kind == "xyz":
        cloud = _read_xyz(p)
    else:
        raise MalformedFile(f"unknown point cloud format: {kind!r}")
    if sample_n is not None:
        raise MalformedFile("surface sampling is only available for OBJ meshes")
    return cloud


def _read_xyz(path: Path) -> PointCloud:
    rows = []
    ncols = None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if ncols is None:
            ncols = len(parts)
            if ncols not in (3, 6):
                raise MalformedFile(f"{path}:{lineno}: expected 3 or 6 columns, got {ncols}")
        if len(parts) != ncols:
            raise MalformedFile(f"{path}:{lineno}: inconsistent column count")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise EmptyCloud(f"{path}: no points")
    data = np.asarray(rows, dtype=np.float64)
    if data.shape[1] == 6:
        return PointCloud(data[:, :3], _renormalize(data[:, 3:]))
    return PointCloud(data[:, :3])


def _renormalize(normals: np.ndarray) -> np.ndarray:
    lens = np.linalg.norm(normals, axis=1)
    if np.any(lens <= 0):
        raise MalformedFile("zero-length normal in file")
    return normals / lens[:, None]


def _read_obj(path: Path, sample_n: int | None, seed: int) -> PointCloud:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MalformedFile(f"{path}:{lineno}: short vertex line")
            try:
                verts.append([float(v) for v in parts[1:4]])
            except ValueError as exc:
                raise MalformedFile(f"{path}:{lineno}: {exc}") from exc
        elif tag == "f" and sample_n is not None:
            idx = []
            for tok in parts[1:]:
                head = tok.split("/")[0]
                try:
                    i = int(head)
                except ValueError as exc:
                    raise MalformedFile(f"{path}:{lineno}: bad face index {tok!r}") from exc
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) < 3:
                raise MalformedFile(f"{path}:{lineno}: face with < 3 vertices")
            faces.append(idx)
    if not verts:
        raise EmptyCloud(f"{path}: no vertices")
    vertices = np.asarray(verts, dtype=np.float64)
    if sample_n is None:
        return PointCloud(vertices)
    if sample_n < 1:
        raise BadCount("sample_n must be >= 1")
    if not faces:
        raise MalformedFile(f"{path}: surface sampling requested but no faces present")
    tris = []
    for f in faces:
        for b, c in zip(f[1:-1], f[2:]):  # fan triangulation
            tris.append((f[0], b, c))
    tri = np.asarray(tris, dtype=np.int64)
    if tri.min() < 0 or tri.max() >= len(vertices):
        raise MalformedFile(f"{path}: face index out of range")
    return PointCloud(sample_mesh_surface(vertices, tri, sample_n, seed))


def sample_mesh_surface(vertices: np.ndarray, triangles: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform sampling of n points on a triangle soup."""
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise MalformedFile("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return a[pick] + u[:, None] * (b[pick] - a[pick]) + v[:, None] * (c[pick] - a[pick])


def _read_ply(path: Path) -> PointCloud:
    raw = path.read_bytes()
    if not raw.startswith(b"ply"):
        raise MalformedFile(f"{path}: missing ply magic")
    end = raw.find(b"end_header")
    if end < 0:
        raise MalformedFile(f"{path}: unterminated ply header")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise MalformedFile(f"{path}: unterminated ply header")
    header = raw[:nl].decode("ascii", errors="replace").splitlines()
    body = raw[nl + 1 :]

    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MalformedFile(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1]))
            else:
                elements[-1][2].append((parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedFile(f"{path}: unsupported ply format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise MalformedFile(f"{path}: first element must be vertex")
    name, count, props = elements[0]
    if count == 0:
        raise EmptyCloud(f"{path}: zero vertices")
    if any(t == "list" for t, _ in props):
        raise MalformedFile(f"{path}: list property on vertex element")
    prop_names = [n for _, n in props]
    for axis in ("x", "y", "z"):
        if axis not in prop_names:
            raise MalformedFile(f"{path}: vertex element missing {axis}")

    if fmt == "ascii":
        table = _read_ply_ascii_rows(path, body, count, len(props))
        cols = {n: table[:, i] for i, (_, n) in enumerate(props)}
    else:
        dtype = []
        for i, (t, n) in enumerate(props):
            if t not in _PLY_SCALARS:
                raise MalformedFile(f"{path}: unsupported property type {t!r}")
            dtype.append((f"f{i}", _PLY_SCALARS[t][0]))
        rec = np.dtype(dtype)
        need = rec.itemsize * count
        if len(body) < need:
            raise MalformedFile(f"{path}: truncated vertex data")
        arr = np.frombuffer(body[:need], dtype=rec)
        cols = {n: arr[f"f{i}"].astype(np.float64) for i, (_, n) in enumerate(props)}

    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = _renormalize(np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1))
    return PointCloud(points, normals)


def _read_ply_ascii_rows(path: Path, body: bytes, count: int, width: int) -> np.ndarray:
    lines = body.decode("ascii", errors="replace").splitlines()
    rows = []
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if len(rows) == count:
            break
        if len(parts) != width:
            raise MalformedFile(f"{path}: vertex row has {len(parts)} fields, expected {width}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise MalformedFile(f"{path}: {exc}") from exc
    if len(rows) < count:
        raise MalformedFile(f"{path}: expected {count} vertices, found {len(rows)}")
    return np.asarray(rows, dtype=np.float64)


def write_ply(path, points: np.ndarray, normals: np.ndarray | None = None,
              colors: np.ndarray | None = None, binary: bool = True) -> None:
    """Write a vertex-only PLY; colors are uchar RGB, coordinates float32."""
    pts = np.asarray(points, dtype=np.float32)
    n = pts.shape[0]
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("xyz", "<f4", (3,))]
            if normals is not None:
                fields.append(("n", "<f4", (3,)))
            if colors is not None:
                fields.append(("rgb", "<u1", (3,)))
            rec = np.zeros(n, dtype=np.dtype(fields))
            rec["xyz"] = pts
            if normals is not None:
                rec["n"] = np.asarray(normals, dtype=np.float32)
            if colors is not None:
                rec["rgb"] = np.asarray(colors, dtype=np.uint8)
            fh.write(rec.tobytes())
        else:
            for i in range(n):
                fields = [f"{v:.9g}" for v in pts[i]]
                if normals is not None:
                    fields += [f"{v:.9g}" for v in np.asarray(normals[i], dtype=np.float32)]
                if colors is not None:
                    fields += [str(int(v)) for v in colors[i]]
                fh.write((" ".join(fields) + "\n").encode("ascii"))


def write_xyz(path, points: np.ndarray, normals: np.ndarray | None = None) -> None:
    data = np.asarray(points, dtype=np.float64)
    if normals is not None:
        data = np.concatenate([data, np.asarray(normals, dtype=np.float64)], axis=1)
    np.savetxt(path, data, fmt="%.17g")
