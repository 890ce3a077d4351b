"""File formats: PLY clouds/meshes, DPM1 depth maps, checkpoints, manifests,
metric CSVs, landmark and camera text files, and a minimal SVG line chart.

All writers are deterministic: the same input always yields the same bytes.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import IoError, ParseError
from .geometry import PinholeCamera, PointCloud, RigidTransform, TriangleMesh

# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _write_ply(path, vertex_cols: list[tuple[str, str, np.ndarray]], faces: np.ndarray | None,
               binary: bool) -> None:
    n = len(vertex_cols[0][2])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    for name, ptype, _ in vertex_cols:
        header.append(f"property {ptype} {name}")
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar uint vertex_indices"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    dtype = np.dtype([(name, "<" + _PLY_TYPES[ptype]) for name, ptype, _ in vertex_cols])
    rec = np.empty(n, dtype=dtype)
    for name, _, col in vertex_cols:
        rec[name] = col
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            if binary:
                fh.write(rec.tobytes())
                if faces is not None:
                    frec = np.empty(len(faces), dtype=[("n", "u1"), ("i", "<u4", (3,))])
                    frec["n"] = 3
                    frec["i"] = faces
                    fh.write(frec.tobytes())
            else:
                buf = io.StringIO()
                for row in rec.tolist():
                    buf.write(" ".join(_ascii_value(v) for v in row) + "\n")
                if faces is not None:
                    for a, b, c in np.asarray(faces).tolist():
                        buf.write(f"3 {a} {b} {c}\n")
                fh.write(buf.getvalue().encode("ascii"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _ascii_value(v) -> str:
    if isinstance(v, float):
        # shortest repr of the float32 value keeps the ASCII file exact
        return repr(float(np.float32(v)))
    return str(v)


class _PlyElement:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.props: list[tuple[str, str, str | None]] = []  # (name, type, list-count type)


def _parse_ply(path) -> dict[str, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    pos = 0
    line_no = 0
    elements: list[_PlyElement] = []
    fmt = None

    def next_line():
        nonlocal pos, line_no
        end = data.find(b"\n", pos)
        if end < 0:
            raise ParseError("unterminated header", path=path, line=line_no + 1, offset=pos)
        raw = data[pos:end]
        pos = end + 1
        line_no += 1
        return raw.decode("ascii", errors="replace").strip()

    if next_line() != "ply":
        raise ParseError("missing 'ply' magic", path=path, line=1, offset=0)
    while True:
        line = next_line()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise ParseError(f"unsupported format '{line}'", path=path, line=line_no)
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append(_PlyElement(tok[1], int(tok[2])))
            except (IndexError, ValueError):
                raise ParseError(f"bad element line '{line}'", path=path, line=line_no) from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", path=path, line=line_no)
            try:
                if tok[1] == "list":
                    elements[-1].props.append((tok[4], _PLY_TYPES[tok[3]], _PLY_TYPES[tok[2]]))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]], None))
            except (IndexError, KeyError):
                raise ParseError(f"bad property line '{line}'", path=path, line=line_no) from None
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword '{tok[0]}'", path=path, line=line_no)
    if fmt is None:
        raise ParseError("missing format line", path=path, line=line_no)

    out: dict[str, dict[str, np.ndarray]] = {}
    if fmt == "ascii":
        lines = data[pos:].decode("ascii", errors="replace").splitlines()
        cursor = 0
        for el in elements:
            cols: dict[str, list] = {name: [] for name, _, _ in el.props}
            for _ in range(el.count):
                while cursor < len(lines) and not lines[cursor].strip():
                    cursor += 1
                if cursor >= len(lines):
                    raise ParseError(f"truncated '{el.name}' data", path=path,
                                     line=line_no + cursor + 1)
                tok = lines[cursor].split()
                k = 0
                try:
                    for name, ptype, ctype in el.props:
                        if ctype is None:
                            cols[name].append(float(tok[k]) if ptype[0] == "f" else int(tok[k]))
                            k += 1
                        else:
                            cnt = int(tok[k])
                            cols[name].append([int(x) for x in tok[k + 1:k + 1 + cnt]])
                            if len(cols[name][-1]) != cnt:
                                raise IndexError
                            k += 1 + cnt
                except (IndexError, ValueError):
                    raise ParseError(f"malformed '{el.name}' row", path=path,
                                     line=line_no + cursor + 1) from None
                cursor += 1
            out[el.name] = {name: (np.array(v, dtype=object) if ctype else
                                   np.array(v, dtype=np.dtype(ptype)))
                            for (name, ptype, ctype), v in
                            zip(el.props, [cols[p[0]] for p in el.props])}
        return out

    endian = "<" if fmt == "binary_little_endian" else ">"
    for el in elements:
        if all(ctype is None for _, _, ctype in el.props):
            dt = np.dtype([(name, endian + ptype) for name, ptype, _ in el.props])
            nbytes = dt.itemsize * el.count
            if pos + nbytes > len(data):
                raise ParseError(f"truncated '{el.name}' data", path=path, offset=len(data))
            rec = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
            pos += nbytes
            out[el.name] = {name: rec[name].astype(rec[name].dtype.newbyteorder("=")) for name, _, _ in el.props}
            continue
        # list-bearing element: try the fixed-size triangle fast path first
        fast = (len(el.props) == 1 and el.props[0][2] is not None)
        if fast:
            name, ptype, ctype = el.props[0]
            dt = np.dtype([("n", endian + ctype), ("i", endian + ptype, (3,))])
            nbytes = dt.itemsize * el.count
            if pos + nbytes <= len(data):
                rec = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
                if np.all(rec["n"] == 3):
                    out[el.name] = {name: rec["i"].astype(np.int64)}
                    pos += nbytes
                    continue
        cols = {name: [] for name, _, _ in el.props}
        for _ in range(el.count):
            for name, ptype, ctype in el.props:
                try:
                    if ctype is None:
                        cols[name].append(struct.unpack_from(endian + ptype_struct(ptype), data, pos)[0])
                        pos += np.dtype(ptype).itemsize
                    else:
                        cnt = struct.unpack_from(endian + ptype_struct(ctype), data, pos)[0]
                        pos += np.dtype(ctype).itemsize
                        vals = struct.unpack_from(endian + ptype_struct(ptype) * cnt, data, pos)
                        pos += np.dtype(ptype).itemsize * cnt
                        cols[name].append(list(vals))
                except struct.error:
                    raise ParseError(f"truncated '{el.name}' data", path=path, offset=pos) from None
        out[el.name] = {name: np.array(v, dtype=object) if ctype else np.array(v)
                        for (name, _, ctype), v in zip(el.props, [cols[p[0]] for p in el.props])}
    return out


def ptype_struct(ptype: str) -> str:
    return {"i1": "b", "u1": "B", "i2": "h", "u2": "H", "i4": "i", "u4": "I",
            "f4": "f", "f8": "d"}[ptype]


def _vertex_block(elements, path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    if "vertex" not in elements:
        raise ParseError("no vertex element", path=path)
    v = elements["vertex"]
    try:
        pts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
    except KeyError:
        raise ParseError("vertex element lacks x/y/z", path=path) from None
    normals = None
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.stack([v["nx"], v["ny"], v["nz"]], 1).astype(np.float64)
        ln = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(ln > 0, ln, 1.0)
    view_ids = v["view_id"].astype(np.int64) if "view_id" in v else None
    return pts, normals, view_ids


def _faces_block(elements, path) -> np.ndarray:
    if "face" not in elements:
        return np.zeros((0, 3), dtype=np.int64)
    f = elements["face"]
    key = "vertex_indices" if "vertex_indices" in f else ("vertex_index" if "vertex_index" in f else None)
    if key is None:
        raise ParseError("face element lacks vertex_indices", path=path)
    arr = f[key]
    if arr.dtype == object:
        if any(len(x) != 3 for x in arr):
            raise ParseError("only triangular faces are supported", path=path)
        arr = np.array([list(x) for x in arr], dtype=np.int64).reshape(-1, 3)
    return arr.astype(np.int64)


def write_mesh(mesh: TriangleMesh, path, binary: bool = True) -> None:
    v = mesh.vertices
    cols = [("x", "float", v[:, 0]), ("y", "float", v[:, 1]), ("z", "float", v[:, 2])]
    _write_ply(path, cols, mesh.faces, binary)


def read_mesh(path) -> TriangleMesh:
    el = _parse_ply(path)
    pts, _, _ = _vertex_block(el, path)
    faces = _faces_block(el, path)
    try:
        return TriangleMesh(pts, faces)
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from None


def write_cloud(cloud: PointCloud, path, binary: bool = True) -> None:
    p = cloud.points
    cols = [("x", "float", p[:, 0]), ("y", "float", p[:, 1]), ("z", "float", p[:, 2])]
    if cloud.normals is not None:
        n = cloud.normals
        cols += [("nx", "float", n[:, 0]), ("ny", "float", n[:, 1]), ("nz", "float", n[:, 2])]
    if cloud.view_ids is not None:
        cols.append(("view_id", "uint", cloud.view_ids))
    _write_ply(path, cols, None, binary)


def read_cloud(path) -> PointCloud:
    el = _parse_ply(path)
    pts, normals, view_ids = _vertex_block(el, path)
    try:
        return PointCloud(pts, normals, view_ids)
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from None


# ---------------------------------------------------------------------------
# DPM1 depth maps
# ---------------------------------------------------------------------------

_DPM_MAGIC = b"DPM1"


def write_depth(depth: np.ndarray, path) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_DPM_MAGIC + struct.pack("<III", w, h, 0))
            fh.write(np.ascontiguousarray(depth).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_depth(path) -> np.ndarray:
    """Returns a (height, width) float64 array; NaN marks invalid pixels."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(data) < 16 or data[:4] != _DPM_MAGIC:
        raise ParseError("missing DPM1 magic", path=path, offset=0)
    w, h, _ = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 4 * w * h:
        raise ParseError(f"expected {16 + 4 * w * h} bytes, found {len(data)}", path=path,
                         offset=min(len(data), 16 + 4 * w * h))
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# Checkpoints
#
#   SLCKPT1\n
#   meta <key>=<value>\n                       (any number, sorted)
#   tensor <name> <d0>x<d1>x... <byte offset> <byte count>\n
#   end_header\n
#   <little-endian float32 payload, tensors in header order>
#
# Offsets are relative to the first payload byte.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "SLCKPT1"


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    lines = [_CKPT_MAGIC]
    for k in sorted(meta or {}):
        lines.append(f"meta {k}={meta[k]}")
    blobs = []
    offset = 0
    for name in tensors:
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        blob = arr.tobytes()
        lines.append(f"tensor {name} {shape} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("utf-8"))
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    end = data.find(b"end_header\n")
    if not data.startswith(_CKPT_MAGIC.encode()) or end < 0:
        raise ParseError("not a checkpoint container", path=path, offset=0)
    header = data[:end].decode("utf-8").splitlines()
    base = end + len(b"end_header\n")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for i, line in enumerate(header[1:], start=2):
        tok = line.split(" ", 1)
        if tok[0] == "meta":
            k, _, v = tok[1].partition("=")
            meta[k] = v
        elif tok[0] == "tensor":
            try:
                name, shape, off, nbytes = tok[1].rsplit(" ", 3)
                dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
                off, nbytes = int(off), int(nbytes)
            except ValueError:
                raise ParseError(f"bad tensor line '{line}'", path=path, line=i) from None
            if base + off + nbytes > len(data) or nbytes != 4 * int(np.prod(dims, dtype=np.int64)):
                raise ParseError(f"tensor '{name}' payload truncated", path=path,
                                 offset=min(len(data), base + off))
            tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4,
                                          offset=base + off).reshape(dims).copy()
        else:
            raise ParseError(f"unknown header record '{tok[0]}'", path=path, line=i)
    return tensors, meta


# ---------------------------------------------------------------------------
# key=value documents (configs, manifests)
# ---------------------------------------------------------------------------

def format_kv(values: dict) -> str:
    return "".join(f"{k}={_kv_value(values[k])}\n" for k in sorted(values))


def _kv_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_kv_value(x) for x in v)
    return str(v)


def parse_kv(text: str, path=None) -> dict[str, str]:
    out: dict[str, str] = {}
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got '{line}'", path=path, line=i)
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def read_kv(path) -> dict[str, str]:
    try:
        return parse_kv(Path(path).read_text(), path)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def write_kv(values: dict, path) -> None:
    try:
        Path(path).write_text(format_kv(values))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Metrics CSV and SVG chart
# ---------------------------------------------------------------------------

def _g7(v) -> str:
    # 7 significant digits keep the relative round-trip error below 1e-6
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.7g}"


def write_metrics_csv(rows, path) -> None:
    """rows: iterable of (label, cd, hd) or (label, cd, hd, extras-dict)."""
    rows = [tuple(r) + ({},) * (4 - len(r)) for r in rows]
    extra_keys = sorted({k for r in rows for k in (r[3] or {})})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "cd", "hd", *extra_keys])
    for label, cd, hd, extras in rows:
        extras = extras or {}
        w.writerow([label, _g7(cd), _g7(hd), *[_g7(extras.get(k, float("nan"))) for k in extra_keys]])
    try:
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_line_chart_svg(xs, ys, path, *, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    """Single-series polyline chart in a fixed 800x600 viewBox."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    left, right, top, bottom = 90.0, 770.0, 50.0, 530.0
    finite = np.isfinite(ys)
    x0, x1 = (xs.min(), xs.max()) if len(xs) else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if finite.any():
        y0, y1 = 0.0, float(ys[finite].max()) * 1.1
    else:
        y0, y1 = 0.0, 1.0
    if y1 <= y0:
        y1 = y0 + 1.0

    def sx(x):
        return left + (x - x0) / (x1 - x0) * (right - left)

    def sy(y):
        return bottom - (y - y0) / (y1 - y0) * (bottom - top)

    parts = ['<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 600" width="800" height="600">',
             '<rect x="0" y="0" width="800" height="600" fill="white"/>',
             f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>']
    for x in xs:
        parts.append(f'<line x1="{sx(x):.2f}" y1="{bottom}" x2="{sx(x):.2f}" y2="{bottom + 6}" stroke="black"/>')
        parts.append(f'<text x="{sx(x):.2f}" y="{bottom + 22}" font-size="13" text-anchor="middle">{_g7(x)}</text>')
    for i in range(6):
        y = y0 + (y1 - y0) * i / 5
        parts.append(f'<line x1="{left - 6}" y1="{sy(y):.2f}" x2="{left}" y2="{sy(y):.2f}" stroke="black"/>')
        parts.append(f'<text x="{left - 10}" y="{sy(y) + 4:.2f}" font-size="13" text-anchor="end">{y:.3g}</text>')
    # NaN entries split the polyline
    run: list[str] = []
    runs: list[list[str]] = []
    for x, y, ok in zip(xs, ys, finite):
        if ok:
            run.append(f"{sx(x):.2f},{sy(y):.2f}")
        elif run:
            runs.append(run)
            run = []
    if run:
        runs.append(run)
    for r in runs:
        parts.append(f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{" ".join(r)}"/>')
        for pt in r:
            cx, cy = pt.split(",")
            parts.append(f'<circle cx="{cx}" cy="{cy}" r="4" fill="#1f77b4"/>')
    parts.append(f'<text x="400" y="30" font-size="18" text-anchor="middle">{_xml(title)}</text>')
    parts.append(f'<text x="400" y="575" font-size="15" text-anchor="middle">{_xml(xlabel)}</text>')
    parts.append(f'<text x="22" y="290" font-size="15" text-anchor="middle" '
                 f'transform="rotate(-90 22 290)">{_xml(ylabel)}</text>')
    parts.append("</svg>")
    try:
        Path(path).write_text("\n".join(parts) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# ---------------------------------------------------------------------------
# Landmarks and cameras
# ---------------------------------------------------------------------------

def write_landmarks(labels, points, path) -> None:
    lines = [f"{lab} {x!r} {y!r} {z!r}" for lab, (x, y, z) in
             zip(labels, np.asarray(points, dtype=np.float64).tolist())]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_landmarks(path) -> tuple[list[str], np.ndarray]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    labels, pts = [], []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tok = line.split()
        try:
            labels.append(tok[0])
            pts.append([float(t) for t in tok[1:4]])
            if len(tok) != 4:
                raise ValueError
        except (ValueError, IndexError):
            raise ParseError(f"expected 'label x y z', got '{line}'", path=path, line=i) from None
    return labels, np.array(pts, dtype=np.float64).reshape(-1, 3)


def _pose_floats(t: RigidTransform) -> list[str]:
    m = np.hstack([t.rotation, t.translation[:, None]])
    return [repr(float(x)) for x in m.reshape(-1)]


def _pose_from(vals: list[float]) -> RigidTransform:
    m = np.array(vals, dtype=np.float64).reshape(3, 4)
    return RigidTransform(m[:, :3], m[:, 3])


def write_cameras(pairs: list[tuple[PinholeCamera, PinholeCamera]], path) -> None:
    """One line per view: id fx fy cx cy w h, 12 floats for C_i, 12 for the estimate."""
    lines = []
    for i, (sfm, vpp) in enumerate(pairs):
        intr = [repr(float(sfm.fx)), repr(float(sfm.fy)), repr(float(sfm.cx)), repr(float(sfm.cy)),
                str(sfm.width), str(sfm.height)]
        lines.append(" ".join([str(i), *intr, *_pose_floats(sfm.world_to_camera),
                               *_pose_floats(vpp.world_to_camera)]))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_cameras(path) -> list[tuple[PinholeCamera, PinholeCamera]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 31:
            raise ParseError(f"expected 31 fields, found {len(tok)}", path=path, line=i)
        try:
            fx, fy, cx, cy = (float(t) for t in tok[1:5])
            w, h = int(tok[5]), int(tok[6])
            c = PinholeCamera(fx, fy, cx, cy, w, h, _pose_from([float(t) for t in tok[7:19]]))
            e = PinholeCamera(fx, fy, cx, cy, w, h, _pose_from([float(t) for t in tok[19:31]]))
        except ValueError as exc:
            raise ParseError(str(exc), path=path, line=i) from None
        out.append((c, e))
    return out


def ensure_dir(path) -> Path:
    try:
        p = Path(path)
        p.mkdir(parents=True, exist_ok=True)
        return p
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc


def file_exists(path) -> bool:
    return os.path.exists(path)
