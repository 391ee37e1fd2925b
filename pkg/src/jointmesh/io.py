"""File formats: labeled meshes, labeled volumes, fit configs, OBJ export.

Mesh file layout (all little-endian)::

    b"JMESH\\0"  u16 version  u32 header_bytes  header (UTF-8 JSON)
    f64[V,3] vertices  i32[F,3] triangles  i32[F] region labels  i32[F,2] owners

Volume file layout::

    b"JVOL 1\\n"  one line of JSON header  payload (u8 or u16, x fastest,
    optionally zlib-compressed)
"""

from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .energy import EnergyWeights
from .fit import FitConfig
from .mesh import LabeledSurfaceMesh, MeshError, component_surface, validate
from .template import TemplateSpec
from .volume import LabeledVolume, VolumeError

MESH_MAGIC = b"JMESH\x00"
MESH_VERSION = 1
VOLUME_MAGIC = b"JVOL 1\n"
VOLUME_VERSION = 1


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------


def mesh_to_bytes(mesh: LabeledSurfaceMesh, spec: TemplateSpec | None = None) -> bytes:
    header = {
        "n_vertices": mesh.n_vertices,
        "n_faces": mesh.n_faces,
        "component_count": mesh.component_count,
        "template": spec.to_dict() if spec is not None else None,
        "regions": (
            [
                {"label": r.label, "name": r.name, "owners": list(r.owners), "supervised": r.supervised}
                for r in spec.regions()
            ]
            if spec is not None
            else None
        ),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    for name, arr in (("triangles", mesh.triangles), ("region labels", mesh.region_label), ("owners", mesh.owners)):
        if arr.size and (arr.min() < -(2 ** 31) or arr.max() >= 2 ** 31):
            raise MeshError(f"{name} do not fit in 32 bits")
    parts = [
        MESH_MAGIC,
        struct.pack("<HI", MESH_VERSION, len(hb)),
        hb,
        mesh.vertices.astype("<f8").tobytes(),
        mesh.triangles.astype("<i4").tobytes(),
        mesh.region_label.astype("<i4").tobytes(),
        mesh.owners.astype("<i4").tobytes(),
    ]
    return b"".join(parts)


def mesh_from_bytes(data: bytes) -> tuple[LabeledSurfaceMesh, TemplateSpec | None]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(data) - pos} left", pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(MESH_MAGIC), "magic") != MESH_MAGIC:
        raise FormatError("not a mesh file (bad magic)", 0)
    version, hlen = struct.unpack("<HI", take(6, "preamble"))
    if version != MESH_VERSION:
        raise FormatError(f"unsupported mesh format version {version}", len(MESH_MAGIC))
    hstart = pos
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
        V, F, C = int(header["n_vertices"]), int(header["n_faces"]), int(header["component_count"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed header: {exc}", hstart) from None
    if V < 0 or F < 0 or C < 1:
        raise FormatError("malformed header: negative counts", hstart)
    verts = np.frombuffer(take(V * 24, "vertex table"), dtype="<f8").reshape(V, 3).astype(np.float64)
    tris = np.frombuffer(take(F * 12, "triangle table"), dtype="<i4").reshape(F, 3).astype(np.int64)
    labels = np.frombuffer(take(F * 4, "label table"), dtype="<i4").astype(np.int64)
    owners = np.frombuffer(take(F * 8, "owner table"), dtype="<i4").reshape(F, 2).astype(np.int64)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", pos)
    try:
        mesh = LabeledSurfaceMesh(verts, tris, labels, owners, C)
        validate(mesh)
    except (MeshError, ValueError) as exc:
        raise FormatError(f"invalid mesh: {exc}") from None
    spec = TemplateSpec.from_dict(header["template"]) if header.get("template") else None
    return mesh, spec


def write_mesh(path, mesh: LabeledSurfaceMesh, spec: TemplateSpec | None = None) -> None:
    Path(path).write_bytes(mesh_to_bytes(mesh, spec))


def read_mesh(path) -> tuple[LabeledSurfaceMesh, TemplateSpec | None]:
    return mesh_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------


def volume_to_bytes(volume: LabeledVolume, compress: bool = True) -> bytes:
    top = int(volume.labels.max()) if volume.labels.size else 0
    if top > 65535:
        raise VolumeError("label ids above 65535 are not supported")
    dtype = "u1" if top <= 255 else "u2"
    payload = volume.labels.astype("<" + dtype).flatten(order="F").tobytes()
    if compress:
        payload = zlib.compress(payload, 6)
    header = {
        "version": VOLUME_VERSION,
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "class_table": {str(k): v for k, v in sorted(volume.class_table.items())},
        "dtype": dtype,
        "compression": "zlib" if compress else "none",
        "payload_bytes": len(payload),
    }
    return VOLUME_MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload


def volume_from_bytes(data: bytes) -> LabeledVolume:
    if not data.startswith(VOLUME_MAGIC):
        raise FormatError("not a volume file (bad magic)", 0)
    start = len(VOLUME_MAGIC)
    end = data.find(b"\n", start)
    if end < 0:
        raise FormatError("unterminated header", start)
    try:
        header = json.loads(data[start:end].decode("utf-8"))
        unknown = set(header) - {"version", "dims", "spacing", "class_table", "dtype", "compression", "payload_bytes"}
        if unknown:
            raise ValueError(f"unknown header keys {sorted(unknown)}")
        if header["version"] != VOLUME_VERSION:
            raise ValueError(f"unsupported volume format version {header['version']}")
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        table = {int(k): str(v) for k, v in header["class_table"].items()}
        dtype = {"u1": "<u1", "u2": "<u2"}[header["dtype"]]
        comp = header["compression"]
        if comp not in ("zlib", "none"):
            raise ValueError(f"unknown compression {comp!r}")
        nbytes = int(header["payload_bytes"])
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"bad dims {dims}")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"corrupt volume header: {exc}", start) from None
    pos = end + 1
    payload = data[pos:]
    if len(payload) != nbytes:
        raise FormatError(f"payload size mismatch: header says {nbytes}, found {len(payload)}", pos)
    if comp == "zlib":
        try:
            payload = zlib.decompress(payload)
        except zlib.error as exc:
            raise FormatError(f"corrupt compressed payload: {exc}", pos) from None
    item = np.dtype(dtype).itemsize
    if len(payload) != int(np.prod(dims)) * item:
        raise FormatError(
            f"payload holds {len(payload)} bytes, dims {dims} need {int(np.prod(dims)) * item}", pos
        )
    labels = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    try:
        return LabeledVolume(labels.astype(labels.dtype.newbyteorder("=")), spacing, table)
    except VolumeError as exc:
        raise FormatError(str(exc), pos) from None


def write_volume(path, volume: LabeledVolume, compress: bool = True) -> None:
    Path(path).write_bytes(volume_to_bytes(volume, compress))


def read_volume(path) -> LabeledVolume:
    return volume_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _check_keys(data: dict, allowed, where: str) -> None:
    if not isinstance(data, dict):
        raise ValueError(f"{where} must be a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ValueError(f"unknown {where} keys: {unknown}")


def config_from_dict(data: dict) -> FitConfig:
    top = [f.name for f in fields(FitConfig)]
    _check_keys(data, top, "config")
    wdata = data.get("weights", {})
    _check_keys(wdata, [f.name for f in fields(EnergyWeights)], "weights")
    if "supervised" in wdata and wdata["supervised"] is not None:
        wdata = dict(wdata, supervised=tuple(wdata["supervised"]))
    kw = {k: v for k, v in data.items() if k != "weights"}
    return FitConfig(weights=EnergyWeights(**wdata), **kw)


def config_to_dict(config: FitConfig) -> dict:
    out = {f.name: getattr(config, f.name) for f in fields(FitConfig) if f.name != "weights"}
    w = {f.name: getattr(config.weights, f.name) for f in fields(EnergyWeights)}
    if w["supervised"] is not None:
        w["supervised"] = list(w["supervised"])
    out["weights"] = w
    return out


def read_config(path) -> FitConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(data)


def write_config(path, config: FitConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n")


def read_template_spec(path) -> TemplateSpec:
    return TemplateSpec.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# OBJ export
# ---------------------------------------------------------------------------


def write_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    used = np.unique(triangles)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    lines = [f"v {x!r} {y!r} {z!r}\n" for x, y, z in vertices[used].tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in remap[triangles].tolist()]
    Path(path).write_text("".join(lines))


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_-]+", "_", name)


def export_obj(mesh: LabeledSurfaceMesh, spec: TemplateSpec | None, out_dir) -> list[Path]:
    """One closed OBJ per component and one OBJ per interface region."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for c in range(mesh.component_count):
        name = spec.components[c].name if spec else f"component{c}"
        p = out_dir / f"component_{c}_{_slug(name)}.obj"
        write_obj(p, *component_surface(mesh, c))
        written.append(p)
    walls = np.unique(mesh.region_label[mesh.owners[:, 1] >= 0])
    for lab in walls.tolist():
        faces = mesh.triangles[mesh.region_label == lab]
        a, b = mesh.owners[mesh.region_label == lab][0]
        name = spec.region(lab).name if spec else f"{a}-{b}"
        p = out_dir / f"interface_{lab}_{a}-{b}_{_slug(name)}.obj"
        write_obj(p, mesh.vertices, faces)
        written.append(p)
    return written
