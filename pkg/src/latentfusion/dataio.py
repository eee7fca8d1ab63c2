"""On-disk formats: depth datasets, codec/volume binaries and PLY meshes.

Dataset layout::

    <root>/intrinsics.json        fx, fy, cx, cy, width, height, depth_scale
    <root>/depth/frame_%06d.png   16-bit depth, value = meters / depth_scale
    <root>/trajectory.txt         idx tx ty tz qx qy qz qw  (world-from-camera)

Binary containers are little-endian. Codec ("BNVC"): version, latent_dim,
tensor count, then per tensor rank, dims and a float32 payload. Volumes
("BNVV" neural, "TSDV" TSDF): version, voxel_size, origin, value dim, entry
count, then per entry an int32 index triple, float32 weight and float32 values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .codec import Codec
from .fusion import Frame
from .geometry import CameraIntrinsics, DepthMap, Pose
from .grid import pack
from .mesh import TriangleMesh
from .nn import DenseLayer, Mlp
from .tsdf import TsdfVolume
from .volume import ImplicitNeuralVolume

FORMAT_VERSION = 1
CODEC_MAGIC = b"BNVC"
VOLUME_MAGIC = b"BNVV"
TSDF_MAGIC = b"TSDV"
DEPTH_PATTERN = "frame_{:06d}.png"


class DatasetError(ValueError):
    pass


class FormatError(ValueError):
    pass


# datasets

@dataclass
class DatasetManifest:
    root: Path
    intrinsics: CameraIntrinsics
    indices: list = field(default_factory=list)
    depth_files: list = field(default_factory=list)
    poses: list = field(default_factory=list)

    @property
    def depth_scale(self) -> float:
        return self.intrinsics.depth_scale

    def __len__(self) -> int:
        return len(self.indices)

    def load_frame(self, k: int) -> Frame:
        return Frame(DepthMap(read_depth_png(self.depth_files[k], self.intrinsics)), self.poses[k], self.intrinsics)

    def frames(self, every: int = 1):
        """Frames in trajectory order, optionally every ``every``-th one."""
        for k in range(0, len(self), every):
            yield self.load_frame(k)


def depth_to_units(depth: np.ndarray, depth_scale: float) -> np.ndarray:
    units = np.round(np.asarray(depth, dtype=np.float64) / depth_scale)
    if np.any(units > np.iinfo(np.uint16).max):
        raise DatasetError("depth exceeds the 16-bit range at this depth_scale")
    return units.astype(np.uint16)


def write_depth_png(path, depth: np.ndarray, depth_scale: float) -> None:
    Image.fromarray(depth_to_units(depth, depth_scale)).save(path, format="PNG")


def read_depth_png(path, intr: CameraIntrinsics) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing depth file {path}")
    with Image.open(path) as img:
        units = np.array(img)
    if units.shape != (intr.height, intr.width):
        raise DatasetError(f"{path.name}: raster {units.shape[1]}x{units.shape[0]} does not match "
                           f"intrinsics {intr.width}x{intr.height}")
    return units.astype(np.float64) * intr.depth_scale


def format_trajectory(poses) -> str:
    lines = []
    for k, p in enumerate(poses):
        vals = [*p.translation, *p.rotation]
        lines.append(f"{k} " + " ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str, source: str = "trajectory.txt"):
    indices, poses = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(f"{source} line {lineno}: expected 8 fields (idx tx ty tz qx qy qz qw), got {len(parts)}")
        try:
            idx = int(parts[0])
            vals = np.array([float(v) for v in parts[1:]])
            pose = Pose(vals[3:], vals[:3])
        except ValueError as e:
            raise DatasetError(f"{source} line {lineno}: {e}") from None
        if not np.all(np.isfinite(vals)):
            raise DatasetError(f"{source} line {lineno}: non-finite value")
        indices.append(idx)
        poses.append(pose)
    return indices, poses


def save_dataset(root, frames, intrinsics: CameraIntrinsics) -> Path:
    root = Path(root)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    (root / "intrinsics.json").write_text(json.dumps(intrinsics.to_dict(), indent=2))
    for k, f in enumerate(frames):
        write_depth_png(root / "depth" / DEPTH_PATTERN.format(k), f.depth.data, intrinsics.depth_scale)
    (root / "trajectory.txt").write_text(format_trajectory([f.pose for f in frames]))
    return root


def load_dataset(path) -> DatasetManifest:
    root = Path(path)
    ipath = root / "intrinsics.json"
    tpath = root / "trajectory.txt"
    for p in (ipath, tpath):
        if not p.exists():
            raise DatasetError(f"missing {p}")
    try:
        d = json.loads(ipath.read_text())
        intr = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                                int(d["width"]), int(d["height"]), float(d.get("depth_scale", 1e-3)))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise DatasetError(f"{ipath}: {e}") from None
    indices, poses = parse_trajectory(tpath.read_text(), str(tpath))
    files = [root / "depth" / DEPTH_PATTERN.format(i) for i in indices]
    for f in files:
        if not f.exists():
            raise DatasetError(f"missing depth file {f}")
    return DatasetManifest(root, intr, indices, files, poses)


# binary helpers

class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _check_header(r: _Reader, magic: bytes):
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{r.what}: bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.what}: unsupported version {version}")


def _f32_scalar(x: float) -> float:
    # float32 storage of a decimal setting; 7 significant digits recover it
    return float(f"{float(np.float32(x)):.7g}")


# codec

def codec_to_bytes(codec: Codec) -> bytes:
    # tensors: encoder (W, b)..., decoder (W, b)..., then the patch radius as a rank-0 tensor
    tensors = codec.params() + [np.array(codec.patch_radius)]
    out = [CODEC_MAGIC, struct.pack("<III", FORMAT_VERSION, codec.latent_dim, len(tensors))]
    for t in tensors:
        t = np.asarray(t, dtype="<f4")
        out.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.tobytes(order="C"))
    return b"".join(out)


def codec_from_bytes(data: bytes, what: str = "codec") -> Codec:
    r = _Reader(data, what)
    _check_header(r, CODEC_MAGIC)
    latent_dim, count = r.unpack("II")
    tensors = []
    for _ in range(count):
        (rank,) = r.unpack("I")
        dims = r.unpack(f"{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        tensors.append(np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float64))
    if r.pos != len(data):
        raise FormatError(f"{what}: trailing bytes")
    if count < 5 or count % 2 == 0 or tensors[-1].ndim != 0:
        raise FormatError(f"{what}: unexpected tensor layout")
    radius = _f32_scalar(tensors[-1])
    layers = [DenseLayer(tensors[k], tensors[k + 1], "relu") for k in range(0, count - 1, 2)]
    # the encoder ends at the first layer producing latent_dim outputs
    split = next((k + 1 for k, l in enumerate(layers) if l.out_dim == latent_dim), None)
    if split is None or split == len(layers):
        raise FormatError(f"{what}: cannot find the encoder/decoder boundary")
    layers[split - 1].activation = "identity"
    layers[-1].activation = "identity"
    try:
        return Codec(Mlp(layers[:split]), Mlp(layers[split:]), radius)
    except ValueError as e:
        raise FormatError(f"{what}: {e}") from None


def save_codec(path, codec: Codec) -> None:
    Path(path).write_bytes(codec_to_bytes(codec))


def load_codec(path) -> Codec:
    return codec_from_bytes(Path(path).read_bytes(), str(path))


# volumes

def _entry_dtype(dim: int):
    return np.dtype([("ijk", "<i4", (3,)), ("weight", "<f4"), ("value", "<f4", (dim,))])


def _volume_bytes(magic: bytes, voxel_size: float, origin, ijk, weights, values) -> bytes:
    order = np.argsort(pack(ijk), kind="stable") if len(ijk) else np.zeros(0, np.int64)
    dim = values.shape[1]
    entries = np.zeros(len(ijk), dtype=_entry_dtype(dim))
    entries["ijk"] = ijk[order]
    entries["weight"] = weights[order]
    entries["value"] = values[order]
    head = magic + struct.pack("<Id3dIQ", FORMAT_VERSION, voxel_size, *np.asarray(origin, float), dim, len(ijk))
    return head + entries.tobytes()


def _parse_volume(data: bytes, magic: bytes, what: str):
    r = _Reader(data, what)
    _check_header(r, magic)
    voxel_size, ox, oy, oz, dim, count = r.unpack("d3dIQ")
    dt = _entry_dtype(dim)
    entries = np.frombuffer(r.take(dt.itemsize * count), dtype=dt)
    if r.pos != len(data):
        raise FormatError(f"{what}: trailing bytes")
    return (voxel_size, np.array([ox, oy, oz]), dim, entries["ijk"].astype(np.int64),
            entries["weight"].astype(np.float64), entries["value"].astype(np.float64))


def volume_to_bytes(vol) -> bytes:
    if isinstance(vol, TsdfVolume):
        return _volume_bytes(TSDF_MAGIC, vol.voxel_size, vol.origin, vol.indices(), vol.weights, vol.tsdf[:, None])
    return _volume_bytes(VOLUME_MAGIC, vol.voxel_size, vol.origin, vol.indices(), vol.weights, vol.latents)


def volume_from_bytes(data: bytes, what: str = "volume"):
    """Neural or TSDF volume, chosen by the file magic."""
    magic = data[:4]
    if magic == TSDF_MAGIC:
        vs, origin, dim, ijk, w, vals = _parse_volume(data, TSDF_MAGIC, what)
        if dim != 1:
            raise FormatError(f"{what}: TSDF entries carry one value, got {dim}")
        vol = TsdfVolume(vs, origin=origin)
        rows = vol.allocate(ijk)
        vol.tsdf[rows] = vals[:, 0]
        vol.weights[rows] = w
        return vol
    vs, origin, dim, ijk, w, vals = _parse_volume(data, VOLUME_MAGIC, what)
    vol = ImplicitNeuralVolume(vs, dim, origin)
    rows = vol.allocate(ijk)
    vol.latents[rows] = vals
    vol.weights[rows] = w
    return vol


def save_volume(path, vol) -> None:
    Path(path).write_bytes(volume_to_bytes(vol))


def load_volume(path):
    return volume_from_bytes(Path(path).read_bytes(), str(path))


# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def save_ply(path, mesh: TriangleMesh, binary: bool = True) -> None:
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(mesh.vertices)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              f"element face {len(mesh.triangles)}\nproperty list uchar int vertex_indices\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("v", "<i4", (3,))])
            faces["n"] = 3
            faces["v"] = mesh.triangles
            fh.write(faces.tobytes())
        else:
            lines = [" ".join(f"{c:.17g}" for c in v) for v in mesh.vertices]
            lines += ["3 " + " ".join(str(int(i)) for i in t) for t in mesh.triangles]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _parse_ply_header(fh, what):
    if fh.readline().strip() != b"ply":
        raise FormatError(f"{what}: not a PLY file")
    fmt, elements = None, []
    while True:
        line = fh.readline()
        if not line:
            raise FormatError(f"{what}: unterminated header")
        tok = line.decode("ascii").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{what}: property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None, None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{what}: unsupported PLY format {fmt}")
    return fmt, elements


def load_ply(path) -> TriangleMesh:
    what = str(path)
    with open(path, "rb") as fh:
        try:
            fmt, elements = _parse_ply_header(fh, what)
        except KeyError as e:
            raise FormatError(f"{what}: unknown property type {e}") from None
        body = fh.read()
    verts, tris = np.zeros((0, 3)), np.zeros((0, 3), np.int64)
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = []
                for _, kind, cnt_t, _ in props:
                    if kind == "list":
                        n = int(tokens[pos])
                        row.append([float(t) for t in tokens[pos + 1:pos + 1 + n]])
                        pos += 1 + n
                    else:
                        row.append(float(tokens[pos]))
                        pos += 1
                rows.append(row)
            verts, tris = _collect(name, props, rows, verts, tris, what)
        return TriangleMesh(verts, tris)
    pos = 0
    for name, count, props in elements:
        if len(props) == 1 and props[0][1] == "list":
            # fast path: every face is a triangle
            _, _, cnt_t, item_t = props[0]
            dt = np.dtype([("n", "<" + cnt_t), ("v", "<" + item_t, (3,))])
            if pos + dt.itemsize * count <= len(body):
                arr = np.frombuffer(body, dt, count, pos)
                if np.all(arr["n"] == 3):
                    pos += dt.itemsize * count
                    if name == "face":
                        tris = arr["v"].astype(np.int64)
                    continue
        if any(kind == "list" for _, kind, _, _ in props):
            rows = []
            for _ in range(count):
                row = []
                for _, kind, cnt_t, item_t in props:
                    if kind == "list":
                        n = int(np.frombuffer(body, "<" + cnt_t, 1, pos)[0])
                        pos += np.dtype(cnt_t).itemsize
                        row.append(np.frombuffer(body, "<" + item_t, n, pos).tolist())
                        pos += n * np.dtype(item_t).itemsize
                    else:
                        row.append(float(np.frombuffer(body, "<" + kind, 1, pos)[0]))
                        pos += np.dtype(kind).itemsize
                rows.append(row)
            verts, tris = _collect(name, props, rows, verts, tris, what)
        else:
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            arr = np.frombuffer(body, dt, count, pos)
            pos += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    return TriangleMesh(verts, tris)


def _collect(name, props, rows, verts, tris, what):
    names = [p[0] for p in props]
    if name == "vertex":
        ix = [names.index(c) for c in "xyz"]
        verts = np.array([[r[i] for i in ix] for r in rows], dtype=np.float64).reshape(-1, 3)
    elif name == "face":
        key = "vertex_indices" if "vertex_indices" in names else "vertex_index"
        faces = [r[names.index(key)] for r in rows]
        if any(len(f) != 3 for f in faces):
            raise FormatError(f"{what}: only triangle faces are supported")
        tris = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return verts, tris
