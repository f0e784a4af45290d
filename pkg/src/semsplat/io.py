"""File formats: feature containers, field checkpoints, Gaussian-scene PLY,
pose sets, embedding files, annotations, run configs and PNG export.

Feature container ("FMFC", version 1, little-endian):
    magic      4 bytes  b"FMFC"
    version    u32      1
    dtype      u32      0 = float32, 1 = float16
    width      u32
    height     u32
    dim        u32
    n_pyramid  u32
    payload    width*height*dim values, row-major ([h][w][d])
    then per pyramid block, ordered by ascending scale fraction:
        scale_fraction f32, block_width u32, block_height u32,
        payload block_width*block_height*dim values

Field checkpoint ("FMGS", version 1, little-endian, all params float32):
    magic b"FMGS", version u32,
    field_type u32 (0 = hash grid, 1 = per-Gaussian rows),
    levels u32, table_size u64, feat_dim u32, n_min u32, n_max u32, aux_dim u32,
    bounds_lo f64[3], bounds_hi f64[3],
    clip_dim u32, dino_dim u32, hidden_width u32, hidden_layers u32,
    n_rows u64 (per-Gaussian rows; 0 for hash grid),
    tables (levels*table_size*feat_dim floats, or n_rows*encoding_dim),
    semantic head layers (weights then bias, layer by layer),
    regularizer head layers,
    n_selected u64, selected indices u64[n_selected].

Gaussian scenes use the de-facto standard GS binary PLY layout
(binary_little_endian, float32 vertex properties):
    x y z nx ny nz f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3
with rot in (w, x, y, z) order, scales as logs, opacity as a logit and
f_rest laid out channel-major (15 coefficients for R, then G, then B).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from PIL import Image

from .errors import ConfigurationError, FormatError
from .field import HashFeatureField, HashGridConfig, Mlp, PerGaussianField
from .scene import Camera, GaussianScene, SH_COEFFS_PER_CHANNEL

CONTAINER_MAGIC = b"FMFC"
CHECKPOINT_MAGIC = b"FMGS"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_DTYPE_CODES = {"f32": 0, "f16": 1}


# ----------------------------------------------------------- feature container

@dataclass
class FeatureContainer:
    feature_map: np.ndarray            # (H, W, D) in the stored dtype
    dtype: str                         # "f32" | "f16"
    pyramid: Optional[list] = None     # [(scale_fraction, (h, w, D))]


def write_feature_container(path, feature_map: np.ndarray, dtype: str = "f32",
                            pyramid: Optional[list] = None) -> None:
    """Serialize a dense feature map (and optional pyramid blocks)."""
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported container dtype {dtype!r}")
    np_dtype = _DTYPES[_DTYPE_CODES[dtype]]
    fmap = np.ascontiguousarray(feature_map, dtype=np_dtype)
    if fmap.ndim != 3:
        raise FormatError("feature map must be (H, W, D)")
    h, w, d = fmap.shape
    blocks = sorted(pyramid, key=lambda b: b[0]) if pyramid else []
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<IIIIII", 1, _DTYPE_CODES[dtype], w, h, d, len(blocks)))
        fh.write(fmap.tobytes())
        for fraction, block in blocks:
            block = np.ascontiguousarray(block, dtype=np_dtype)
            if block.ndim != 3 or block.shape[2] != d:
                raise FormatError("pyramid block feature dim mismatch")
            bh, bw = block.shape[:2]
            fh.write(struct.pack("<dII", float(fraction), bw, bh))
            fh.write(block.tobytes())


def read_feature_container(path) -> FeatureContainer:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not a feature container (bad magic)")
    version, dtype_code, w, h, d, n_blocks = struct.unpack_from("<IIIIII", data, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported container version {version}")
    if dtype_code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {dtype_code}")
    np_dtype = _DTYPES[dtype_code]
    offset = 4 + 24
    count = h * w * d
    end = offset + count * np_dtype.itemsize
    if end > len(data):
        raise FormatError(f"{path}: truncated payload")
    fmap = np.frombuffer(data[offset:end], dtype=np_dtype).reshape(h, w, d)
    offset = end
    pyramid = []
    last_fraction = -np.inf
    for _ in range(n_blocks):
        fraction, bw, bh = struct.unpack_from("<dII", data, offset)
        offset += 16
        if fraction < last_fraction:
            raise FormatError(f"{path}: pyramid blocks not in ascending scale order")
        last_fraction = fraction
        end = offset + bh * bw * d * np_dtype.itemsize
        if end > len(data):
            raise FormatError(f"{path}: truncated pyramid block")
        block = np.frombuffer(data[offset:end], dtype=np_dtype).reshape(bh, bw, d)
        offset = end
        pyramid.append((float(fraction), block))
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after payload")
    return FeatureContainer(feature_map=fmap, dtype="f32" if dtype_code == 0 else "f16",
                            pyramid=pyramid or None)


# ----------------------------------------------------------------- scene PLY

_PLY_FIELDS = (["x", "y", "z", "nx", "ny", "nz"]
               + [f"f_dc_{i}" for i in range(3)]
               + [f"f_rest_{i}" for i in range(45)]
               + ["opacity"]
               + [f"scale_{i}" for i in range(3)]
               + [f"rot_{i}" for i in range(4)])


def save_gaussian_scene(path, scene: GaussianScene) -> None:
    """Write the de-facto standard GS binary point cloud (float32)."""
    n = len(scene)
    rec = np.zeros((n, len(_PLY_FIELDS)), dtype="<f4")
    rec[:, 0:3] = scene.means
    # normals stay zero
    rec[:, 6:9] = scene.sh_coeffs[:, 0, :]                      # f_dc per channel
    rest = np.transpose(scene.sh_coeffs[:, 1:, :], (0, 2, 1))   # (N, 3, 15) channel-major
    rec[:, 9:54] = rest.reshape(n, 45)
    rec[:, 54] = scene.opacity_logits
    rec[:, 55:58] = scene.log_scales
    rec[:, 58:62] = scene.rotations
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(rec).tobytes())


def load_gaussian_scene(path) -> GaussianScene:
    """Read a standard GS binary point cloud; field order in the file is free
    but all of the standard fields must be present as float32."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    names, n = [], None
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            if n is None:
                continue  # properties of other elements
            if parts[1] != "float":
                raise FormatError(f"{path}: non-float property {parts[-1]}")
            names.append(parts[2])
    if n is None:
        raise FormatError(f"{path}: no vertex element")
    missing = set(_PLY_FIELDS) - set(names)
    if missing:
        raise FormatError(f"{path}: missing fields {sorted(missing)}")
    body = data[end + len(b"end_header\n"):]
    arr = np.frombuffer(body, dtype="<f4", count=n * len(names)).reshape(n, len(names))
    col = {name: i for i, name in enumerate(names)}

    sh = np.zeros((n, SH_COEFFS_PER_CHANNEL, 3), dtype=np.float64)
    for c in range(3):
        sh[:, 0, c] = arr[:, col[f"f_dc_{c}"]]
    for j in range(45):
        sh[:, 1 + j % 15, j // 15] = arr[:, col[f"f_rest_{j}"]]
    take = lambda *fields: np.stack([arr[:, col[f]] for f in fields], axis=1)
    return GaussianScene(
        means=take("x", "y", "z"),
        rotations=take("rot_0", "rot_1", "rot_2", "rot_3"),
        log_scales=take("scale_0", "scale_1", "scale_2"),
        opacity_logits=arr[:, col["opacity"]].astype(np.float64),
        sh_coeffs=sh,
    )


# ---------------------------------------------------------- field checkpoint

def _write_mlp(fh, mlp: Mlp):
    for w, b in zip(mlp.weights, mlp.biases):
        fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def _read_mlp(buf, dims):
    rng = np.random.default_rng(0)
    mlp = Mlp(dims, rng)
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        mlp.weights[i] = buf.take(d_in * d_out).reshape(d_in, d_out)
        mlp.biases[i] = buf.take(d_out)
    return mlp


class _F32Cursor:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, count: int) -> np.ndarray:
        end = self.offset + count * 4
        if end > len(self.data):
            raise FormatError("checkpoint truncated")
        out = np.frombuffer(self.data[self.offset:end], dtype="<f4").astype(np.float64)
        self.offset = end
        return out


def save_field_checkpoint(path, field, selected_indices: Optional[np.ndarray] = None) -> None:
    """Serialize a trained field (plus the Gaussian selection it was trained
    with) to a single binary file."""
    sel = (np.asarray(selected_indices, dtype=np.uint64)
           if selected_indices is not None else np.empty(0, dtype=np.uint64))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        if isinstance(field, HashFeatureField):
            cfg = field.config
            fh.write(struct.pack("<IIIQIIII", 1, 0, cfg.levels, cfg.table_size,
                                 cfg.feat_dim, cfg.n_min, cfg.n_max, cfg.aux_dim))
            fh.write(struct.pack("<6d", *cfg.bounds_lo, *cfg.bounds_hi))
            fh.write(struct.pack("<IIIIQ", field.clip_dim, field.dino_dim,
                                 field.hidden_width, field.hidden_layers, 0))
            fh.write(np.ascontiguousarray(field.tables, dtype="<f4").tobytes())
        elif isinstance(field, PerGaussianField):
            fh.write(struct.pack("<IIIQIIII", 1, 1, 1, 1, field.encoding_dim, 1, 1, 0))
            fh.write(struct.pack("<6d", 0.0, 0.0, 0.0, 1.0, 1.0, 1.0))
            fh.write(struct.pack("<IIIIQ", field.clip_dim, field.dino_dim,
                                 field.hidden_width, field.hidden_layers,
                                 field.n_gaussians))
            fh.write(np.ascontiguousarray(field.rows, dtype="<f4").tobytes())
        else:
            raise ConfigurationError(f"cannot checkpoint field type {type(field)!r}")
        _write_mlp(fh, field.semantic_head)
        _write_mlp(fh, field.regularizer_head)
        fh.write(struct.pack("<Q", sel.size))
        fh.write(np.ascontiguousarray(sel, dtype="<u8").tobytes())


def load_field_checkpoint(path):
    """Load a field checkpoint; returns (field, selected_indices)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a field checkpoint (bad magic)")
    version, field_type, levels, table_size, feat_dim, n_min, n_max, aux_dim = \
        struct.unpack_from("<IIIQIIII", data, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 4 + struct.calcsize("<IIIQIIII")
    bounds = struct.unpack_from("<6d", data, offset)
    offset += struct.calcsize("<6d")
    clip_dim, dino_dim, hidden_width, hidden_layers, n_rows = \
        struct.unpack_from("<IIIIQ", data, offset)
    offset += struct.calcsize("<IIIIQ")

    buf = _F32Cursor(data, offset)
    hidden = [hidden_width] * hidden_layers
    if field_type == 0:
        cfg = HashGridConfig(levels=levels, table_size=table_size, feat_dim=feat_dim,
                             n_min=n_min, n_max=n_max, aux_dim=aux_dim,
                             bounds_lo=bounds[:3], bounds_hi=bounds[3:])
        tables = buf.take(levels * table_size * feat_dim).reshape(
            levels, table_size, feat_dim)
        enc = cfg.encoding_dim
        sem = _read_mlp(buf, [enc, *hidden, clip_dim])
        reg = _read_mlp(buf, [enc, *hidden, dino_dim])
        field = HashFeatureField(cfg, clip_dim=clip_dim, dino_dim=dino_dim,
                                 hidden_width=hidden_width, hidden_layers=hidden_layers,
                                 tables=tables, semantic_head=sem, regularizer_head=reg)
    elif field_type == 1:
        enc = feat_dim
        rows = buf.take(n_rows * enc).reshape(n_rows, enc)
        sem = _read_mlp(buf, [enc, *hidden, clip_dim])
        reg = _read_mlp(buf, [enc, *hidden, dino_dim])
        field = PerGaussianField(n_rows, enc, clip_dim=clip_dim, dino_dim=dino_dim,
                                 hidden_width=hidden_width, hidden_layers=hidden_layers,
                                 rows=rows, semantic_head=sem, regularizer_head=reg)
    else:
        raise FormatError(f"{path}: unknown field type {field_type}")

    (n_sel,) = struct.unpack_from("<Q", data, buf.offset)
    offset = buf.offset + 8
    end = offset + n_sel * 8
    if end > len(data):
        raise FormatError(f"{path}: truncated selection block")
    selected = np.frombuffer(data[offset:end], dtype="<u8").astype(np.int64)
    return field, selected


# ------------------------------------------------------------------ pose sets

@dataclass
class PoseFrame:
    camera: Camera
    image: Optional[str] = None
    clip_features: Optional[str] = None
    dino_features: Optional[str] = None


@dataclass
class PoseSet:
    frames: list
    convention: str


_CONVENTIONS = ("world_to_camera_z_forward", "camera_to_world_z_forward",
                "world_to_camera_z_backward", "camera_to_world_z_backward")
_FLIP_Z = np.diag([1.0, -1.0, -1.0])


def load_pose_set(path, check_files: bool = True) -> PoseSet:
    """Load cameras from a YAML pose file.

    The on-disk pose is converted to the internal convention (world-to-camera,
    camera looks down +z). ``z_backward`` conventions (OpenGL-style, camera
    looks down -z with y up) are flipped on load. Referenced feature/image
    files must exist unless ``check_files`` is disabled.
    """
    path = Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "frames" not in doc:
        raise FormatError(f"{path}: pose file needs a 'frames' list")
    convention = doc.get("convention", "world_to_camera_z_forward")
    if convention not in _CONVENTIONS:
        raise FormatError(f"{path}: unknown pose convention {convention!r}")
    frames = []
    for i, entry in enumerate(doc["frames"]):
        try:
            rot = np.asarray(entry["rotation"], dtype=np.float64)
            trans = np.asarray(entry["translation"], dtype=np.float64)
            if convention.startswith("camera_to_world"):
                rot, trans = rot.T, -rot.T @ trans
            if convention.endswith("z_backward"):
                rot, trans = _FLIP_Z @ rot, _FLIP_Z @ trans
            cam = Camera(fx=float(entry["fx"]), fy=float(entry["fy"]),
                         cx=float(entry["cx"]), cy=float(entry["cy"]),
                         width=int(entry["width"]), height=int(entry["height"]),
                         rotation=rot, translation=trans)
        except KeyError as exc:
            raise FormatError(f"{path}: frame {i} is missing field {exc}") from exc
        frame = PoseFrame(camera=cam, image=entry.get("image"),
                          clip_features=entry.get("clip_features"),
                          dino_features=entry.get("dino_features"))
        if check_files:
            for ref in (frame.image, frame.clip_features, frame.dino_features):
                if ref is not None and not (path.parent / ref).exists():
                    raise FileNotFoundError(f"{path}: frame {i} references missing file {ref}")
        frames.append(frame)
    return PoseSet(frames=frames, convention=convention)


def save_pose_set(path, pose_set: PoseSet) -> None:
    """Write poses in the internal world-to-camera, +z-forward convention."""
    doc = {"convention": "world_to_camera_z_forward", "frames": []}
    for frame in pose_set.frames:
        cam = frame.camera
        entry = {
            "fx": float(cam.fx), "fy": float(cam.fy),
            "cx": float(cam.cx), "cy": float(cam.cy),
            "width": int(cam.width), "height": int(cam.height),
            "rotation": [[float(v) for v in row] for row in cam.rotation],
            "translation": [float(v) for v in cam.translation],
        }
        for key in ("image", "clip_features", "dino_features"):
            val = getattr(frame, key)
            if val is not None:
                entry[key] = val
        doc["frames"].append(entry)
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


# ------------------------------------------------------- embeddings and masks

def write_embedding_file(path, entries: list) -> None:
    """Labeled embeddings as text: one 'label<TAB>floats' line per entry."""
    with open(path, "w") as fh:
        for label, vec in entries:
            if "\t" in label or "\n" in label:
                raise FormatError(f"label {label!r} contains reserved characters")
            floats = " ".join(f"{float(v):.9g}" for v in np.asarray(vec, dtype=np.float32))
            fh.write(f"{label}\t{floats}\n")


def read_embedding_file(path) -> list:
    entries = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{ln}: expected 'label<TAB>floats'")
            label, floats = line.split("\t", 1)
            vec = np.array([float(v) for v in floats.split()], dtype=np.float64)
            if vec.size == 0:
                raise FormatError(f"{path}:{ln}: empty embedding")
            entries.append((label, vec))
    return entries


def write_box_annotations(path, boxes: list) -> None:
    """Boxes as text lines: 'view_id<TAB>label<TAB>x0 y0 x1 y1' (inclusive)."""
    with open(path, "w") as fh:
        for view_id, label, (x0, y0, x1, y1) in boxes:
            fh.write(f"{view_id}\t{label}\t{x0} {y0} {x1} {y1}\n")


def read_box_annotations(path) -> list:
    boxes = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{ln}: expected 'view\\tlabel\\tx0 y0 x1 y1'")
            coords = parts[2].split()
            if len(coords) != 4:
                raise FormatError(f"{path}:{ln}: expected four box coordinates")
            boxes.append((int(parts[0]), parts[1], tuple(int(c) for c in coords)))
    return boxes


def write_label_mask(path, labels: np.ndarray) -> None:
    """Label map as an 8-bit grayscale PNG (pixel value = label index)."""
    labels = np.asarray(labels)
    if labels.max(initial=0) > 255 or labels.min(initial=0) < 0:
        raise FormatError("label indices must fit in uint8")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def read_label_mask(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.int64)


def write_legend(path, labels: list) -> None:
    with open(path, "w") as fh:
        for i, label in enumerate(labels):
            fh.write(f"{i}\t{label}\n")


def read_legend(path) -> list:
    labels = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            idx, label = line.split("\t", 1)
            labels[int(idx)] = label
    return [labels[i] for i in range(len(labels))]


# -------------------------------------------------------------------- images

def save_png_rgb(path, image01: np.ndarray) -> None:
    """(H, W, 3) floats in [0, 1] -> 8-bit PNG."""
    arr = np.clip(np.asarray(image01, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def _falsecolor(values01: np.ndarray) -> np.ndarray:
    """Blue-to-red diverging colormap for scalar maps in [0, 1]."""
    v = np.clip(np.asarray(values01, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def save_png_falsecolor(path, values: np.ndarray,
                        vmin: float = 0.0, vmax: float = 1.0) -> None:
    span = max(vmax - vmin, 1e-12)
    save_png_rgb(path, _falsecolor((np.asarray(values) - vmin) / span))


def load_png_rgb(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


# -------------------------------------------------------------------- config

def load_run_config(path) -> dict:
    """Parse the structured training config (YAML)."""
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    return doc


def save_run_config(path, config: dict, header: Optional[str] = None) -> None:
    with open(path, "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        yaml.safe_dump(config, fh, sort_keys=False)
