"""On-disk formats: depth maps, masks, models, pose tables, recordings.

All binary formats are little-endian and fully specified here:

- depth: magic ``DPTH``, u32 width, u32 height, f32 mm-per-unit, then
  width*height u16 values row-major (0 = invalid pixel);
- masks: magic ``MSK1``, u32 width, u32 height, then bit-packed rows,
  each row padded to a byte boundary;
- models: ASCII PLY (x y z nx ny nz) plus a JSON sidecar with landmarks,
  pedicle point indices and screw plans;
- poses: CSV ``frame,vertebra,valid,updated,qw,qx,qy,qz,tx,ty,tz``;
- config: ``key = value`` lines, ``#`` comments, unknown keys rejected.

Floats are written with ``repr`` so write-read-write round trips are
byte-identical.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sim
from .cloud import CameraIntrinsics, select_posterior_visible
from .geom import RigidTransform
from .register import ScrewPlan, VertebraModel
from .track import MarkerObservation, StereoRig

DEFAULT_DEPTH_SCALE = 0.05  # mm per u16 unit; 0.05 spans 3.27 m

DEPTH_MAGIC = b"DPTH"
MASK_MAGIC = b"MSK1"

POSES_HEADER = "frame,vertebra,valid,updated,qw,qx,qy,qz,tx,ty,tz"
DRILL_SLOT = 6


class FormatError(ValueError):
    """Malformed input file; carries the byte offset of the problem."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        loc = f"{path}: " if path is not None else ""
        at = f" (at byte {offset})" if offset is not None else ""
        super().__init__(f"{loc}{message}{at}")
        self.path = str(path) if path is not None else None
        self.offset = offset

def _f(x) -> str:
    """Shortest exact decimal for a float (plain Python repr)."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# depth maps
# ---------------------------------------------------------------------------

def write_depth(path, depth_mm: np.ndarray, scale: float = DEFAULT_DEPTH_SCALE) -> None:
    depth_mm = np.asarray(depth_mm, dtype=float)
    h, w = depth_mm.shape
    units = np.rint(depth_mm / scale)
    units = np.clip(units, 0, 65535).astype(np.uint16)
    # keep valid pixels valid after quantization
    units[(depth_mm > 0) & (units == 0)] = 1
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<IIf", w, h, scale))
        f.write(units.tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {DEPTH_MAGIC!r}",
                          path, offset=0)
    if len(data) < 16:
        raise FormatError("truncated header", path, offset=len(data))
    w, h, scale = struct.unpack_from("<IIf", data, 4)
    expected = 16 + 2 * w * h
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for {w}x{h}, got {len(data)}",
                          path, offset=min(len(data), expected))
    units = np.frombuffer(data, dtype="<u2", offset=16).reshape(h, w)
    return units.astype(np.float64) * np.float32(scale)


# ---------------------------------------------------------------------------
# binary masks
# ---------------------------------------------------------------------------

def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(packed.tobytes())


def read_mask(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MASK_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MASK_MAGIC!r}",
                          path, offset=0)
    if len(data) < 12:
        raise FormatError("truncated header", path, offset=len(data))
    w, h = struct.unpack_from("<II", data, 4)
    row_bytes = (w + 7) // 8
    expected = 12 + row_bytes * h
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for {w}x{h}, got {len(data)}",
                          path, offset=min(len(data), expected))
    packed = np.frombuffer(data, dtype=np.uint8, offset=12).reshape(h, row_bytes)
    return np.unpackbits(packed, axis=1, count=w).astype(bool)


# ---------------------------------------------------------------------------
# models (ASCII PLY + JSON sidecar)
# ---------------------------------------------------------------------------

_PLY_PROPERTIES = ["x", "y", "z", "nx", "ny", "nz"]


def write_ply(path, points: np.ndarray, normals: np.ndarray) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {points.shape[0]}"]
    lines += [f"property float {p}" for p in _PLY_PROPERTIES]
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        for p, n in zip(points, normals):
            f.write(f"{_f(p[0])} {_f(p[1])} {_f(p[2])} {_f(n[0])} {_f(n[1])} {_f(n[2])}\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    offset = 0
    lines = raw.split(b"\n")
    n_vertex = None
    props = []
    header_end = None
    for i, line in enumerate(lines):
        text = line.decode("ascii", errors="replace").strip()
        if i == 0 and text != "ply":
            raise FormatError("not a PLY file", path, offset=0)
        if text.startswith("element vertex"):
            try:
                n_vertex = int(text.split()[-1])
            except ValueError:
                raise FormatError(f"bad vertex count line {text!r}", path, offset)
        elif text.startswith("property"):
            props.append(text.split()[-1])
        elif text == "end_header":
            header_end = i
            offset += len(line) + 1
            break
        offset += len(line) + 1
    if header_end is None or n_vertex is None:
        raise FormatError("missing end_header or vertex count", path, offset)
    if props != _PLY_PROPERTIES:
        raise FormatError(f"expected properties {_PLY_PROPERTIES}, got {props}",
                          path, offset)
    rows = np.empty((n_vertex, 6))
    for k in range(n_vertex):
        line = lines[header_end + 1 + k] if header_end + 1 + k < len(lines) else b""
        vals = line.split()
        if len(vals) != 6:
            raise FormatError(f"vertex row {k} has {len(vals)} fields, expected 6",
                              path, offset)
        try:
            rows[k] = [float(v) for v in vals]
        except ValueError:
            raise FormatError(f"bad float in vertex row {k}", path, offset)
        offset += len(line) + 1
    return rows[:, :3].copy(), rows[:, 3:].copy()


def save_model(model: VertebraModel, ply_path, sidecar_path) -> None:
    write_ply(ply_path, model.points, model.normals)
    doc = {
        "id": model.id,
        "landmarks": model.landmarks.tolist(),
        "pedicle_indices": model.pedicle_indices.tolist(),
        "screw_plans": [
            {"entry": p.entry.tolist(), "direction": p.direction.tolist(),
             "radius_mm": p.radius_mm, "length_mm": p.length_mm}
            for p in model.screw_plans
        ],
    }
    with open(sidecar_path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def load_model(ply_path, sidecar_path) -> VertebraModel:
    """Load a model; the registration subset is recomputed from the stored
    surface via the posterior-visibility convention (+z is posterior)."""
    points, normals = read_ply(ply_path)
    try:
        doc = json.loads(Path(sidecar_path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"bad sidecar JSON: {e.msg}", sidecar_path, offset=e.pos)
    plans = tuple(ScrewPlan(np.array(p["entry"]), np.array(p["direction"]),
                            float(p["radius_mm"]), float(p["length_mm"]))
                  for p in doc["screw_plans"])
    sel = select_posterior_visible(points, normals, sim.POSTERIOR_VIEW_DIR)
    return VertebraModel(
        id=int(doc["id"]),
        points=points,
        normals=normals,
        reg_points=points[sel],
        landmarks=np.array(doc["landmarks"]),
        pedicle_indices=np.array(doc["pedicle_indices"], dtype=np.int64),
        screw_plans=plans,
    )


# ---------------------------------------------------------------------------
# pose tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoseRow:
    frame: int
    slot: int          # 1..5 = vertebra level, 6 = drill sleeve
    valid: bool
    updated: bool
    pose: RigidTransform


def write_poses(path, rows: list[PoseRow]) -> None:
    with open(path, "w") as f:
        f.write(POSES_HEADER + "\n")
        for r in rows:
            q, t = r.pose.q, r.pose.t
            f.write(f"{r.frame},{r.slot},{int(r.valid)},{int(r.updated)},"
                    f"{_f(q[0])},{_f(q[1])},{_f(q[2])},{_f(q[3])},"
                    f"{_f(t[0])},{_f(t[1])},{_f(t[2])}\n")


def read_poses(path) -> list[PoseRow]:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    offset = 0
    if not lines or lines[0].decode("ascii", errors="replace") != POSES_HEADER:
        raise FormatError(f"bad header, expected {POSES_HEADER!r}", path, offset=0)
    offset += len(lines[0]) + 1
    rows = []
    for line in lines[1:]:
        text = line.decode("ascii", errors="replace").strip()
        if text:
            parts = text.split(",")
            if len(parts) != 11:
                raise FormatError(f"expected 11 fields, got {len(parts)}", path, offset)
            try:
                frame, slot = int(parts[0]), int(parts[1])
                valid, updated = bool(int(parts[2])), bool(int(parts[3]))
                vals = [float(v) for v in parts[4:]]
            except ValueError:
                raise FormatError(f"bad value in row {text!r}", path, offset)
            rows.append(PoseRow(frame, slot, valid, updated,
                                RigidTransform(np.array(vals[:4]), np.array(vals[4:]))))
        offset += len(line) + 1
    return rows


def poses_by_frame(rows: list[PoseRow]) -> dict[int, dict[int, PoseRow]]:
    out: dict[int, dict[int, PoseRow]] = {}
    for r in rows:
        out.setdefault(r.frame, {})[r.slot] = r
    return out


# ---------------------------------------------------------------------------
# marker observations and stereo rig
# ---------------------------------------------------------------------------

_OBS_HEADER = ("frame,marker,"
               + ",".join(f"lu{k},lv{k}" for k in range(4)) + ","
               + ",".join(f"ru{k},rv{k}" for k in range(4)))


def write_observations(path, per_frame: dict[int, list[MarkerObservation]]) -> None:
    with open(path, "w") as f:
        f.write(_OBS_HEADER + "\n")
        for frame in sorted(per_frame):
            for obs in per_frame[frame]:
                vals = list(obs.left_px.ravel()) + list(obs.right_px.ravel())
                f.write(f"{frame},{obs.marker_id},"
                        + ",".join(_f(v) for v in vals) + "\n")


def read_observations(path) -> dict[int, list[MarkerObservation]]:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    offset = 0
    if not lines or lines[0].decode("ascii", errors="replace") != _OBS_HEADER:
        raise FormatError("bad observations header", path, offset=0)
    offset += len(lines[0]) + 1
    out: dict[int, list[MarkerObservation]] = {}
    for line in lines[1:]:
        text = line.decode("ascii", errors="replace").strip()
        if text:
            parts = text.split(",")
            if len(parts) != 18:
                raise FormatError(f"expected 18 fields, got {len(parts)}", path, offset)
            try:
                frame, marker = int(parts[0]), int(parts[1])
                vals = np.array([float(v) for v in parts[2:]])
            except ValueError:
                raise FormatError(f"bad value in row {text!r}", path, offset)
            out.setdefault(frame, []).append(
                MarkerObservation(marker, vals[:8].reshape(4, 2),
                                  vals[8:].reshape(4, 2)))
        offset += len(line) + 1
    return out


def _intrinsics_doc(intr: CameraIntrinsics) -> dict:
    return {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height}


def _intrinsics_from(doc: dict) -> CameraIntrinsics:
    return CameraIntrinsics(fx=float(doc["fx"]), fy=float(doc["fy"]),
                            cx=float(doc["cx"]), cy=float(doc["cy"]),
                            width=int(doc["width"]), height=int(doc["height"]))


def write_stereo(path, rig: StereoRig, markers: dict[int, np.ndarray]) -> None:
    doc = {
        "left": _intrinsics_doc(rig.left),
        "right": _intrinsics_doc(rig.right),
        "baseline": {"q": rig.baseline.q.tolist(), "t": rig.baseline.t.tolist()},
        "markers": {str(k): np.asarray(v).tolist() for k, v in markers.items()},
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def read_stereo(path) -> tuple[StereoRig, dict[int, np.ndarray]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"bad stereo JSON: {e.msg}", path, offset=e.pos)
    rig = StereoRig(_intrinsics_from(doc["left"]), _intrinsics_from(doc["right"]),
                    RigidTransform(np.array(doc["baseline"]["q"]),
                                   np.array(doc["baseline"]["t"])))
    markers = {int(k): np.array(v) for k, v in doc["markers"].items()}
    return rig, markers


# ---------------------------------------------------------------------------
# plain-text configuration
# ---------------------------------------------------------------------------

def parse_config(path, schema: dict) -> dict:
    """Parse ``key = value`` lines against a {key: converter} schema.

    Blank lines and ``#`` comments are allowed; unknown keys fail fast.
    """
    raw = Path(path).read_bytes()
    offset = 0
    out = {}
    for line in raw.split(b"\n"):
        text = line.decode("utf-8", errors="replace").strip()
        if text and not text.startswith("#"):
            if "=" not in text:
                raise FormatError(f"expected 'key = value', got {text!r}", path, offset)
            key, _, value = text.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in schema:
                raise FormatError(f"unknown configuration key {key!r}", path, offset)
            try:
                out[key] = schema[key](value)
            except ValueError:
                raise FormatError(f"bad value {value!r} for key {key!r}", path, offset)
        offset += len(line) + 1
    return out


def parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


# ---------------------------------------------------------------------------
# recording directories
# ---------------------------------------------------------------------------

def _orientation_path(root: Path) -> Path:
    return root / "oracle_orientation.csv"


def write_recording(rec: sim.Recording, out_dir,
                    target_vertebra: int = 3, target_screw: int = 0) -> None:
    """Materialize a simulated recording: metadata, models, per-frame depth
    and oracle masks, ground-truth poses, orientation priors, and (when a
    tool is simulated) stereo observations."""
    root = Path(out_dir)
    (root / "models").mkdir(parents=True, exist_ok=True)
    (root / "frames").mkdir(exist_ok=True)

    meta = {
        "fps": rec.fps,
        "frames": rec.frame_count,
        "seed": rec.seed,
        "scale": rec.scene.scale,
        "spacing": rec.scene.spacing,
        "tilt_deg": rec.spec.tilt_deg,
        "intrinsics": _intrinsics_doc(rec.scene.intrinsics),
        "target_vertebra": target_vertebra,
        "target_screw": target_screw,
        "has_tool": rec.spec.tool is not None,
    }
    with open(root / "recording.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")

    for m in rec.scene.models:
        save_model(m, root / "models" / f"vert{m.id}.ply",
                   root / "models" / f"vert{m.id}.json")

    gt_rows: list[PoseRow] = []
    obs: dict[int, list[MarkerObservation]] = {}
    with open(_orientation_path(root), "w") as fq:
        fq.write("frame,qw,qx,qy,qz\n")
        for frame in rec:
            stem = root / "frames" / f"f{frame.index:06d}"
            write_depth(stem.with_suffix(".dpth"), frame.depth)
            write_mask(stem.with_suffix(".msk"), frame.oracle_mask)
            q = frame.oracle_quat
            fq.write(f"{frame.index},{_f(q[0])},{_f(q[1])},{_f(q[2])},{_f(q[3])}\n")
            for vid in sorted(frame.gt_poses):
                gt_rows.append(PoseRow(frame.index, vid, True, True,
                                       frame.gt_poses[vid]))
            if frame.observations is not None:
                obs[frame.index] = frame.observations
    write_poses(root / "gt_poses.csv", gt_rows)
    if rec.spec.tool is not None:
        write_observations(root / "observations.csv", obs)
        write_stereo(root / "stereo.json", rec.stereo_rig(),
                     sim.default_marker_reference())


def read_orientations(path) -> dict[int, np.ndarray]:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    offset = 0
    if not lines or lines[0].decode("ascii", errors="replace") != "frame,qw,qx,qy,qz":
        raise FormatError("bad orientation header", path, offset=0)
    offset += len(lines[0]) + 1
    out = {}
    for line in lines[1:]:
        text = line.decode("ascii", errors="replace").strip()
        if text:
            parts = text.split(",")
            if len(parts) != 5:
                raise FormatError(f"expected 5 fields, got {len(parts)}", path, offset)
            try:
                out[int(parts[0])] = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise FormatError(f"bad value in row {text!r}", path, offset)
        offset += len(line) + 1
    return out


class LoadedRecording:
    """Disk-backed recording with the same frame interface as sim.Recording."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            meta = json.loads((self.root / "recording.json").read_text())
        except FileNotFoundError:
            raise FormatError("recording.json missing", self.root / "recording.json")
        except json.JSONDecodeError as e:
            raise FormatError(f"bad recording JSON: {e.msg}",
                              self.root / "recording.json", offset=e.pos)
        self.fps = float(meta["fps"])
        self.frame_count = int(meta["frames"])
        self.seed = int(meta["seed"])
        self.tilt_deg = float(meta.get("tilt_deg", 0.0))
        self.target_vertebra = int(meta.get("target_vertebra", 3))
        self.target_screw = int(meta.get("target_screw", 0))
        self.intrinsics = _intrinsics_from(meta["intrinsics"])
        self.has_tool = bool(meta.get("has_tool", False))
        self.models = [load_model(self.root / "models" / f"vert{i}.ply",
                                  self.root / "models" / f"vert{i}.json")
                       for i in range(1, 6)]
        self._orientations = read_orientations(_orientation_path(self.root))
        self._gt = poses_by_frame(read_poses(self.root / "gt_poses.csv"))
        self._obs = (read_observations(self.root / "observations.csv")
                     if self.has_tool else {})

    def gt_pose(self, vertebra_id: int, frame_index: int) -> RigidTransform:
        return self._gt[frame_index][vertebra_id].pose

    def observations(self) -> dict[int, list[MarkerObservation]]:
        return self._obs

    def stereo(self) -> tuple[StereoRig, dict[int, np.ndarray]]:
        return read_stereo(self.root / "stereo.json")

    def frame(self, f: int) -> sim.Frame:
        if not 1 <= f <= self.frame_count:
            raise IndexError(f"frame {f} outside 1..{self.frame_count}")
        stem = self.root / "frames" / f"f{f:06d}"
        depth = read_depth(stem.with_suffix(".dpth"))
        mask = read_mask(stem.with_suffix(".msk"))
        gt = {vid: row.pose for vid, row in sorted(self._gt[f].items())}
        return sim.Frame(index=f, timestamp=(f - 1) / self.fps, depth=depth,
                         intrinsics=self.intrinsics, oracle_mask=mask,
                         oracle_quat=self._orientations[f], gt_poses=gt,
                         observations=self._obs.get(f))

    def __iter__(self):
        return (self.frame(f) for f in range(1, self.frame_count + 1))
