"""Outcome metrics for registration quality and screw placement safety.

Frame indices are 1-based; recording-level target registration error is
averaged over frames 61 and later, giving the pipeline roughly two seconds
of updates to settle before being judged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import RigidTransform, quat_to_matrix
from .register import (ABLATION_MODES, RegistrationConfig, ScrewPlan,
                       VertebraModel, run_recording)

TRE_START_FRAME = 61
SAFE_PERFORATION_MM = 2.0
MAX_VIEWPOINT_ANGLE_DEG = 30.0


def tre(gt_pose: RigidTransform, est_pose: RigidTransform,
        landmarks: np.ndarray) -> float:
    """Mean distance between landmarks mapped by the true and estimated pose."""
    landmarks = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    d = np.linalg.norm(gt_pose.apply(landmarks) - est_pose.apply(landmarks), axis=1)
    return float(d.mean())


def recording_tre(per_frame: list[float], start_frame: int = TRE_START_FRAME) -> float:
    """Mean of a per-frame error series from ``start_frame`` on (1-based)."""
    if len(per_frame) < start_frame:
        raise ValueError(f"recording has {len(per_frame)} frames, "
                         f"need at least {start_frame}")
    return float(np.mean(per_frame[start_frame - 1:]))


def trajectory_error(planned_dir: np.ndarray, gt_pose: RigidTransform,
                     est_pose: RigidTransform) -> float:
    """Angle in degrees between the true and estimated screw trajectory."""
    d = np.asarray(planned_dir, dtype=float)
    d = d / np.linalg.norm(d)
    a = quat_to_matrix(gt_pose.q) @ d
    b = quat_to_matrix(est_pose.q) @ d
    c = float(np.clip(a @ b, -1.0, 1.0))
    return math.degrees(math.acos(c))


def entry_point_error(planned_entry: np.ndarray, gt_pose: RigidTransform,
                      est_pose: RigidTransform) -> float:
    """Distance in mm between the true and estimated screw entry point."""
    e = np.asarray(planned_entry, dtype=float)
    return float(np.linalg.norm(gt_pose.apply(e) - est_pose.apply(e)))


def perforation(pedicle_points: np.ndarray, screw: ScrewPlan,
                gt_pose: RigidTransform, est_pose: RigidTransform,
                include_caps: bool = True) -> float | None:
    """Depth by which pedicle surface points intrude into the planned screw.

    The pedicle points follow the ground-truth pose, the screw cylinder the
    estimated pose. Points inside the finite cylinder contribute their
    distance to the cylinder surface (end caps included unless
    ``include_caps`` is False); returns the maximum, or None when no point
    is inside.
    """
    pts = gt_pose.apply(np.asarray(pedicle_points, dtype=float).reshape(-1, 3))
    entry = est_pose.apply(screw.entry)
    axis = quat_to_matrix(est_pose.q) @ screw.direction

    w = pts - entry
    axial = w @ axis
    radial = np.linalg.norm(w - np.outer(axial, axis), axis=1)
    inside = (axial >= 0.0) & (axial <= screw.length_mm) & (radial < screw.radius_mm)
    if not inside.any():
        return None
    lateral = screw.radius_mm - radial[inside]
    if include_caps:
        depth = np.minimum(lateral,
                           np.minimum(axial[inside], screw.length_mm - axial[inside]))
    else:
        depth = lateral
    return float(depth.max())


def is_safe(depth: float | None, threshold: float = SAFE_PERFORATION_MM) -> bool:
    return depth is None or depth < threshold


def success_rate(per_frame_perforation: list[float | None]) -> float:
    """Fraction of frames whose target-screw perforation stays in the safe zone."""
    if len(per_frame_perforation) == 0:
        raise ValueError("empty recording")
    safe = sum(1 for d in per_frame_perforation if is_safe(d))
    return safe / len(per_frame_perforation)


def viewpoint_angle(sensor_forward: np.ndarray, coronal_normal: np.ndarray) -> float:
    """Angle in degrees between the sensor axis and the coronal plane normal.

    The normal is treated as an undirected line, so parallel and
    antiparallel both give 0.
    """
    f = np.asarray(sensor_forward, dtype=float)
    n = np.asarray(coronal_normal, dtype=float)
    f = f / np.linalg.norm(f)
    n = n / np.linalg.norm(n)
    return math.degrees(math.acos(min(1.0, abs(float(f @ n)))))


def viewpoint_acceptable(angle_deg: float) -> bool:
    return angle_deg < MAX_VIEWPOINT_ANGLE_DEG


@dataclass
class AblationResult:
    mode: str
    # per vertebra id: one TRE value per frame
    tre_series: dict[int, list[float]]

    def recording_tre(self, vertebra_id: int) -> float:
        return recording_tre(self.tre_series[vertebra_id])


def tre_series_from_states(states, models: list[VertebraModel],
                           gt_lookup) -> dict[int, list[float]]:
    """Per-vertebra TRE per frame; ``gt_lookup(vid, frame_index)`` gives truth."""
    by_id = {m.id: m for m in models}
    series: dict[int, list[float]] = {m.id: [] for m in models}
    for state in states:
        for vid, track in state.vertebrae.items():
            gt = gt_lookup(vid, state.frame_index)
            series[vid].append(tre(gt, track.pose, by_id[vid].landmarks))
    return series


def run_ablation(frames, models: list[VertebraModel], segmenter,
                 cfg: RegistrationConfig, mode: str, gt_lookup,
                 initial_perturbation: RigidTransform | None = None
                 ) -> AblationResult:
    """Run one ablation mode over a recording and collect TRE series."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    states = run_recording(frames, models, segmenter, cfg, mode=mode,
                           initial_perturbation=initial_perturbation)
    return AblationResult(mode, tre_series_from_states(states, models, gt_lookup))
