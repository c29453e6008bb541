"""Staged registration of vertebra models to segmented depth clouds.

The pipeline runs in three stages on an initial (unoccluded) frame:

1. initial pose — predicted orientation + centroid of the largest
   segmented component,
2. general alignment — en-bloc point-to-point ICP of the combined models,
3. piecewise refinement — per-vertebra ICP with a 2 mm inlier gate.

Subsequent interaction frames receive a single gated refinement step per
vertebra: a vertebra is only moved when it still shows at least 90 % of the
inlier count it had when refinement finished, which freezes poses under
occlusion instead of dragging them toward the occluder.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import (EmptyCloudError, NearestNeighborIndex, centroid,
                    depth_to_cloud, largest_component)
from .geom import RigidTransform, pose_difference, quat_normalize, umeyama

ABLATION_MODES = ("General", "Refinement", "First-60", "Full")


class NoOverlapError(RuntimeError):
    """General alignment found no correspondences in its first iteration."""


class EmptyMaskError(ValueError):
    """Segmentation produced no usable pixels for the initial frame."""


class RefinementDegenerateError(RuntimeError):
    """A vertebra had fewer than 3 inliers during piecewise refinement."""

    def __init__(self, vertebra_id: int, iteration: int):
        super().__init__(f"vertebra {vertebra_id} degenerate at refinement "
                         f"iteration {iteration}")
        self.vertebra_id = vertebra_id
        self.iteration = iteration


@dataclass(frozen=True)
class ScrewPlan:
    """Planned pedicle screw in the model frame."""

    entry: np.ndarray       # entry point, mm
    direction: np.ndarray   # unit trajectory
    radius_mm: float
    length_mm: float

    def __post_init__(self):
        object.__setattr__(self, "entry", np.asarray(self.entry, dtype=float).reshape(3))
        d = np.asarray(self.direction, dtype=float).reshape(3)
        object.__setattr__(self, "direction", d / np.linalg.norm(d))
        if self.radius_mm <= 0 or self.length_mm <= 0:
            raise ValueError("screw radius and length must be positive")


@dataclass
class VertebraModel:
    """One preoperative vertebra model, all coordinates in the shared model frame.

    ``points``/``normals`` hold the full sampled surface, ``reg_points`` the
    posterior-visible subset actually used for registration, ``landmarks``
    the three evaluation landmarks (spinous process tip, left and right
    transverse process tips).
    """

    id: int
    points: np.ndarray
    normals: np.ndarray
    reg_points: np.ndarray
    landmarks: np.ndarray
    pedicle_indices: np.ndarray
    screw_plans: tuple[ScrewPlan, ...]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self.reg_points = np.asarray(self.reg_points, dtype=float).reshape(-1, 3)
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)
        self.pedicle_indices = np.asarray(self.pedicle_indices, dtype=np.int64).reshape(-1)
        if self.reg_points.shape[0] == 0:
            raise ValueError(f"vertebra {self.id}: registration point set is empty")
        if self.landmarks.shape[0] != 3:
            raise ValueError(f"vertebra {self.id}: expected 3 landmarks, "
                             f"got {self.landmarks.shape[0]}")

    @property
    def pedicle_points(self) -> np.ndarray:
        return self.points[self.pedicle_indices]


@dataclass(frozen=True)
class RegistrationConfig:
    general_max_corr: float = 5.0        # mm, correspondence cap for en-bloc ICP
    general_max_iters: int = 50
    epsilon: float = 1e-8
    piecewise_inlier: float = 2.0        # mm, strict inlier gate
    piecewise_max_iters: int = 50
    piecewise_force_full_iters: bool = False
    update_gate: float = 0.9             # fraction of the refinement baseline

    def __post_init__(self):
        if min(self.general_max_corr, self.piecewise_inlier) <= 0:
            raise ValueError("correspondence distances must be positive")
        if not 0.0 < self.update_gate <= 1.0:
            raise ValueError("update gate must be in (0, 1]")


@dataclass(frozen=True)
class VertebraTrack:
    """Per-vertebra registration state across frames."""

    pose: RigidTransform
    baseline_inliers: int    # inlier count at the end of piecewise refinement
    updated: bool            # pose moved this frame
    frozen: bool             # refinement was degenerate; never updated again
    inliers: int = 0         # inlier count observed this frame


@dataclass
class RegistrationState:
    vertebrae: dict[int, VertebraTrack]
    frame_index: int


def initial_pose(pc_s: np.ndarray, q_p: np.ndarray) -> RigidTransform:
    """Pose prior: predicted orientation + centroid of the segmented cloud.

    The model frame's origin is the centroid of all registration points, so
    this maps the combined models roughly onto the visible anatomy.
    """
    pc_s = np.asarray(pc_s, dtype=float).reshape(-1, 3)
    if pc_s.shape[0] == 0:
        raise EmptyCloudError("initial pose needs a nonempty segmented cloud")
    return RigidTransform(quat_normalize(q_p), centroid(pc_s))


def _gated_pairs(index: NearestNeighborIndex, src: np.ndarray, gate: float,
                 strict: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    qidx, ridx, dist = index.query(src, gate)
    if strict:
        keep = dist < gate
        return qidx[keep], ridx[keep], dist[keep]
    return qidx, ridx, dist


def general_alignment(reg_points: np.ndarray, t_init: RigidTransform,
                      pc_s: np.ndarray, cfg: RegistrationConfig,
                      index: NearestNeighborIndex | None = None) -> RigidTransform:
    """En-bloc ICP of the combined model points against the segmented cloud.

    Correspondences are capped at ``general_max_corr``; iteration stops
    after ``general_max_iters`` rounds or when the incremental transform
    change drops below ``epsilon``. Returns the full pose (prior composed
    with the ICP correction).
    """
    src = np.asarray(reg_points, dtype=float).reshape(-1, 3)
    if index is None:
        index = NearestNeighborIndex(pc_s)
    pose = t_init.normalized()
    identity = RigidTransform.identity()
    for it in range(cfg.general_max_iters):
        cur = pose.apply(src)
        qidx, ridx, _ = _gated_pairs(index, cur, cfg.general_max_corr, strict=False)
        if qidx.size < 3:
            if it == 0:
                raise NoOverlapError(
                    f"no correspondences within {cfg.general_max_corr} mm at the "
                    "initial pose")
            break
        delta = umeyama(cur[qidx], index.reference[ridx])
        pose = delta.compose(pose)
        angle, dist = pose_difference(delta, identity)
        if angle + dist < cfg.epsilon:
            break
    return pose


def piecewise_refine(model: VertebraModel, t_gen: RigidTransform,
                     pc_s: np.ndarray, cfg: RegistrationConfig,
                     index: NearestNeighborIndex | None = None
                     ) -> tuple[RigidTransform, int]:
    """Per-vertebra ICP from the general alignment, 2 mm strict inlier gate.

    Iterates nearest-neighbor matching and a rigid fit on the inliers until
    the mean inlier distance stops decreasing (by more than ``epsilon``) or
    ``piecewise_max_iters`` rounds have run; ``piecewise_force_full_iters``
    disables the early stop. Returns the refined pose and the inlier count
    at that pose, which becomes the update-gate baseline.
    """
    if index is None:
        index = NearestNeighborIndex(pc_s)
    src = model.reg_points
    pose = t_gen.normalized()
    prev_mean = np.inf
    for it in range(cfg.piecewise_max_iters):
        cur = pose.apply(src)
        qidx, ridx, dist = _gated_pairs(index, cur, cfg.piecewise_inlier, strict=True)
        if qidx.size < 3:
            raise RefinementDegenerateError(model.id, it)
        mean = float(dist.mean())
        if not cfg.piecewise_force_full_iters and prev_mean - mean <= cfg.epsilon:
            return pose, int(qidx.size)
        delta = umeyama(cur[qidx], index.reference[ridx])
        pose = delta.compose(pose)
        prev_mean = mean
    # all iterations ran; the baseline is the count at the final pose
    cur = pose.apply(src)
    qidx, _, _ = _gated_pairs(index, cur, cfg.piecewise_inlier, strict=True)
    if qidx.size < 3:
        raise RefinementDegenerateError(model.id, cfg.piecewise_max_iters)
    return pose, int(qidx.size)


def update_pose(track: VertebraTrack, model: VertebraModel,
                index: NearestNeighborIndex, cfg: RegistrationConfig
                ) -> VertebraTrack:
    """Single gated refinement step for one vertebra on a new frame.

    The pose only moves when the current inlier count reaches
    ``update_gate`` times the refinement baseline; otherwise the previous
    pose is returned untouched.
    """
    cur = track.pose.apply(model.reg_points)
    qidx, ridx, _ = _gated_pairs(index, cur, cfg.piecewise_inlier, strict=True)
    count = int(qidx.size)
    if count < 3 or count < cfg.update_gate * track.baseline_inliers:
        return replace(track, updated=False, inliers=count)
    delta = umeyama(cur[qidx], index.reference[ridx])
    return replace(track, pose=delta.compose(track.pose), updated=True, inliers=count)


def register_initial_frame(frame, models: list[VertebraModel], segmenter,
                           cfg: RegistrationConfig,
                           initial_perturbation: RigidTransform | None = None,
                           refine: bool = True) -> RegistrationState:
    """Full registration on an unoccluded initial frame.

    Runs segmentation, largest-component selection, cloud conversion, the
    pose prior, general alignment and (unless ``refine`` is False, used by
    the ablation modes) per-vertebra refinement. ``initial_perturbation``
    is composed onto the pose prior; it exists to stress-test convergence
    from a degraded initialization.
    """
    mask, q_p = segmenter(frame)
    comp = largest_component(mask)
    if not comp.any():
        raise EmptyMaskError("segmentation mask is empty on the initial frame")
    pc_s = depth_to_cloud(frame.depth, frame.intrinsics, comp)
    if pc_s.shape[0] == 0:
        raise EmptyMaskError("no valid depth under the segmentation mask")

    t_init = initial_pose(pc_s, q_p)
    if initial_perturbation is not None:
        t_init = initial_perturbation.compose(t_init)

    index = NearestNeighborIndex(pc_s)
    combined = np.vstack([m.reg_points for m in models])
    t_gen = general_alignment(combined, t_init, pc_s, cfg, index=index)

    vertebrae: dict[int, VertebraTrack] = {}
    for model in sorted(models, key=lambda m: m.id):
        if not refine:
            vertebrae[model.id] = VertebraTrack(t_gen, 0, True, False)
            continue
        try:
            pose, baseline = piecewise_refine(model, t_gen, pc_s, cfg, index=index)
            vertebrae[model.id] = VertebraTrack(pose, baseline, True, False,
                                                inliers=baseline)
        except RefinementDegenerateError:
            vertebrae[model.id] = VertebraTrack(t_gen, 0, False, True)
    return RegistrationState(vertebrae, frame.index)


def process_interaction_frame(state: RegistrationState, frame,
                              models: list[VertebraModel], segmenter,
                              cfg: RegistrationConfig) -> RegistrationState:
    """Gated per-vertebra pose update on an interaction frame."""
    mask, _ = segmenter(frame)
    pc_s = depth_to_cloud(frame.depth, frame.intrinsics, mask)
    by_id = {m.id: m for m in models}
    vertebrae: dict[int, VertebraTrack] = {}
    index = NearestNeighborIndex(pc_s) if pc_s.shape[0] > 0 else None
    for vid, track in state.vertebrae.items():
        if track.frozen or index is None:
            vertebrae[vid] = replace(track, updated=False, inliers=0)
            continue
        vertebrae[vid] = update_pose(track, by_id[vid], index, cfg)
    return RegistrationState(vertebrae, frame.index)


def _hold(state: RegistrationState, frame_index: int) -> RegistrationState:
    vertebrae = {vid: replace(tr, updated=False, inliers=0)
                 for vid, tr in state.vertebrae.items()}
    return RegistrationState(vertebrae, frame_index)


def run_recording(frames, models: list[VertebraModel], segmenter,
                  cfg: RegistrationConfig, mode: str = "Full",
                  initial_perturbation: RigidTransform | None = None
                  ) -> list[RegistrationState]:
    """Run the pipeline over a frame sequence in one of the ablation modes.

    ``General`` stops after en-bloc alignment, ``Refinement`` adds the
    per-vertebra refinement but never updates, ``First-60`` updates for the
    first 60 interaction frames only, and ``Full`` updates throughout.
    Returns one state per frame.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {ABLATION_MODES}")
    it = iter(frames)
    first = next(it)
    state = register_initial_frame(first, models, segmenter, cfg,
                                   initial_perturbation=initial_perturbation,
                                   refine=(mode != "General"))
    states = [state]
    interaction = 0
    for frame in it:
        interaction += 1
        updates_on = mode == "Full" or (mode == "First-60" and interaction <= 60)
        if updates_on:
            state = process_interaction_frame(state, frame, models, segmenter, cfg)
        else:
            state = _hold(state, frame.index)
        states.append(state)
    return states
