"""Command-line interface.

Subcommands mirror the pipeline stages: ``simulate`` writes a synthetic
recording, ``register`` runs the registration loop over one, ``track``
turns stereo corner observations into smoothed drill poses, ``evaluate``
scores estimated poses against ground truth, ``ablate`` compares the four
pipeline variants, and ``serve`` replays poses as UDP telemetry.

All commands are deterministic given their seed: re-running produces
byte-identical output files. Errors print a machine-readable JSON object
to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import formats, metrics, sim, stream
from .formats import FormatError, PoseRow
from .geom import RigidTransform, quat_to_matrix
from .register import (ABLATION_MODES, RegistrationConfig, run_recording)
from .track import InsufficientMarkersError, KalmanConfig, PoseKalman, track_pose

STREAM_ENV = "VERTEREG_STREAM"
DEFAULT_STREAM = "127.0.0.1:9750"

_REG_KEYS = {
    "general_max_corr": float,
    "general_max_iters": int,
    "epsilon": float,
    "piecewise_inlier": float,
    "piecewise_max_iters": int,
    "piecewise_force_full_iters": formats.parse_bool,
    "update_gate": float,
    "mode": str,
    "stream": str,
}

_TRACK_KEYS = {
    "sigma_a": float,
    "sigma_m": float,
}


def _fail(kind: str, message: str, **extra) -> None:
    doc = {"error": kind, "message": message}
    doc.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


def _config_values(path, schema) -> dict:
    if path is None:
        return {}
    return formats.parse_config(path, schema)


def _registration_config(args, file_values: dict) -> RegistrationConfig:
    base = RegistrationConfig()
    merged = {}
    for key in ("general_max_corr", "general_max_iters", "epsilon",
                "piecewise_inlier", "piecewise_max_iters",
                "piecewise_force_full_iters", "update_gate"):
        value = getattr(args, key, None)
        if value is None:
            value = file_values.get(key, getattr(base, key))
        merged[key] = value
    return RegistrationConfig(**merged)


# ---------------------------------------------------------------------------
# mini-DSL parsers for scene scripting flags
# ---------------------------------------------------------------------------

def _parse_vec3(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)


def _parse_vert_ids(text: str) -> list[int]:
    if text == "all":
        return [1, 2, 3, 4, 5]
    vid = int(text)
    if not 1 <= vid <= 5:
        raise ValueError(f"vertebra id must be 1..5 or 'all', got {text!r}")
    return [vid]


def _parse_motion(text: str) -> tuple[list[int], dict]:
    """VERT:KIND:dx,dy,dz:FREQ_HZ — e.g. all:sine:0,0,1:0.2"""
    parts = text.split(":")
    if len(parts) != 4:
        raise ValueError(f"motion spec needs VERT:KIND:VEC:FREQ, got {text!r}")
    vids = _parse_vert_ids(parts[0])
    kind = parts[1]
    if kind not in ("sine", "drift"):
        raise ValueError(f"motion kind must be sine or drift, got {kind!r}")
    return vids, {"kind": kind, "vector": _parse_vec3(parts[2]),
                  "freq_hz": float(parts[3])}


def _parse_deform(text: str) -> tuple[list[int], dict]:
    """VERT:dx,dy,dz[:rx,ry,rz] — constant offset (mm) and rotation (deg)."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"deform spec needs VERT:VEC[:ROT], got {text!r}")
    vids = _parse_vert_ids(parts[0])
    out = {"offset_translation": _parse_vec3(parts[1])}
    if len(parts) == 3:
        rot = _parse_vec3(parts[2])
        out["offset_rotvec"] = tuple(math.radians(r) for r in rot)
    return vids, out


def _parse_occluder(text: str) -> sim.Occluder:
    """START:END:cx,cy,cz:sx,sy,sz — frames inclusive, box in sensor mm."""
    parts = text.split(":")
    if len(parts) != 4:
        raise ValueError(f"occluder spec needs START:END:CENTER:SIZE, got {text!r}")
    return sim.Occluder(int(parts[0]), int(parts[1]),
                        _parse_vec3(parts[2]), _parse_vec3(parts[3]))


def _parse_dest(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        raise ValueError(f"stream destination must be host:port, got {text!r}")
    return host, int(port)


def _parse_perturb(text: str) -> tuple[float, float, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"perturbation needs DEG:MM:SEED, got {text!r}")
    return float(parts[0]), float(parts[1]), int(parts[2])


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    motions: dict[int, dict] = {}
    for text in args.motion or []:
        vids, fields = _parse_motion(text)
        for vid in vids:
            motions.setdefault(vid, {}).update(fields)
    for text in args.deform or []:
        vids, fields = _parse_deform(text)
        for vid in vids:
            motions.setdefault(vid, {}).update(fields)
    motion_specs = {vid: sim.MotionSpec(**fields) for vid, fields in motions.items()}

    tool = None
    if args.tool:
        base = RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]),
                              np.array([0.0, -40.0, 320.0]))
        tool = sim.ToolSpec(base_pose=base,
                            motion=sim.MotionSpec(kind="sine",
                                                  vector=(10.0, 0.0, 5.0),
                                                  freq_hz=0.25),
                            corner_sigma_px=args.tool_noise_px)

    scene = sim.make_scene(seed=args.seed, scale=args.scale, spacing=args.spacing)
    spec = sim.RecordingSpec(
        frames=args.frames,
        fps=args.fps,
        depth_sigma=args.noise_sigma,
        dropout=args.dropout,
        occluders=[_parse_occluder(t) for t in (args.occluder or [])],
        motions=motion_specs,
        tilt_deg=args.tilt_deg,
        orientation_error_deg=args.orientation_error_deg,
        mask_smooth_k=args.mask_smooth_k,
        tool=tool,
    )
    rec = sim.render_recording(scene, spec, seed=args.seed)
    formats.write_recording(rec, args.out, target_vertebra=args.target_vertebra,
                            target_screw=args.target_screw)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------

def _state_slots(state) -> list[stream.PoseSlot]:
    slots = [stream.PoseSlot(True, state.vertebrae[vid].updated,
                             state.vertebrae[vid].pose)
             if vid in state.vertebrae else stream.PoseSlot.empty()
             for vid in range(1, 6)]
    slots.append(stream.PoseSlot.empty())  # drill slot is fed by `track`
    return slots


def cmd_register(args) -> int:
    file_values = _config_values(args.config, _REG_KEYS)
    cfg = _registration_config(args, file_values)
    mode = args.mode or file_values.get("mode", "Full")
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {ABLATION_MODES}")

    rec = formats.LoadedRecording(args.recording)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    perturbation = None
    if args.perturb_initial:
        deg, mm, pseed = _parse_perturb(args.perturb_initial)
        perturbation = sim.perturbation(np.random.default_rng(pseed),
                                        math.radians(deg), mm)

    dest_text = args.stream or file_values.get("stream") or os.environ.get(STREAM_ENV)
    streamer = None
    if dest_text:
        host, port = _parse_dest(dest_text)
        streamer = stream.PoseStreamer(host, port)

    t_start = time.monotonic()
    states = []
    frames = iter(rec)
    for state in _run_streaming(frames, rec, cfg, mode, perturbation, streamer):
        states.append(state)
    elapsed = time.monotonic() - t_start

    rows = []
    log_lines = ["frame,vertebra,inliers,baseline,updated,frozen"]
    for state in states:
        for vid, tr in sorted(state.vertebrae.items()):
            rows.append(PoseRow(state.frame_index, vid, True, tr.updated, tr.pose))
            log_lines.append(f"{state.frame_index},{vid},{tr.inliers},"
                             f"{tr.baseline_inliers},{int(tr.updated)},{int(tr.frozen)}")
    formats.write_poses(out / "poses.csv", rows)
    (out / "state_log.csv").write_text("\n".join(log_lines) + "\n")
    if streamer is not None:
        streamer.close()
    print(f"registered {len(states)} frames in {elapsed:.2f}s "
          f"({mode} mode) -> {out / 'poses.csv'}")
    return 0


def _run_streaming(frames, rec, cfg, mode, perturbation, streamer):
    """run_recording, but emitting each state (and a datagram) as it lands."""
    from .register import (_hold, process_interaction_frame,
                           register_initial_frame)
    it = iter(frames)
    first = next(it)
    state = register_initial_frame(first, rec.models, sim.oracle_segmenter, cfg,
                                   initial_perturbation=perturbation,
                                   refine=(mode != "General"))
    yield from _emit(state, first, rec, streamer)
    interaction = 0
    for frame in it:
        interaction += 1
        updates_on = mode == "Full" or (mode == "First-60" and interaction <= 60)
        if updates_on:
            state = process_interaction_frame(state, frame, rec.models,
                                              sim.oracle_segmenter, cfg)
        else:
            state = _hold(state, frame.index)
        yield from _emit(state, frame, rec, streamer)


def _emit(state, frame, rec, streamer):
    if streamer is not None:
        ts_us = round((frame.index - 1) / rec.fps * 1e6)
        streamer.send(stream.encode_packet(frame.index, ts_us, _state_slots(state)))
    yield state


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

def cmd_track(args) -> int:
    rec = formats.LoadedRecording(args.recording)
    if not rec.has_tool:
        raise ValueError(f"recording {args.recording} has no stereo observations")
    rig, markers = rec.stereo()
    per_frame = rec.observations()
    file_values = _config_values(args.config, _TRACK_KEYS)
    kcfg = KalmanConfig(
        sigma_a=args.sigma_a if args.sigma_a is not None
        else file_values.get("sigma_a", KalmanConfig.sigma_a),
        sigma_m=args.sigma_m if args.sigma_m is not None
        else file_values.get("sigma_m", KalmanConfig.sigma_m),
    )
    kalman = PoseKalman(kcfg)
    dt = 1.0 / rec.fps
    rows = []
    last = None
    for f in range(1, rec.frame_count + 1):
        obs = per_frame.get(f, [])
        try:
            measured = track_pose(obs, rig, markers)
            last = kalman.step(measured, dt)
            rows.append(PoseRow(f, formats.DRILL_SLOT, True, True, last))
        except InsufficientMarkersError:
            if last is not None:
                rows.append(PoseRow(f, formats.DRILL_SLOT, True, False, last))
            else:
                rows.append(PoseRow(f, formats.DRILL_SLOT, False, False,
                                    RigidTransform.identity()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_poses(out / "drill_poses.csv", rows)
    print(f"tracked {rec.frame_count} frames -> {out / 'drill_poses.csv'}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    rec = formats.LoadedRecording(args.recording)
    est = formats.poses_by_frame(formats.read_poses(args.poses))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    include_caps = not args.lateral_only

    by_id = {m.id: m for m in rec.models}
    frames = sorted(est)
    start = metrics.TRE_START_FRAME if len(frames) >= metrics.TRE_START_FRAME else 1

    frame_lines = ["frame,vertebra,valid,updated,tre_mm"]
    screw_lines = ["frame,vertebra,screw,traj_err_deg,entry_err_mm,perforation_mm,safe"]
    tre_series: dict[int, list[float]] = {vid: [] for vid in by_id}
    traj_series: dict[tuple[int, int], list[float]] = {}
    entry_series: dict[tuple[int, int], list[float]] = {}
    perf_series: dict[tuple[int, int], list[float | None]] = {}
    updated_count = 0

    for f in frames:
        for vid in sorted(by_id):
            row = est[f].get(vid)
            if row is None or not row.valid:
                frame_lines.append(f"{f},{vid},0,0,")
                continue
            gt = rec.gt_pose(vid, f)
            model = by_id[vid]
            t = metrics.tre(gt, row.pose, model.landmarks)
            tre_series[vid].append(t)
            frame_lines.append(f"{f},{vid},1,{int(row.updated)},{t!r}")
            if vid == rec.target_vertebra and f > 1 and row.updated:
                updated_count += 1
            for sidx, plan in enumerate(model.screw_plans):
                traj = metrics.trajectory_error(plan.direction, gt, row.pose)
                entry = metrics.entry_point_error(plan.entry, gt, row.pose)
                depth = metrics.perforation(model.pedicle_points, plan, gt,
                                            row.pose, include_caps=include_caps)
                safe = metrics.is_safe(depth)
                key = (vid, sidx)
                traj_series.setdefault(key, []).append(traj)
                entry_series.setdefault(key, []).append(entry)
                perf_series.setdefault(key, []).append(depth)
                depth_txt = "" if depth is None else repr(depth)
                screw_lines.append(f"{f},{vid},{sidx},{traj!r},{entry!r},"
                                   f"{depth_txt},{int(safe)}")

    (out / "frame_metrics.csv").write_text("\n".join(frame_lines) + "\n")
    (out / "screw_metrics.csv").write_text("\n".join(screw_lines) + "\n")

    def tail_mean(values):
        return float(np.mean(values[start - 1:]))

    target_key = (rec.target_vertebra, rec.target_screw)
    success = metrics.success_rate(perf_series[target_key])
    gt1 = rec.gt_pose(rec.target_vertebra, frames[0])
    coronal_normal = quat_to_matrix(gt1.q) @ np.array([0.0, 0.0, 1.0])
    vp_angle = metrics.viewpoint_angle(np.array([0.0, 0.0, 1.0]), coronal_normal)

    tail_perfs = [d for key, series in perf_series.items()
                  for d in series[start - 1:]]
    summary = {
        "frames": len(frames),
        "tre_start_frame": start,
        "target_vertebra": rec.target_vertebra,
        "target_screw": rec.target_screw,
        "tre_mm": {
            "per_vertebra": {str(vid): tail_mean(tre_series[vid])
                             for vid in sorted(tre_series) if tre_series[vid]},
            "target": tail_mean(tre_series[rec.target_vertebra]),
        },
        "trajectory_error_deg": {
            "target": tail_mean(traj_series[target_key]),
            "per_screw": {f"{v}:{s}": tail_mean(vals)
                          for (v, s), vals in sorted(traj_series.items())},
        },
        "entry_point_error_mm": {
            "target": tail_mean(entry_series[target_key]),
            "per_screw": {f"{v}:{s}": tail_mean(vals)
                          for (v, s), vals in sorted(entry_series.items())},
        },
        "success_rate": success,
        "updated_fraction": updated_count / max(1, len(frames) - 1),
        "viewpoint_angle_deg": vp_angle,
        "viewpoint_acceptable": metrics.viewpoint_acceptable(vp_angle),
        "all_screws_safe_after_start": all(metrics.is_safe(d) for d in tail_perfs),
        "max_perforation_mm": max((d for d in tail_perfs if d is not None),
                                  default=None),
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
        f.write("\n")
    print(f"success rate {success:.3f}, target TRE "
          f"{summary['tre_mm']['target']:.3f} mm -> {out / 'summary.json'}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    file_values = _config_values(args.config, _REG_KEYS)
    cfg = _registration_config(args, file_values)
    rec = formats.LoadedRecording(args.recording)
    frames = list(rec)
    start = (metrics.TRE_START_FRAME
             if rec.frame_count >= metrics.TRE_START_FRAME else 1)

    results = {}
    for mode in ABLATION_MODES:
        res = metrics.run_ablation(frames, rec.models, sim.oracle_segmenter,
                                   cfg, mode, rec.gt_pose)
        results[mode] = {vid: float(np.mean(series[start - 1:]))
                         for vid, series in res.tre_series.items()}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["vertebra," + ",".join(ABLATION_MODES)]
    for vid in range(1, 6):
        lines.append(f"{vid}," + ",".join(repr(results[m][vid])
                                          for m in ABLATION_MODES))
    means = {m: float(np.mean([results[m][v] for v in range(1, 6)]))
             for m in ABLATION_MODES}
    lines.append("mean," + ",".join(repr(means[m]) for m in ABLATION_MODES))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")

    print(f"{'vertebra':>8} " + " ".join(f"{m:>12}" for m in ABLATION_MODES))
    for vid in range(1, 6):
        print(f"{vid:>8} " + " ".join(f"{results[m][vid]:12.4f}"
                                      for m in ABLATION_MODES))
    print(f"{'mean':>8} " + " ".join(f"{means[m]:12.4f}" for m in ABLATION_MODES))
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def cmd_serve(args) -> int:
    rec_meta = json.loads((Path(args.recording) / "recording.json").read_text())
    fps = args.fps or float(rec_meta["fps"])
    by_frame = formats.poses_by_frame(formats.read_poses(args.poses))
    drill = {}
    if args.drill_poses:
        drill = formats.poses_by_frame(formats.read_poses(args.drill_poses))

    frames = sorted(by_frame)
    if args.count:
        frames = frames[:args.count]
    packets = []
    for f in frames:
        slots = []
        for vid in range(1, 6):
            row = by_frame[f].get(vid)
            slots.append(stream.PoseSlot(row.valid, row.updated, row.pose)
                         if row else stream.PoseSlot.empty())
        drow = drill.get(f, {}).get(formats.DRILL_SLOT) or by_frame[f].get(formats.DRILL_SLOT)
        slots.append(stream.PoseSlot(drow.valid, drow.updated, drow.pose)
                     if drow else stream.PoseSlot.empty())
        ts_us = round((f - 1) / fps * 1e6)
        packets.append(stream.encode_packet(f, ts_us, slots))

    dest_text = args.dest or os.environ.get(STREAM_ENV) or DEFAULT_STREAM
    host, port = _parse_dest(dest_text)
    stamps = stream.serve_packets(packets, fps, host, port)
    jitter = stream.interval_jitter(stamps, fps)
    if args.timing_log:
        Path(args.timing_log).write_text(
            "\n".join(repr(s) for s in stamps) + "\n")
    print(f"sent {len(packets)} packets to {host}:{port} at {fps} fps "
          f"(jitter {100 * jitter:.3f}%)")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vertereg",
        description="simulate, register, track, evaluate, ablate and stream "
                    "vertebra poses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic recording")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--orientation-error-deg", type=float, default=0.0)
    p.add_argument("--tilt-deg", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--spacing", type=float, default=0.5)
    p.add_argument("--mask-smooth-k", type=int, default=15)
    p.add_argument("--motion", action="append",
                   help="VERT:KIND:dx,dy,dz:FREQ (VERT in 1..5 or 'all')")
    p.add_argument("--deform", action="append",
                   help="VERT:dx,dy,dz[:rx,ry,rz] constant offset mm / deg")
    p.add_argument("--occluder", action="append",
                   help="START:END:cx,cy,cz:sx,sy,sz box in sensor mm")
    p.add_argument("--tool", action="store_true",
                   help="simulate the drill sleeve and stereo observations")
    p.add_argument("--tool-noise-px", type=float, default=0.0)
    p.add_argument("--target-vertebra", type=int, default=3)
    p.add_argument("--target-screw", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("register", help="run the registration pipeline")
    p.add_argument("--recording", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=ABLATION_MODES)
    p.add_argument("--config")
    p.add_argument("--stream", help="host:port for live pose datagrams")
    p.add_argument("--perturb-initial", metavar="DEG:MM:SEED",
                   help="corrupt the initial pose estimate (robustness testing)")
    for key, conv in _REG_KEYS.items():
        if key not in ("mode", "stream"):
            p.add_argument(f"--{key.replace('_', '-')}",
                           dest=key, type=conv, default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("track", help="smooth drill poses from stereo corners")
    p.add_argument("--recording", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--sigma-a", type=float, default=None)
    p.add_argument("--sigma-m", type=float, default=None)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", help="score estimated poses vs ground truth")
    p.add_argument("--recording", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lateral-only", action="store_true",
                   help="perforation depth ignores the cylinder end caps")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare the four pipeline variants")
    p.add_argument("--recording", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    for key, conv in _REG_KEYS.items():
        if key not in ("mode", "stream"):
            p.add_argument(f"--{key.replace('_', '-')}",
                           dest=key, type=conv, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="replay poses as UDP telemetry")
    p.add_argument("--recording", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--drill-poses")
    p.add_argument("--dest", help=f"host:port (default ${STREAM_ENV} "
                                  f"or {DEFAULT_STREAM})")
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--timing-log")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as e:
        _fail("format", str(e), file=e.path, offset=e.offset)
        return 2
    except (ValueError, RuntimeError) as e:
        _fail(type(e).__name__, str(e))
        return 1
    except OSError as e:
        _fail("io", str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
