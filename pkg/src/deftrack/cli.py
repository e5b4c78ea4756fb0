"""Command-line entry point: ``deftrack track|synth|eval|subdivide|validate``.

Exit codes: 0 on success, 1 for runtime failures (including invalid models
reported by ``validate``), 2 for usage and input/IO errors.
"""

import argparse
import contextlib
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import association, parallel, rigs
from .association import DEFAULT_CUTOFF, DEFAULT_WINDOW, Intrinsics
from .errors import (
    DeftrackError,
    HeaderMismatch,
    LengthMismatch,
    ParseError,
    TruncatedFile,
    ValidationError,
    VersionError,
)
from .kinopt import KinSolverConfig
from .metrics import Sequence, compare_modes, evaluate_run, write_curves, write_report
from .seqio import (
    GroundTruth,
    load_ground_truth,
    load_model,
    load_pose,
    load_sequence,
    save_ground_truth,
    save_model,
    save_posed_mesh,
    validate_model,
)
from .shapeopt import ShapeSolverConfig
from .skeleton import PRISMATIC, forward_kinematics, joint_positions, link_offsets
from .skinmesh import skin
from .subdivision import euler_counts, subdivide
from .synth import Curve, NoiseSpec, PhiAnimation, TrajectorySpec, generate_sequence, visible_joints
from .raster import rasterize
from .tracker import MODES, TrackConfig, track_sequence

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
INPUT_ERRORS = (OSError, ParseError, VersionError, ValidationError, HeaderMismatch, TruncatedFile, LengthMismatch)

_KIN, _SHAPE = KinSolverConfig(), ShapeSolverConfig()


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.cause = exc


@contextlib.contextmanager
def stage(name):
    """Tag any failure inside the block with the pipeline stage that raised it."""
    try:
        yield
    except (StageError, UsageError):
        raise
    except (DeftrackError, OSError, ValueError) as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------- arguments


def _threads(p):
    p.add_argument("--threads", type=int, default=1, help="worker threads; outputs do not depend on it")


def _config(p):
    p.add_argument("--config", help="JSON file of option values; its entries override command-line flags")


def _intrinsics(p):
    g = p.add_argument_group("camera")
    g.add_argument("--width", type=int, default=512, help="image width in pixels")
    g.add_argument("--height", type=int, default=424, help="image height in pixels")
    g.add_argument("--fx", type=float, default=365.0, help="focal length x (pixels)")
    g.add_argument("--fy", type=float, default=365.0, help="focal length y (pixels)")
    g.add_argument("--cx", type=float, default=256.0, help="principal point x (pixels)")
    g.add_argument("--cy", type=float, default=212.0, help="principal point y (pixels)")


def _solver(p):
    g = p.add_argument_group("pose solver")
    g.add_argument("--iterations", type=int, default=_KIN.iterations, help="pose iterations per frame")
    g.add_argument("--lambda-k", type=float, default=_KIN.lambda_k, help="pose damping")
    g.add_argument("--lambda-s", type=float, default=_KIN.lambda_s, help="pose prior weight")
    g.add_argument("--kin-diag-floor", type=float, default=_KIN.diag_floor, help="pose system diagonal floor")
    g.add_argument("--assoc-refresh", type=int, default=_KIN.assoc_refresh, help="pose iterations per association")
    g.add_argument("--clamp-limits", action="store_true", default=_KIN.clamp_limits, help="clamp joints to limits")
    g = p.add_argument_group("shape solver")
    g.add_argument("--shape-iterations", type=int, default=_SHAPE.iterations, help="shape iterations per frame")
    g.add_argument("--lambda-phi", type=float, default=_SHAPE.lambda_phi, help="warp magnitude weight")
    g.add_argument("--lambda-nbr", type=float, default=_SHAPE.lambda_nbr, help="warp smoothness weight")
    g.add_argument("--lambda-w", type=float, default=_SHAPE.lambda_w, help="shape damping")
    g.add_argument("--shape-diag-floor", type=float, default=_SHAPE.diag_floor, help="shape system diagonal floor")
    g.add_argument("--backtrack", type=int, default=_SHAPE.backtrack, help="step halvings before a warp step is refused")
    g = p.add_argument_group("association")
    g.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="search window radius (pixels)")
    g.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF, help="association distance cutoff (m)")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="deftrack", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="track a depth sequence", formatter_class=fmt)
    p.add_argument("--model", required=True, help="model bundle JSON")
    p.add_argument("--sequence", required=True, help="depth sequence file")
    p.add_argument("--init", help="initial pose: ground-truth CSV (frame 0), JSON list or numbers; "
                   "defaults to ground_truth.csv beside the sequence")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=MODES, default="dynamic", help="shape handling mode")
    p.add_argument("--dump-every", type=int, default=0, help="write a posed mesh every N frames (0 = never)")
    _solver(p)
    _threads(p)
    _config(p)

    p = sub.add_parser("synth", help="render a synthetic sequence with ground truth", formatter_class=fmt)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="model bundle JSON")
    src.add_argument("--rig", choices=sorted(rigs.RIGS), help="built-in test rig (saved as model.json in --out)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trajectory", help="trajectory JSON; default is seeded random sinusoids")
    p.add_argument("--frames", type=int, default=300, help="frame count for the random trajectory")
    p.add_argument("--frame-rate", type=float, default=30.0, help="frame rate for the random trajectory")
    p.add_argument("--amplitude", type=float, default=0.3, help="random hinge amplitude bound (rad)")
    p.add_argument("--prismatic-amplitude", type=float, default=0.02, help="random prismatic amplitude bound (m)")
    p.add_argument("--noise", help="noise JSON (sigma, dropout, quantization, seed); overrides the noise flags")
    p.add_argument("--sigma", type=float, default=0.0, help="depth noise standard deviation (m)")
    p.add_argument("--dropout", type=float, default=0.0, help="pixel dropout probability")
    p.add_argument("--quantization", type=float, default=0.0, help="depth quantisation step (m, 0 = off)")
    p.add_argument("--seed", type=int, default=0, help="seed for noise and the random trajectory")
    p.add_argument("--phi", help="warp field .npy of shape (V, 3) applied to the rendered model")
    p.add_argument("--phi-scale-start", type=float, default=1.0, help="warp scale at the first frame")
    p.add_argument("--phi-scale-end", type=float, default=1.0, help="warp scale at the last frame")
    _intrinsics(p)
    _threads(p)
    _config(p)

    p = sub.add_parser("eval", help="evaluate a tracking run or compare modes", formatter_class=fmt)
    p.add_argument("--model", required=True, help="model bundle JSON")
    p.add_argument("--sequence", required=True, action="append", help="depth sequence (repeatable)")
    p.add_argument("--ground-truth", action="append", help="ground-truth CSV per sequence "
                   "(default: ground_truth.csv beside each sequence)")
    p.add_argument("--run", help="tracking output directory to evaluate (single sequence); "
                   "without it every mode in --modes is tracked and compared")
    p.add_argument("--modes", default=",".join(MODES), help="comma-separated modes to compare")
    p.add_argument("--out", required=True, help="output directory for metrics.csv and curves.csv")
    _solver(p)
    _threads(p)
    _config(p)

    p = sub.add_parser("subdivide", help="Catmull-Clark refine a model bundle", formatter_class=fmt)
    p.add_argument("--model", required=True, help="model bundle JSON")
    p.add_argument("--iterations", type=int, default=1, help="subdivision iterations")
    p.add_argument("--neighbors", type=int, default=4, help="warp smoothness neighbours per vertex")
    p.add_argument("--out", required=True, help="output model bundle JSON")
    _config(p)

    p = sub.add_parser("validate", help="list every invariant a model bundle violates", formatter_class=fmt)
    p.add_argument("--model", required=True, help="model bundle JSON")
    _config(p)
    return parser


def apply_config(parser, args):
    """Overlay ``--config`` JSON entries onto parsed arguments."""
    if not getattr(args, "config", None):
        return args
    try:
        doc = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config") or not hasattr(args, dest):
            raise UsageError(f"{args.config}: unknown option {key!r} for '{args.command}'")
        setattr(args, dest, value)
    return args


def track_config(args):
    kin = KinSolverConfig(
        iterations=args.iterations,
        lambda_k=args.lambda_k,
        lambda_s=args.lambda_s,
        diag_floor=args.kin_diag_floor,
        assoc_refresh=args.assoc_refresh,
        clamp_limits=bool(args.clamp_limits),
    )
    shape = ShapeSolverConfig(
        iterations=args.shape_iterations,
        lambda_phi=args.lambda_phi,
        lambda_nbr=args.lambda_nbr,
        lambda_w=args.lambda_w,
        diag_floor=args.shape_diag_floor,
        backtrack=args.backtrack,
    )
    mode = getattr(args, "mode", "dynamic")
    return TrackConfig(mode=mode, kin=kin, shape=shape, window_radius=args.window, cutoff=args.cutoff)


def set_threads(n):
    if n is None or int(n) < 1:
        raise UsageError("--threads must be >= 1")
    parallel.set_threads(n)
    association.set_threads(n)


# ---------------------------------------------------------------- commands


def _theta_names(skel):
    names = [None] * skel.n_joints
    for link in skel.links:
        names[link.joint.theta_index] = link.name
    return names


def _beside(path, name):
    return Path(path).parent / name


def cmd_track(args):
    set_threads(args.threads)
    with stage("load model"):
        bundle = load_model(args.model)
    with stage("load sequence"):
        reader = load_sequence(args.sequence)
        intr = reader.intrinsics
    with stage("load initial pose"):
        init = args.init or _beside(args.sequence, "ground_truth.csv")
        theta0 = load_pose(init)
        if theta0.shape != (bundle.skeleton.n_joints,):
            raise ValidationError([f"initial pose has {theta0.size} values, model has {bundle.skeleton.n_joints} joints"])
    with stage("configure"):
        config = track_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    skel = bundle.skeleton
    mesh = bundle.mesh.rigid() if config.mode == "rigid" else bundle.mesh
    n = len(reader)
    phi_store = None
    if config.estimates_shape:
        phi_store = np.lib.format.open_memmap(out / "phi.npy", mode="w+", dtype=np.float64, shape=(n, len(mesh.v0), 3))
    thetas, joints, visible = [], [], []
    pose_rows, shape_rows = [], []
    with stage("track"):
        for res in track_sequence(bundle, reader, intr, theta0, config):
            k = res.index
            fk = forward_kinematics(skel, res.theta)
            thetas.append(res.theta)
            joints.append(joint_positions(fk, bundle.labeled_joints))
            phi = res.phi if config.estimates_shape else None
            posed = skin(mesh, link_offsets(skel, res.theta, fk), phi)
            _, tri = rasterize(posed.v, mesh.faces, intr)
            visible.append(visible_joints(bundle, tri))
            for it in res.pose_log:
                pose_rows.append([k, it.iteration, it.residual_sum, it.step_norm, it.n_associated, int(it.skipped)])
            if res.shape_report is not None:
                r = res.shape_report
                shape_rows.append([k, r.mean_phi, r.max_phi, r.mean_abs_r_before, r.mean_abs_r_after,
                                   r.singular, r.rejected])
            if phi_store is not None:
                phi_store[k] = res.phi
            if args.dump_every and k % args.dump_every == 0:
                save_posed_mesh(out / "meshes" / f"frame_{k:05d}.ply", posed.v, posed.n, mesh.faces)
    if phi_store is not None:
        phi_store.flush()
        del phi_store
    with stage("write outputs"):
        gt = GroundTruth(np.array(thetas), np.array(joints), np.array(visible), _theta_names(skel), bundle.joint_names)
        save_ground_truth(out / "trajectory.csv", gt)
        _write_csv(out / "pose_diagnostics.csv",
                   ["frame", "iteration", "residual_sum", "step_norm", "n_associated", "skipped"], pose_rows)
        if config.estimates_shape:
            _write_csv(out / "shape_diagnostics.csv",
                       ["frame", "mean_phi", "max_phi", "mean_abs_r_before", "mean_abs_r_after", "singular",
                        "rejected"], shape_rows)
        run = {"mode": config.mode, "model": str(args.model), "sequence": str(args.sequence), "frames": n}
        (out / "run.json").write_text(json.dumps(run, indent=1) + "\n")
    print(f"tracked {n} frames ({config.mode}) -> {out}")
    return EXIT_OK


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def random_trajectory(skel, frames, frame_rate, amplitude, prismatic_amplitude, seed):
    """Seeded sinusoid per joint, amplitudes bounded by the joint limits."""
    rng = np.random.default_rng(seed)
    curves = {}
    for link in skel.links:
        joint = link.joint
        bound = prismatic_amplitude if joint.kind == PRISMATIC else amplitude
        if joint.limits is not None:
            bound = min(bound, abs(joint.limits[0]), abs(joint.limits[1]))
        curves[link.name] = Curve(
            "sinusoid",
            amplitude=float(rng.uniform(0.5, 1.0) * bound),
            frequency=float(rng.uniform(0.2, 0.6)),
            phase=float(rng.uniform(0.0, 2 * np.pi)),
        )
    return TrajectorySpec(curves=curves, frame_count=frames, frame_rate=frame_rate)


def cmd_synth(args):
    set_threads(args.threads)
    out = Path(args.out)
    with stage("load model"):
        if args.rig:
            bundle = rigs.RIGS[args.rig]()
            out.mkdir(parents=True, exist_ok=True)
            save_model(out / "model.json", bundle)
        else:
            bundle = load_model(args.model)
    with stage("load trajectory"):
        if args.trajectory:
            traj = TrajectorySpec.load(args.trajectory)
        else:
            traj = random_trajectory(bundle.skeleton, args.frames, args.frame_rate, args.amplitude,
                                     args.prismatic_amplitude, args.seed)
        traj.validate(bundle.skeleton)
    with stage("configure"):
        if args.noise:
            noise = NoiseSpec.load(args.noise)
        else:
            noise = NoiseSpec(sigma=args.sigma, dropout=args.dropout, quantization=args.quantization, seed=args.seed)
        intr = Intrinsics(args.fx, args.fy, args.cx, args.cy, args.width, args.height)
        phi_anim = None
        if args.phi:
            field = np.load(args.phi)
            if field.shape != bundle.mesh.v0.shape:
                raise ValidationError([f"warp field shape {field.shape} does not match {bundle.mesh.v0.shape}"])
            phi_anim = PhiAnimation(field, args.phi_scale_start, args.phi_scale_end)
    with stage("render"):
        seq, gt = generate_sequence(bundle, traj, intr, out, noise, phi_anim, threads=args.threads)
        traj.save(out / "trajectory.json")
    print(f"wrote {traj.frame_count} frames -> {seq} and {gt}")
    return EXIT_OK


def cmd_eval(args):
    set_threads(args.threads)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()] if isinstance(args.modes, str) else list(args.modes)
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise UsageError(f"unknown modes {unknown}; choose from {', '.join(MODES)}")
    truths = args.ground_truth or [_beside(s, "ground_truth.csv") for s in args.sequence]
    if len(truths) != len(args.sequence):
        raise UsageError("give one --ground-truth per --sequence")
    if args.run and len(args.sequence) != 1:
        raise UsageError("--run evaluates exactly one sequence")
    with stage("load model"):
        bundle = load_model(args.model)
    sequences = []
    with stage("load sequence"):
        for path, truth in zip(args.sequence, truths):
            reader = load_sequence(path)
            gt = load_ground_truth(truth)
            if gt.n_frames != len(reader):
                raise LengthMismatch(f"{truth}: {gt.n_frames} frames, sequence has {len(reader)}")
            sequences.append(Sequence(Path(path).parent.name or Path(path).stem, list(reader), reader.intrinsics, gt))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.run:
        with stage("load run"):
            run_dir = Path(args.run)
            run = json.loads((run_dir / "run.json").read_text())
            tracked = load_ground_truth(run_dir / "trajectory.csv")
            phi_path = run_dir / "phi.npy"
            phis = np.load(phi_path, mmap_mode="r") if phi_path.exists() else None
        with stage("evaluate"):
            results = [evaluate_run(bundle, sequences[0], tracked.theta, phis, run["mode"])]
    else:
        with stage("evaluate"):
            results = compare_modes(bundle, sequences, modes, track_config(args))
    with stage("write outputs"):
        write_report(out / "metrics.csv", results)
        write_curves(out / "curves.csv", results)
    for r in results:
        print(f"{r.mode:12s} {r.sequence}: joint AUC {r.joints.auc:.4f}, recon median {r.recon.median * 1000:.2f} mm")
    return EXIT_OK


def cmd_subdivide(args):
    if args.iterations < 1:
        raise UsageError("--iterations must be >= 1")
    with stage("load model"):
        bundle = load_model(args.model)
    with stage("subdivide"):
        mesh = bundle.mesh
        polys = mesh.polys if mesh.polys is not None else mesh.faces
        before = euler_counts(polys, len(mesh.v0))
        mesh = subdivide(mesh, bundle.skeleton.n_links, args.iterations, args.neighbors)
        bundle.mesh = mesh
    with stage("write outputs"):
        save_model(args.out, bundle)
    print(f"V,E,F {before} -> ({len(mesh.v0)}, {len(mesh.polys)} quads, {len(mesh.faces)} triangles) -> {args.out}")
    return EXIT_OK


def cmd_validate(args):
    with stage("load model"):
        problems = validate_model(args.model)
    if problems:
        for p in problems:
            print(p)
        print(f"{args.model}: {len(problems)} problem(s)", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{args.model}: ok")
    return EXIT_OK


COMMANDS = {
    "track": cmd_track,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "subdivide": cmd_subdivide,
    "validate": cmd_validate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_config(parser, args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"deftrack {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        bad_input = isinstance(exc.cause, INPUT_ERRORS) or exc.stage == "configure"
        code = EXIT_USAGE if bad_input else EXIT_RUNTIME
        print(f"deftrack {args.command}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
