"""regpose command line: phantom generation, training, prediction, registration,
evaluation and runtime benchmarks.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("regpose")

ARCH_ALIASES = {"slice": "slice_pose", "volume": "volume_pose", "correction": "correction"}
SEED_ENV = "REGPOSE_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# --- helpers ------------------------------------------------------------------------

def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _atomic_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    import scipy
    import torch
    return {"regpose": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def _provenance(path: Path, args, config: dict) -> None:
    """JSON record of command, resolved config, seed and library versions (no timestamps)."""
    _write_json(path, {"command": args.command, "seed": args.seed, "config": config, "versions": _versions()})


def _resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _load_image(path: Path):
    """RPV1 volume; a single-plane volume (nz = 1) is read as an axial slice."""
    from .volume import Slice, read_volume
    vol = read_volume(path)
    if vol.dims[2] == 1:
        return Slice(vol.data[:, :, 0], vol.spacing[:2], vol.origin[:2])
    return vol


def _save_slice(path: Path, sl, z_mm: float = 0.0) -> None:
    from .volume import Volume, write_volume
    write_volume(path, Volume(sl.data[:, :, None], (*sl.spacing, 1.0), (*sl.origin, z_mm)))


def _age_range(args):
    lo, hi = args.age_min, args.age_max
    if not 0.6 <= lo <= hi <= 1.2:
        raise UsageError("need 0.6 <= --age-min <= --age-max <= 1.2")
    return lo, hi


# --- subcommands --------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    from .phantom import SampleStream, build_subjects, spec_dict, subject_specs
    from .volume import write_volume
    out = Path(args.out)
    specs = subject_specs(args.split, args.subjects, args.seed, _age_range(args), args.jitter, args.contrast)
    subjects = build_subjects(specs)
    manifest = {"subjects": [], "samples": []}
    for sub in subjects:
        name = f"subject_{sub.subject_id:05d}.rpv"
        write_volume(out / name, sub.volume, sidecar=args.sidecar)
        manifest["subjects"].append({"subject_id": sub.subject_id, "file": name, "spec": spec_dict(sub.spec)})
    if args.kind != "none" and args.per_subject > 0:
        stream = SampleStream(subjects, args.kind, args.per_subject, seed=args.seed, noise_sigma=args.noise)
        for k, s in enumerate(stream.epoch(0)):
            name = f"sample_{k:06d}.rpv"
            if args.kind == "slice":
                _save_slice(out / name, s.input, s.gt_slice_z)
            else:
                write_volume(out / name, s.input, sidecar=args.sidecar)
            manifest["samples"].append({
                "file": name, "subject_id": s.subject_id, "seed": s.seed, "kind": args.kind,
                "gt_rotation": [float(x) for x in s.gt_rotation],
                "gt_translation": [float(x) for x in s.gt_translation],
                "gt_slice_z": s.gt_slice_z,
            })
    _write_json(out / "manifest.json", manifest)
    _provenance(out / "provenance.json", args, vars_config(args))
    print(f"wrote {len(subjects)} subjects and {len(manifest['samples'])} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from .phantom import SampleStream, build_subjects, subject_specs
    from .regress import TrainConfig, build_network, config_dict, save_network, train, write_history_csv
    tag = ARCH_ALIASES[args.arch]
    cfg = TrainConfig(args.epochs1, args.epochs2, args.batch_size, args.lr, args.lam, args.seed, args.stage2_loss)
    subjects = build_subjects(subject_specs("train", args.subjects, args.seed, _age_range(args), args.jitter))
    kind = {"slice_pose": "slice", "volume_pose": "volume", "correction": "correction"}[tag]
    blur = args.blur_max if kind == "volume" else 0.0
    stream = SampleStream(subjects, kind, args.per_subject, seed=args.seed, noise_sigma=args.noise,
                          blur_sigma_max=blur)
    net = build_network(tag, args.seed)
    result = train(net, stream, cfg)
    out = Path(args.out)
    save_network(out, result.net)
    write_history_csv(out.with_suffix(".history.csv"), result.history)
    _provenance(out.with_suffix(".provenance.json"), args, {**vars_config(args), "train": config_dict(cfg)})
    last = result.history[-1] if result.history else None
    print(f"saved {tag} network to {out}" + (f"; final mean geodesic {last.mean_geodesic_deg:.2f} deg" if last else ""))
    return 0


def cmd_predict(args) -> int:
    from .regress import image_tensor, load_network, predict
    net = load_network(_existing(args.net))
    image = _load_image(_existing(args.input))
    reference = _load_image(_existing(args.reference)) if args.reference else None
    if net.tag == "correction" and reference is None:
        raise UsageError("a correction network needs --reference")
    p = predict(net, image_tensor([image], reference=reference))[0]
    result = {"arch": net.tag, "rotvec": [float(x) for x in p.rotvec], "folded": p.folded,
              "matrix": [float(x) for x in p.matrix.ravel()]}
    if p.translation is not None:
        result["translation"] = [float(x) for x in p.translation]
    if p.slice_z is not None:
        result["slice_z"] = p.slice_z
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        _atomic_text(Path(args.out), text + "\n")
        _provenance(Path(args.out).with_suffix(".provenance.json"), args, vars_config(args))
    print(text)
    return 0


def cmd_register(args) -> int:
    from .register import RegConfig, register_svr, register_vvr
    from .regress import load_network
    from .volume import Slice, Volume
    moving = _load_image(_existing(args.moving))
    fixed = _load_image(_existing(args.fixed))
    if not isinstance(fixed, Volume):
        raise UsageError("--fixed must be a 3D volume")
    net = load_network(_existing(args.net)) if args.net else None
    if args.init == "Deep" and net is None:
        raise UsageError("--init Deep needs --net")
    cfg = RegConfig(metric=args.metric, levels=args.levels, iters_per_level=args.iters, init=args.init)
    if isinstance(moving, Slice):
        res = register_svr(moving, fixed, args.z_init, cfg, net=net)
    else:
        if moving.dims != fixed.dims:
            raise UsageError("moving and fixed volumes must share a grid")
        res = register_vvr(moving, fixed, cfg, net=net)
    _write_json(Path(args.out), res.to_dict())
    _provenance(Path(args.out).with_suffix(".provenance.json"), args, vars_config(args))
    print(f"final {args.metric} {res.metric:.6f} after {res.iterations} iterations ({res.wall_time_ms:.0f} ms)")
    return 0


def _load_nets(specs) -> dict:
    from .regress import load_network
    nets = {}
    for spec in specs or []:
        if "=" not in spec:
            raise UsageError(f"--net expects tag=path, got {spec!r}")
        tag, path = spec.split("=", 1)
        tag = ARCH_ALIASES.get(tag, tag)
        if tag not in ARCH_ALIASES.values():
            raise UsageError(f"unknown network tag {tag!r}")
        p = Path(path)
        if not p.is_file():
            log.warning("network %s not found at %s; deep methods using it are skipped", tag, path)
            continue
        nets[tag] = load_network(p)
    return nets


DEFAULT_METHODS = {
    "volume": ["identity", "Deep", "VVR-GC", "VVR-PAA", "VVR-Deep"],
    "slice": ["identity", "Deep", "SVR-GC", "SVR-Deep"],
    "correction": ["identity", "Correction-Net"],
}


def cmd_evaluate(args) -> int:
    from . import eval as ev
    from .register import RegConfig
    bench = ev.make_bench(args.bench, args.subjects, args.per_subject, args.seed, _age_range(args), args.contrast)
    if args.pre_map == "prescale":
        bench = ev.map_images(bench, ev.prescale, "prescale")
    elif args.pre_map == "invert":
        bench = ev.map_images(bench, ev.contrast_premap, "invert")
    methods = args.methods or DEFAULT_METHODS[args.bench]
    nets = _load_nets(args.net)
    reg = RegConfig(metric=args.metric, levels=args.levels, iters_per_level=args.iters)
    runner = ev.run_slice_bench if args.bench == "slice" else ev.run_volume_bench
    reports = runner(methods, bench, args.seed, nets, reg, jobs=args.jobs)
    out = Path(args.out)
    _atomic_text(out / "report.json", ev.reports_json(reports) + "\n")
    _atomic_text(out / "report.csv", ev.reports_csv(reports))
    if args.plot_data:
        _atomic_text(out / "plot_data.csv", ev.plot_data_csv(reports))
    _provenance(out / "provenance.json", args, {**vars_config(args), "bench": bench.config})
    for r in reports:
        cells = "  ".join(f"{b.lo:g}-{b.hi:g}: {b.mean:6.1f} ({b.failure_rate:.0%}, n={b.n})" for b in r.bins)
        print(f"{r.method:14s} {cells}")
    return 0


def cmd_bench_runtime(args) -> int:
    from . import eval as ev
    from .phantom import make_correction_sample, template_phantom
    from .register import correction_pipeline
    from .regress import build_network, image_tensor, load_network, predict
    from .volume import RigidTransform
    tag = ARCH_ALIASES[args.arch]
    net = load_network(_existing(args.net)) if args.net else build_network(tag, args.seed)
    if net.tag != tag:
        raise UsageError(f"--net holds a {net.tag} network, not {tag}")
    fixed = template_phantom()
    rng = np.random.default_rng(args.seed)
    if tag == "correction":
        moving = make_correction_sample(fixed, rng).input
        init = RigidTransform.identity(fixed.center)
        fn = lambda: correction_pipeline(moving, fixed, net, init)
    elif tag == "volume_pose":
        x = image_tensor([fixed])
        fn = lambda: predict(net, x)
    else:
        from .phantom import make_slice_sample
        x = image_tensor([make_slice_sample(fixed, rng).input])
        fn = lambda: predict(net, x)
    stats = {"arch": tag, **ev.bench_runtime(fn, args.trials, args.warmup)}
    if args.out:
        _write_json(Path(args.out), stats)
        _provenance(Path(args.out).with_suffix(".provenance.json"), args, vars_config(args))
    print(f"{tag}: mean {stats['mean']:.2f} ms, p95 {stats['p95']:.2f} ms over {stats['n']} calls")
    return 0


def vars_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


# --- parser -------------------------------------------------------------------------

def _add_population(p, subjects: int):
    p.add_argument("--subjects", type=int, default=subjects, help="number of phantom subjects")
    p.add_argument("--age-min", type=float, default=0.9)
    p.add_argument("--age-max", type=float, default=1.1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regpose", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"regpose {__version__}")
    parser.add_argument("--seed", type=int, default=None, help=f"master seed (default ${SEED_ENV} or 0)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom-gen", help="write phantom subjects and training samples")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=["train", "test"], default="train")
    _add_population(p, 4)
    p.add_argument("--kind", choices=["none", "volume", "slice", "correction"], default="volume")
    p.add_argument("--per-subject", type=int, default=2)
    p.add_argument("--contrast", choices=["normal", "inverted"], default="normal")
    p.add_argument("--jitter", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--sidecar", action="store_true", help="also write JSON metadata next to each volume")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train a pose or correction network on phantoms")
    p.add_argument("--arch", choices=sorted(ARCH_ALIASES), required=True)
    p.add_argument("--out", required=True, help="output .rpn file")
    _add_population(p, 36)
    p.add_argument("--per-subject", type=int, default=10, help="samples per subject per epoch")
    p.add_argument("--epochs1", type=int, default=10)
    p.add_argument("--epochs2", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--stage2-loss", choices=["geodesic", "l2"], default="geodesic")
    p.add_argument("--jitter", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--blur-max", type=float, default=1.0,
                   help="volume arch only: max Gaussian blur sigma (voxels) of the augmentation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a trained network on one image")
    p.add_argument("--net", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--reference", help="reference volume for a correction network")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("register", help="register a moving volume or slice to a fixed volume")
    p.add_argument("--moving", required=True, help="RPV1 volume, or single-plane RPV1 for a slice")
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True, help="transform JSON")
    p.add_argument("--metric", choices=["NCC", "NMI"], default="NCC")
    p.add_argument("--init", choices=["GC", "PAA", "Deep"], default="GC")
    p.add_argument("--levels", type=int, choices=[1, 2, 3], default=3)
    p.add_argument("--iters", type=int, default=100, help="iterations per level")
    p.add_argument("--net", help="network for --init Deep")
    p.add_argument("--z-init", type=float, default=None, help="initial slice height (mm) for slices")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="binned capture-range benchmark")
    p.add_argument("--bench", choices=["volume", "slice", "correction"], required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--methods", nargs="+")
    p.add_argument("--net", action="append", metavar="TAG=PATH", help="e.g. volume=vol.rpn (repeatable)")
    _add_population(p, 40)
    p.add_argument("--per-subject", type=int, default=10)
    p.add_argument("--contrast", choices=["normal", "inverted"], default="normal")
    p.add_argument("--pre-map", choices=["none", "prescale", "invert"], default="none")
    p.add_argument("--metric", choices=["NCC", "NMI"], default="NCC")
    p.add_argument("--levels", type=int, choices=[1, 2, 3], default=3)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--plot-data", action="store_true", help="write per-sample (gt angle, error) pairs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-runtime", help="single-threaded runtime of a forward pass or correction pipeline")
    p.add_argument("--arch", choices=sorted(ARCH_ALIASES), default="volume")
    p.add_argument("--net")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_runtime)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        args.seed = _resolve_seed(args.seed)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"regpose: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"regpose: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
