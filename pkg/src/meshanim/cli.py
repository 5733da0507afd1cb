"""Command-line entry point: ``meshanim <command> [flags]``.

Every command writes a run manifest (``run.json``) next to its outputs,
recording the flags, seeds, tool version, paths and wall-clock time.
Failures print a one-line JSON object on stderr and exit non-zero; bad
flags exit with status 2 after printing usage.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, seeding

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "message": message, "prog": self.prog}) + "\n")
        raise SystemExit(EXIT_USAGE)


def _manifest(command, args, started, inputs, outputs, extra=None):
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    m = {
        "command": command,
        "flags": flags,
        "seeds": {"seed": args.seed},
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.perf_counter() - started, 6),
    }
    m.update(extra or {})
    return m


def _write_manifest(path, manifest):
    from .ottk import write_json

    write_json(manifest, path)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_synth_data(args):
    from .data import save_dataset
    from .train import synth_dataset

    t0 = time.perf_counter()
    if args.sequences < 1 or args.frames < 1:
        raise UsageError("--sequences and --frames must be >= 1")
    ds = synth_dataset(args.seed, args.sequences, args.frames, fps=args.fps, subdivisions=args.subdivisions)
    out = Path(args.out)
    meta = {"source": "synthetic", "seed": args.seed, "n_sequences": args.sequences,
            "frames_per_seq": args.frames, "fps": args.fps, "subdivisions": args.subdivisions}
    manifest = save_dataset(out, ds.template, ds.samples, ds.masks, meta)
    _write_manifest(out / "run.json", _manifest("synth-data", args, t0, [], [out / "dataset.json"]))
    _emit({"samples": len(manifest["samples"]), "frames": [s["frames"] for s in manifest["samples"]],
           "out": str(out)})


def cmd_build_hierarchy(args):
    from .mesh import load_obj
    from .resample import build_hierarchy, save_hierarchy

    t0 = time.perf_counter()
    mesh = load_obj(args.mesh)
    h = build_hierarchy(mesh, args.levels, boundary_weight=args.boundary_weight)
    out = Path(args.out)
    info = save_hierarchy(h, out)
    _write_manifest(out / "run.json", _manifest("build-hierarchy", args, t0, [args.mesh], [out / "hierarchy.json"]))
    _emit({"sizes": h.sizes, "lambda_max": info.get("lambda_max", h.lambda_max)})


def cmd_swd(args):
    from .mesh import load_obj
    from .ot import Normalization, mesh_to_varifold, sample_projections, sliced_wasserstein_with_error

    t0 = time.perf_counter()
    a, b = load_obj(args.a), load_obj(args.b)
    norm = Normalization.from_mesh(b) if args.normalize == "target" else None
    proj = sample_projections(6, args.projections, seeding.derive_seed(args.seed, "projections"))
    mu = mesh_to_varifold(a, args.gamma, norm)
    nu = mesh_to_varifold(b, args.gamma, norm)
    value, se = sliced_wasserstein_with_error(mu, nu, proj, args.p)
    result = {"swd": value, "standard_error": se, "projections": args.projections, "p": args.p,
              "gamma": args.gamma}
    outputs = []
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        from .ottk import write_json

        write_json(result, out / "swd.json")
        outputs = [out / "swd.json"]
    manifest = _manifest("swd", args, t0, [args.a, args.b], outputs)
    if args.out:
        _write_manifest(Path(args.out) / "run.json", manifest)
    else:
        result["manifest"] = manifest
    _emit(result)


def _load_config(path):
    from .ottk import read_json

    return read_json(path) if path else {}


def cmd_train(args):
    from .data import open_dataset
    from .model import ModelConfig, save_model
    from .ottk import write_json
    from .resample import build_hierarchy
    from .train import TrainConfig, format_history, train

    t0 = time.perf_counter()
    raw = _load_config(args.config)
    model_raw = raw.pop("model", {})
    raw["seed"] = args.seed
    for flag, key in (("steps", "max_steps"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("lr", "learning_rate")):
        if getattr(args, flag) is not None:
            raw[key] = getattr(args, flag)
    config = TrainConfig.from_dict(raw)
    ds = open_dataset(args.data)
    model_config = ModelConfig(**{"n_vertices": ds.template.n_vertices,
                                  "feature_dim": ds.samples[0].features.shape[1], **model_raw})
    hierarchy = build_hierarchy(ds.template, len(model_config.mesh_channels))
    log = None
    if args.verbose:
        def log(r):
            sys.stderr.write(json.dumps(r) + "\n")
    result = train(config, ds.samples, hierarchy, model_config, threads=args.threads, log=log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out, result.params, model_config, hierarchy, ds.template,
               extra={"train_config": config.to_dict(), "best_epoch": result.best_epoch,
                      "data": str(args.data)})
    (out / "history.csv").write_text(format_history(result.history))
    write_json({"train": config.to_dict(), "model": model_config.to_dict()}, out / "config.json")
    _write_manifest(out / "run.json", _manifest(
        "train", args, t0, [args.data] + ([args.config] if args.config else []),
        [out / "model.json", out / "history.csv", out / "config.json"],
        {"seeds": {"seed": args.seed, "streams": ["split", "pca", "init", "shuffle", "projections",
                                                  "eval-projections"]}}))
    last = result.history[-1]
    _emit({"epochs": last["epoch"], "steps": last["steps"], "initial_train_loss": result.history[0]["train_loss"],
           "final_train_loss": last["train_loss"], "best_epoch": result.best_epoch, "out": str(out)})


def cmd_infer(args):
    from .mesh import MeshError, load_obj, save_obj
    from .model import forward_sequence, load_model
    from .ottk import load_tensor

    t0 = time.perf_counter()
    archive = load_model(args.model)
    template = load_obj(args.template) if args.template else archive.template
    expected = archive.hierarchy.sizes[0]
    if template.n_vertices != expected:
        raise MeshError(f"topology mismatch: template has {template.n_vertices} vertices, "
                        f"model expects {expected}")
    feats = load_tensor(args.features)
    if feats.ndim != 2 or feats.shape[1] != archive.config.feature_dim:
        raise ValueError(f"features must be (T, {archive.config.feature_dim}), got {feats.shape}")
    frames = args.frames if args.frames is not None else max(1, int(round(len(feats) * args.fps_ratio)))
    t1 = time.perf_counter()
    pred = forward_sequence(template, feats, frames, archive.params, archive.hierarchy, archive.config).data
    elapsed = time.perf_counter() - t1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, v in enumerate(pred):
        p = out / f"frame_{i:04d}.obj"
        save_obj(template.with_vertices(v), p)
        paths.append(p)
    _write_manifest(out / "run.json", _manifest(
        "infer", args, t0, [args.model, args.features] + ([args.template] if args.template else []), paths,
        {"frames": frames, "inference_s_per_frame": elapsed / frames}))
    _emit({"frames": frames, "out": str(out), "seconds_per_frame": elapsed / frames})


def cmd_eval(args):
    from .data import open_dataset
    from .eval import evaluate
    from .mesh import load_mask
    from .model import load_model
    from .ottk import write_json
    from .train import TrainConfig, split_dataset

    t0 = time.perf_counter()
    archive = load_model(args.model)
    ds = open_dataset(args.data)
    if ds.template.n_vertices != archive.hierarchy.sizes[0]:
        raise ValueError(f"topology mismatch: data has {ds.template.n_vertices} vertices, "
                         f"model expects {archive.hierarchy.sizes[0]}")
    if args.masks:
        masks = {}
        for path in args.masks.split(","):
            m = load_mask(path)
            masks[m.label] = m
    else:
        masks = ds.masks
    samples = ds.samples
    if args.split != "all":
        tc = TrainConfig.from_dict(archive.manifest.get("train_config", {}))
        train_s, val_s = split_dataset(samples, tc.val_fraction, tc.seed)
        samples = val_s if args.split == "val" else train_s
        if not samples:
            raise ValueError(f"the {args.split} split is empty")
    report = evaluate(archive, samples, masks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    body = {"metrics": report.to_dict(), "split": args.split, "samples": [s.name for s in samples]}
    write_json(body, out)
    _write_manifest(out.with_name(out.stem + ".run.json"),
                    _manifest("eval", args, t0, [args.model, args.data], [out]))
    _emit(body)


def cmd_selftest(args):
    from .selftest import run_all

    t0 = time.perf_counter()
    results = run_all(seed=args.seed, quick=not args.full)
    for name, ok, detail in results:
        sys.stdout.write(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}\n")
    failed = [name for name, ok, _ in results if not ok]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        from .ottk import write_json

        write_json([{"name": n, "passed": bool(ok), "detail": d} for n, ok, d in results], out / "selftest.json")
        _write_manifest(out / "run.json", _manifest("selftest", args, t0, [], [out / "selftest.json"]))
    if failed:
        raise RuntimeError(f"selftest failures: {', '.join(failed)}")


# ---------------------------------------------------------------- parser

def build_parser():
    parser = _Parser(prog="meshanim", description="Speech-driven mesh animation toolkit.")
    parser.add_argument("--version", action="version", version=f"meshanim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=0, help="run seed (all randomness derives from it)")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
        p.set_defaults(func=func)
        return p

    p = command("synth-data", cmd_synth_data, "generate the synthetic talking-sphere dataset")
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--subdivisions", type=int, default=3)
    p.add_argument("--out", required=True)

    p = command("build-hierarchy", cmd_build_hierarchy, "decimate a mesh into a resampling hierarchy")
    p.add_argument("--mesh", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--boundary-weight", type=float, default=10.0)
    p.add_argument("--out", required=True)

    p = command("swd", cmd_swd, "sliced Wasserstein distance between two mesh varifolds")
    p.add_argument("--a", "--mesh-a", dest="a", required=True, help="predicted / source mesh")
    p.add_argument("--b", "--mesh-b", dest="b", required=True, help="target mesh")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--projections", "--proj", dest="projections", type=int, default=100)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--normalize", choices=("target", "none"), default="target")
    p.add_argument("--out", default=None, help="directory for swd.json and run.json")

    p = command("train", cmd_train, "train a model")
    p.add_argument("--config", default=None, help="JSON training options (optional 'model' section)")
    p.add_argument("--data", required=True, help="dataset directory or synth:seed=1,n=8,frames=16")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="optimizer step budget")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--verbose", action="store_true", help="log history rows to stderr")

    p = command("infer", cmd_infer, "predict a mesh sequence from audio features")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="OTTK tensor (T_a, F)")
    p.add_argument("--template", default=None, help="template OBJ (default: the model's)")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--fps-ratio", type=float, default=1.0, help="frames per feature row")
    p.add_argument("--out", required=True)

    p = command("eval", cmd_eval, "masked vertex errors and lip DTW of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--masks", default=None, help="comma-separated mask files (default: dataset masks)")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--out", required=True, help="report JSON path")

    p = command("selftest", cmd_selftest, "run the built-in oracle checks")
    p.add_argument("--full", action="store_true", help="full-size suites instead of quick ones")
    p.add_argument("--out", default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            parser.error("--threads must be >= 1")
    except SystemExit as exc:  # usage errors, --help and --version
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        args.func(args)
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "usage", "message": str(exc), "command": args.command}) + "\n")
        return EXIT_USAGE
    except Exception as exc:  # reported as structured JSON
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
