"""Command-line entry point: ``psfcn <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every run writes ``run_manifest.json`` next to its outputs; ``psfcn replay``
re-executes a manifest.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import __version__, kernels
from .checkpoint import VERSION as CHECKPOINT_VERSION
from .classic import L2Solver
from .colormap import render_error_map
from .data import NormalMap
from .dataset_io import (
    decode_normal_png,
    encode_normal_png,
    encode_rgb8_png,
    load_diligent_dir,
    load_native_sample,
)
from .errors import DataError, PSFCNError, ValidationError
from .evaluate import NetworkSolver, format_sweep, mae, per_material_sweep, random_trial_eval, run_label
from .net import NetConfig, build_psfcn, forward, load_weights, read_manifest, save_weights
from .recon import decode_depth, depth_from_normals, depth_preview_png, depth_to_obj, encode_depth
from .render import FORMAT_VERSION as DATASET_VERSION
from .render import RenderJob, brdf_grid, iter_job_samples, render_dataset
from .train import TrainConfig, train

log = logging.getLogger("psfcn")

MANIFEST_NAME = "run_manifest.json"
FUSION_FLAGS = {"max": "max", "avg": "average", "conv": "concat_conv"}
DATA_ROOT_ENV = "PSFCN_DATA_ROOT"


class UsageError(PSFCNError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _write(path, data):
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    kwargs = {} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"}
    with open(path, mode, **kwargs) as fh:
        fh.write(data)


def _data_path(args, required=True):
    path = args.data or os.environ.get(DATA_ROOT_ENV)
    if path is None and required:
        raise UsageError(f"no dataset given: pass --data or set {DATA_ROOT_ENV}")
    if path is not None and not os.path.exists(path):
        raise DataError(f"dataset path {path} does not exist")
    return path


def _is_sample_dir(path):
    return os.path.isfile(os.path.join(path, "lights.txt")) or os.path.isfile(os.path.join(path, "filenames.txt"))


def load_sample(path):
    if os.path.isfile(os.path.join(path, "filenames.txt")):
        return load_diligent_dir(path)
    return load_native_sample(path)


def load_samples(path, limit=None):
    """One sample directory, or every sample directory directly under ``path``."""
    if _is_sample_dir(path):
        return [load_sample(path)]
    dirs = sorted(os.path.join(path, d) for d in os.listdir(path) if _is_sample_dir(os.path.join(path, d)))
    if not dirs:
        raise DataError(f"no samples found under {path}")
    if limit is not None:
        dirs = dirs[:limit]
    return [load_sample(d) for d in dirs]


def _dataset_kind(path):
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            return json.load(fh)["job"]["kind"]
    except (OSError, KeyError, json.JSONDecodeError):
        return None


def _train_label(kind):
    return {"blobby": "B", "sphere": "Sph"}.get(kind, "custom")


def _load_model(path, args):
    """Load a checkpoint and check it against the flags describing the input."""
    net = load_weights(path)
    if net.config.calibrated and getattr(args, "uncalibrated", False):
        raise DataError(
            f"{path} is a calibrated model and needs light directions; drop --uncalibrated or use an uncalibrated checkpoint"
        )
    if not net.config.calibrated and not getattr(args, "uncalibrated", False):
        raise DataError(f"{path} is an uncalibrated model; pass --uncalibrated to run it without light directions")
    fusion = getattr(args, "fusion", None)
    if fusion is not None and FUSION_FLAGS[fusion] != net.config.fusion:
        raise DataError(f"{path} uses {net.config.fusion} fusion but --fusion {fusion} was requested")
    return net


def _check_q(net, q):
    cap = net.config.concat_capacity
    if net.config.fusion == "concat_conv" and q != cap:
        raise ValidationError(
            f"this concat_conv model accepts exactly {cap} images per object, got {q}; pass --q {cap}"
        )


def _subset(sample, q, seed):
    if q is None or q == sample.q:
        return sample
    if q > sample.q:
        raise ValidationError(f"--q {q} exceeds the {sample.q} images of {sample.name!r}")
    rng = np.random.default_rng([seed, 17])
    return sample.subset(np.sort(rng.choice(sample.q, size=q, replace=False)))


# --------------------------------------------------------------------------
# subcommands; each returns a dict of output paths (relative to --out)
# --------------------------------------------------------------------------

def cmd_render(args):
    grid_size = len(brdf_grid())
    if args.brdf_grid is not None:
        if args.brdf_grid != grid_size:
            raise UsageError(f"--brdf-grid must be {grid_size} (the full material grid)")
        if args.brdfs_per_shape is not None:
            raise UsageError("--brdf-grid and --brdfs-per-shape are mutually exclusive")
        n_shapes = args.samples or 1
        per_shape = 1
    else:
        per_shape = args.brdfs_per_shape or 1
        samples = args.samples or 1
        if samples % per_shape:
            raise UsageError(f"--samples {samples} is not a multiple of --brdfs-per-shape {per_shape}")
        n_shapes = samples // per_shape
    job = RenderJob(
        kind=args.kind,
        n_shapes=n_shapes,
        brdfs_per_shape=per_shape,
        use_full_grid=args.brdf_grid is not None,
        q=args.q,
        az_span=args.span,
        el_span=args.span,
        size=args.size,
        shared_lights=args.shared_lights,
        noise=args.noise,
        seed=args.seed,
        out_dir=args.out,
    )
    manifest = render_dataset(job)
    return {"dataset": ".", "manifest": "manifest.json", "samples": [e["id"] for e in manifest["samples"]]}


def cmd_train(args):
    data = load_samples(_data_path(args), args.limit)
    fusion = FUSION_FLAGS[args.fusion or "max"]
    config = NetConfig(
        calibrated=not args.uncalibrated,
        width_scale=args.width_scale,
        fusion=fusion,
        concat_capacity=args.q if fusion == "concat_conv" else 0,
    )
    tconf = TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        base_lr=args.lr,
        lr_halving_period_epochs=args.lr_period,
        q_train=args.q,
        seed=args.seed,
        noise=args.noise_amp,
    )
    net = build_psfcn(config, seed=args.seed)
    log_path = os.path.join(args.out, "loss.log")
    _write(log_path, "")
    result = train(net, data, tconf, log_file=log_path)
    training = tconf.to_dict()
    training["data_kind"] = _dataset_kind(_data_path(args))
    training["samples"] = len(data)
    ckpt = os.path.join(args.out, "model.psfw")
    save_weights(result.net, ckpt, training=training)
    return {"checkpoint": "model.psfw", "checkpoint_manifest": "model.psfw.manifest.json", "loss_log": "loss.log"}


def cmd_predict(args):
    net = _load_model(args.model, args)
    sample = _subset(load_sample(_data_path(args)), args.q, args.seed)
    _check_q(net, sample.q)
    pred = forward(net, sample)
    outputs = {"normals": "normal.png"}
    _write(os.path.join(args.out, "normal.png"), encode_normal_png(pred))
    if sample.normals is not None:
        gt = NormalMap(sample.normals, sample.mask)
        metrics = {"sample": sample.name, "q": sample.q, "mae_deg": mae(pred, gt)}
        _write(os.path.join(args.out, "metrics.json"), json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        outputs["metrics"] = "metrics.json"
        if not args.no_error_map:
            _write(os.path.join(args.out, "error_map.png"), encode_rgb8_png(render_error_map(pred, gt)))
            outputs["error_map"] = "error_map.png"
    return outputs


def _solver_and_label(args, q_test):
    if args.solver == "l2":
        if args.model:
            raise UsageError("--solver l2 does not take --model")
        return L2Solver(), run_label("L2 Baseline", None, None, q_test)
    if not args.model:
        raise UsageError("--model is required unless --solver l2")
    net = _load_model(args.model, args)
    training = read_manifest(args.model).get("training") or {}
    name = "PS-FCN" if net.config.calibrated else "UPS-FCN"
    label = run_label(name, _train_label(training.get("data_kind")), training.get("q_train"), q_test)
    return NetworkSolver(net, label), label


def cmd_eval(args):
    data = load_samples(_data_path(args), args.limit)
    q_test = args.q_test or min(s.q for s in data)
    solver, label = _solver_and_label(args, q_test)
    if isinstance(solver, NetworkSolver):
        _check_q(solver.net, q_test)
    report = random_trial_eval(solver, data, q_test, args.trials, args.seed, label=label, lit_only=args.lit_only)
    _write(os.path.join(args.out, "report.tsv"), report.to_tsv())
    _write(os.path.join(args.out, "report.json"), report.to_json())
    log.info("%s: mean MAE %.3f deg over %d objects", label, report.mean, len(report.per_object))
    return {"report_tsv": "report.tsv", "report_json": "report.json"}


def cmd_sweep(args):
    grid = brdf_grid()
    path = _data_path(args, required=False)
    if path is not None:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            entries = json.load(fh)["samples"]
        samples = [load_native_sample(os.path.join(path, e["id"])) for e in entries]
        materials = [grid[e["material_index"]] for e in entries]
    else:
        job = RenderJob(
            kind="sphere", n_shapes=1, use_full_grid=True, q=args.q or 100, az_span=args.span,
            el_span=args.span, size=args.size, shared_lights=True, seed=args.seed,
        )
        pairs = list(iter_job_samples(job))
        samples = [s for _, s in pairs]
        materials = [grid[p.material_index] for p, _ in pairs]
    solver, _ = _solver_and_label(args, samples[0].q)
    rows = per_material_sweep(solver, samples, materials)
    _write(os.path.join(args.out, "sweep.tsv"), format_sweep(rows))
    _write(
        os.path.join(args.out, "sweep.json"),
        json.dumps([r.__dict__ for r in rows], indent=2, sort_keys=True, allow_nan=True) + "\n",
    )
    return {"sweep_tsv": "sweep.tsv", "sweep_json": "sweep.json"}


def cmd_recon(args):
    if args.normals is None:
        raise UsageError("--normals (a 16-bit normal PNG) is required")
    with open(args.normals, "rb") as fh:
        nmap = decode_normal_png(fh.read())
    depth = depth_from_normals(nmap)
    _write(os.path.join(args.out, "depth.psdz"), encode_depth(depth))
    _write(os.path.join(args.out, "depth.png"), depth_preview_png(depth))
    _write(os.path.join(args.out, "mesh.obj"), depth_to_obj(decode_depth(encode_depth(depth))))
    return {"depth": "depth.psdz", "preview": "depth.png", "mesh": "mesh.obj"}


COMMANDS = {
    "render": cmd_render,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "recon": cmd_recon,
}


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p, out_required=True):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count; 1 guarantees bit-reproducibility")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--model", help="checkpoint path (.psfw with its .manifest.json sidecar)")
    p.add_argument("--uncalibrated", action="store_true", help="input has no light directions (UPS-FCN models)")
    p.add_argument("--fusion", choices=sorted(FUSION_FLAGS), help="expected fusion of the checkpoint")


def build_parser():
    parser = _Parser(prog="psfcn", description="Learned and classical photometric stereo on synthetic data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--kind", choices=("sphere", "blobby"), default="blobby")
    p.add_argument("--samples", type=int, help="number of sample directories (shapes when --brdf-grid is set)")
    p.add_argument("--brdf-grid", type=int, help="render every shape with all grid materials (must be 100)")
    p.add_argument("--brdfs-per-shape", type=int, help="random materials per shape")
    p.add_argument("--q", "--lights", dest="q", type=int, default=32, help="images (lights) per sample")
    p.add_argument("--span", type=float, default=180.0, help="azimuth and elevation span in degrees")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--shared-lights", action="store_true", help="use one light set for every sample")
    p.add_argument("--noise", action="store_true", help="add uniform [-0.05, 0.05] image noise")

    p = sub.add_parser("train", help="train a network on a native dataset")
    _common(p)
    p.add_argument("--data", help=f"dataset root (default ${DATA_ROOT_ENV})")
    p.add_argument("--limit", type=int, help="use only the first N samples")
    p.add_argument("--q", type=int, default=8, help="image-light pairs per training sample")
    p.add_argument("--fusion", choices=sorted(FUSION_FLAGS), default="max")
    p.add_argument("--uncalibrated", action="store_true", help="train the 3-channel UPS-FCN variant")
    p.add_argument("--width-scale", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-period", type=int, default=5, help="halve the learning rate every N epochs")
    p.add_argument("--noise-amp", type=float, default=0.05, help="augmentation noise amplitude")

    p = sub.add_parser("predict", help="predict the normal map of one sample")
    _common(p)
    _model_flags(p)
    p.add_argument("--data", help="sample directory (native or DiLiGenT layout)")
    p.add_argument("--q", type=int, help="use a random subset of q images")
    p.add_argument("--no-error-map", action="store_true")

    for name, helptext in (("eval", "random-trial evaluation"), ("sweep", "per-material sphere sweep")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _model_flags(p)
        p.add_argument("--solver", choices=("net", "l2"), default="net")
        p.add_argument("--data", help="dataset root")
        if name == "eval":
            p.add_argument("--q-test", type=int, help="images per object (default: all)")
            p.add_argument("--trials", type=int, default=1)
            p.add_argument("--limit", type=int)
            p.add_argument("--lit-only", action="store_true", help="score only pixels every light illuminates")
        else:
            p.add_argument("--q", "--lights", dest="q", type=int, help="lights when rendering in memory (default 100)")
            p.add_argument("--span", type=float, default=180.0)
            p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("recon", help="integrate a normal map into depth")
    _common(p)
    p.add_argument("--normals", help="16-bit normal PNG")

    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="new output directory")
    return parser


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

def _manifest(args, argv, outputs):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "verbose")}
    return {
        "subcommand": args.command,
        "argv": [a for a in argv],
        "config": config,
        "seeds": {"seed": args.seed},
        "versions": {
            "package": __version__,
            "checkpoint_format": CHECKPOINT_VERSION,
            "dataset_format": DATASET_VERSION,
            "kernel_backend": kernels.BACKEND,
        },
        "outputs": outputs,
    }


def _replace_out(argv, out):
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out":
            argv[i + 1] = out
            return argv
        if a.startswith("--out="):
            argv[i] = f"--out={out}"
            return argv
    return argv + ["--out", out]


def run(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "replay":
        try:
            with open(args.manifest, encoding="utf-8") as fh:
                recorded = json.load(fh)["argv"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read run manifest {args.manifest}: {exc}") from exc
        return run(_replace_out(recorded, args.out))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    with limiter:
        outputs = COMMANDS[args.command](args)
    _write(os.path.join(args.out, MANIFEST_NAME), json.dumps(_manifest(args, argv, outputs), indent=2) + "\n")
    return 0


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return run(argv)
    except PSFCNError as exc:
        print(f"psfcn: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"psfcn: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
