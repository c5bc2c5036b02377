"""Command-line entry point: ``ctcascade {simulate,train,denoise,evaluate,gradcheck}``.

Every option may also come from a JSON config file (``--config``) whose
keys are the long option names with dashes replaced by underscores.
Precedence is: explicit flag, then config file, then preset, then the
built-in default. The resolved configuration is written to
``run_config.json`` in the output directory before any work starts.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import CascadeError

log = logging.getLogger("ctcascade")

DATA_ROOT_ENV = "CTCASCADE_DATA_ROOT"

# named profiles; the desk profile is sized to run on one core in minutes
PRESETS = {
    "desk": {
        "patients": 10, "train": 7, "slices": 40, "size": 64, "dose": 0.25,
        "depth": 3, "features": 32, "iters": 2000, "minibatch": 16, "lr": 1e-3,
        "patches_per_slice": 50, "patch_size": 32, "cascades": 2,
    },
    "full": {
        "patients": 10, "train": 7, "slices": 400, "size": 512, "dose": 0.25,
        "depth": 5, "features": 64, "iters": 90_000, "minibatch": 100, "lr": 1e-4,
        "patches_per_slice": 150, "patch_size": 40, "cascades": 4,
    },
}

DEFAULTS = {
    "threads": 1,
    "seed": 0,
    "preset": "desk",
    "photons": 1e5,
    "angles": None,
    "model": "dncnn",
    "policy": "latest",
    "weight_penalty": 1e-4,
    "log_every": 100,
    "split": "test",
    "alpha": 0.7,
    "blend": None,
    "emit_intermediates": False,
    "audit_patches": False,
    "export_images": False,
    "seeds": 20,
    "tol": 1e-4,
    "corrupt": None,
    "checks": None,
}


class UsageError(CascadeError):
    pass


def _default_data_root():
    return os.environ.get(DATA_ROOT_ENV, "data")


# --------------------------------------------------------------------------
# parser

def _common(p):
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread count (default 1)")
    p.add_argument("--log-level", default="INFO", help="logging level")


def build_parser():
    parser = argparse.ArgumentParser(prog="ctcascade", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic normal/low-dose dataset")
    _common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--patients", type=int)
    p.add_argument("--train", type=int, help="patients in the training split")
    p.add_argument("--slices", type=int, help="slices per patient")
    p.add_argument("--size", type=int, help="slice extent in pixels")
    p.add_argument("--dose", type=float, help="low-dose fraction of the normal photon count")
    p.add_argument("--photons", type=float, help="incident photons per ray at normal dose")
    p.add_argument("--angles", type=int, help="projection angles (default 1.5 x size)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="dataset directory (default $%s or ./data)" % DATA_ROOT_ENV)

    p = sub.add_parser("train", help="train a cascade chain")
    _common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--model", choices=["dncnn", "mlp"])
    p.add_argument("--cascades", type=int)
    p.add_argument("--depth", type=int, help="middle conv/BN/ReLU modules")
    p.add_argument("--features", type=int, help="feature channels per conv")
    p.add_argument("--iters", type=int, help="iterations per cascade")
    p.add_argument("--minibatch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-penalty", type=float)
    p.add_argument("--patches-per-slice", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--policy", choices=["latest", "all"], help="channel stacking policy")
    p.add_argument("--log-every", type=int)
    p.add_argument("--audit-patches", action="store_true", default=None,
                   help="log every sampled patch position to CSV")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory")

    p = sub.add_parser("denoise", help="denoise slices with a trained chain")
    _common(p)
    p.add_argument("--chain", help="chain checkpoint directory")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", choices=["train", "test", "all"])
    p.add_argument("--input", nargs="*", help=".ten slice files (HU) instead of a dataset")
    p.add_argument("--emit-intermediates", action="store_true", default=None)
    p.add_argument("--blend", type=float, help="also write alpha*denoised + (1-alpha)*low")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("evaluate", help="per-cascade PSNR/SSIM report")
    _common(p)
    p.add_argument("--chain", help="chain checkpoint directory")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", choices=["train", "test", "all"])
    p.add_argument("--alpha", type=float, help="blend fraction of the denoised image")
    p.add_argument("--export-images", action="store_true", default=None)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer primitive")
    _common(p)
    p.add_argument("--seeds", type=int, help="number of random seeds per primitive")
    p.add_argument("--tol", type=float, help="relative error tolerance")
    p.add_argument("--corrupt", help="perturb one primitive's gradient (negative control)")
    p.add_argument("--checks", nargs="*", help="subset of primitives to run")
    p.add_argument("--out", help="optional output directory for the report")
    return parser


def resolve_config(args):
    """Merge flags over the config file over the preset over defaults."""
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "log_level")}
    file_values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a JSON object")
        file_values = {k.replace("-", "_"): v for k, v in file_values.items()}
    cfg = dict(DEFAULTS)
    preset = flags.get("preset", file_values.get("preset", DEFAULTS["preset"]))
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    cfg.update(PRESETS[preset])
    cfg.update(file_values)
    cfg.update(flags)
    cfg["preset"] = preset
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def write_run_config(cfg, out_dir):
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
            json.dump(cfg, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise UsageError(f"output directory {out_dir} is not writable: {exc}") from exc


# --------------------------------------------------------------------------
# commands

def cmd_simulate(cfg):
    from .ctsim import generate_dataset
    from .data import save_dataset

    out = cfg.get("out") or _default_data_root()
    cfg["out"] = out
    write_run_config(cfg, out)
    ds = generate_dataset(
        cfg["patients"], cfg["slices"], cfg["size"], cfg["dose"], cfg["seed"],
        n_train=cfg["train"], incident_photons=cfg["photons"], n_angles=cfg["angles"],
    )
    save_dataset(ds, out)
    n_tr = len(ds.split("train"))
    print(f"wrote {len(ds.slices())} slice pairs ({n_tr} train / {len(ds.patients) - n_tr} test patients) to {out}")
    return 0


def cmd_train(cfg):
    from .cascade import save_chain, train_cascade, write_records
    from .data import PatchConfig, load_dataset
    from .models import NetworkSpec
    from .optim import TrainConfig, write_trace_csv

    _require(cfg, "out")
    cfg["data"] = cfg.get("data") or _default_data_root()
    out = cfg["out"]
    write_run_config(cfg, out)
    ds = load_dataset(cfg["data"])
    if cfg["model"] == "mlp":
        spec = NetworkSpec("mlp")
        patches = PatchConfig(per_slice=cfg["patches_per_slice"], size=spec.patch)
    else:
        spec = NetworkSpec("dncnn", depth_modules=cfg["depth"], feature_channels=cfg["features"])
        patches = PatchConfig(per_slice=cfg["patches_per_slice"], size=cfg["patch_size"])
    config = TrainConfig(
        learning_rate=cfg["lr"], weight_penalty=cfg["weight_penalty"], minibatch=cfg["minibatch"],
        total_iterations=cfg["iters"], seed=cfg["seed"], log_every=cfg["log_every"],
    )

    def checkpoint(k, chain, record):
        # checkpoint after every cascade so an interrupted run keeps its prefix
        save_chain(chain, out)
        write_trace_csv(record.trace, os.path.join(out, f"loss_cascade_{k:02d}.csv"))
        log.info("cascade %d done in %.1f s, final loss %.6g", k, record.wall_seconds, record.trace[-1][1])

    chain, records = train_cascade(ds, cfg["cascades"], spec, config, patches=patches,
                                   policy=cfg["policy"], on_cascade=checkpoint,
                                   audit_dir=out if cfg["audit_patches"] else None)
    # wall-clock times live apart from the byte-reproducible artifacts
    write_records(records, os.path.join(out, "train_records.json"))
    print(f"trained {len(chain)} cascade(s) into {out}")
    return 0


def _select_slices(ds, split):
    return ds.slices(None if split == "all" else split)


def cmd_denoise(cfg):
    from .cascade import denoise_chain, load_chain
    from .data import load_dataset
    from .metrics import blend
    from .tensor import load_ten, save_ten

    _require(cfg, "chain", "out")
    out = cfg["out"]
    write_run_config(cfg, out)
    chain = load_chain(cfg["chain"])
    if cfg.get("input"):
        items = [(os.path.splitext(os.path.basename(p))[0], load_ten(p)) for p in cfg["input"]]
    else:
        ds = load_dataset(cfg.get("data") or _default_data_root())
        items = [(f"{s.patient_id}_s{s.index:03d}", s.low) for s in _select_slices(ds, cfg["split"])]
    if not items:
        raise UsageError("no slices to denoise")
    for stem, low in items:
        low = np.asarray(low, dtype=np.float32)
        if low.ndim != 2:
            raise UsageError(f"{stem}: expected a 2-D slice, got shape {low.shape}")
        final, steps = denoise_chain(chain, low)
        save_ten(os.path.join(out, f"{stem}_denoised.ten"), final)
        if cfg["emit_intermediates"]:
            for k, img in enumerate(steps, start=1):
                save_ten(os.path.join(out, f"{stem}_cascade{k:02d}.ten"), img)
        if cfg["blend"] is not None:
            save_ten(os.path.join(out, f"{stem}_blend.ten"),
                     blend(final, low, cfg["blend"]).astype(np.float32))
    print(f"denoised {len(items)} slice(s) into {out}")
    return 0


def cmd_evaluate(cfg):
    from .cascade import load_chain
    from .data import load_dataset
    from .metrics import evaluate_chain, write_report_csv

    _require(cfg, "chain", "out")
    out = cfg["out"]
    cfg["data"] = cfg.get("data") or _default_data_root()
    write_run_config(cfg, out)
    chain = load_chain(cfg["chain"])
    ds = load_dataset(cfg["data"])
    export = os.path.join(out, "images") if cfg["export_images"] else None
    split = None if cfg["split"] == "all" else cfg["split"]
    original, blended, (base_psnr, base_ssim) = evaluate_chain(chain, ds, cfg["alpha"], split, export)
    write_report_csv([original, blended], os.path.join(out, "report.csv"))
    print(f"low-dose input: PSNR {base_psnr:.3f} dB, SSIM {base_ssim:.4f}")
    for report in (original, blended):
        for row in report.rows:
            print(f"{report.variant:>8} cascade {row.cascade}: PSNR {row.psnr_db:.3f} dB, SSIM {row.ssim:.4f}")
    return 0


def cmd_gradcheck(cfg):
    from .gradcheck import CHECKS, run_suite

    if cfg.get("corrupt") and cfg["corrupt"] not in CHECKS:
        raise UsageError(f"--corrupt must be one of {sorted(CHECKS)}")
    if cfg.get("out"):
        write_run_config(cfg, cfg["out"])
    checks = cfg.get("checks") or list(CHECKS)
    unknown = sorted(set(checks) - set(CHECKS))
    if unknown:
        raise UsageError(f"unknown checks: {unknown}")
    results = [r for r in run_suite(range(cfg["seeds"]), cfg["tol"], cfg.get("corrupt")) if r.name in checks]
    lines = ["primitive,passed,max_rel_error,n_checked,n_excluded"]
    for r in results:
        lines.append(f"{r.name},{int(r.passed)},{r.max_rel_error:.3e},{r.n_checked},{r.n_excluded}")
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<7} max rel err {r.max_rel_error:.3e} "
              f"({r.n_checked} checked, {r.n_excluded} excluded){'  ' + r.message if r.message else ''}")
    if cfg.get("out"):
        with open(os.path.join(cfg["out"], "gradcheck.csv"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg["command"] = args.command
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[args.command](cfg)
    except (CascadeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
