"""Command-line interface: generate, train, reconstruct, eval, sweep-lambda, diffmap."""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dataset import MANIFEST, PROTOCOLS, build_dataset, load_split, read_manifest
from .degrade import NoiseParams
from .fbp import fbp_forward, make_fbp_layer
from .geometry import make_geometry
from .metrics import MetricReport, psnr, ssim
from .network import DualDomainNet
from .nn.io import atomic_write_text, load_arrays, save_arrays
from .phantoms import PhantomSpec, generate_phantoms, load_grayscale
from .train import TrainConfig, train

log = logging.getLogger("fbpnet")

THREADS_ENV = "FBPNET_THREADS"


class CliError(Exception):
    pass


def _thread_limit(n: int | None):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _int_pair(text: str) -> tuple[int, int]:
    parts = [int(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected W or W1,W2 with positive ints, got {text!r}")
    return parts[0], parts[1]


def _float_list(text: str) -> list[float]:
    return [float(p) for p in str(text).split(",") if p]


def _int_list(text: str) -> list[int]:
    return [int(p) for p in str(text).split(",") if p]


# generate --------------------------------------------------------------------
def _generate_config(args) -> dict:
    return {
        "kind": args.kind, "size": args.size, "train_count": args.train_count,
        "test_count": args.test_count, "seed": args.seed, "protocol": args.protocol,
        "angles": args.angles, "stride": args.stride, "noise_b": args.noise_b,
        "noise_var": args.noise_var, "poisson": args.poisson,
        "train_images": str(args.train_images) if args.train_images else None,
        "test_images": str(args.test_images) if args.test_images else None,
    }


def _images_from_dir(folder: Path, size: int) -> list[np.ndarray]:
    files = sorted(p for p in folder.iterdir() if p.is_file())
    if not files:
        raise CliError(f"no image files in {folder}")
    return [load_grayscale(p, size) for p in files]


def cmd_generate(args) -> int:
    out = Path(args.out)
    cfg = _generate_config(args)
    if args.protocol not in PROTOCOLS:
        raise CliError(f"unknown protocol {args.protocol!r}")
    if args.protocol != "direct-180" and args.angles % args.stride:
        raise CliError(f"--stride {args.stride} does not divide --angles {args.angles}")
    noise = NoiseParams(b=args.noise_b, var=args.noise_var, seed=args.seed)
    for folder in (args.train_images, args.test_images):
        if folder is not None and not Path(folder).is_dir():
            raise CliError(f"image folder {folder} does not exist")

    manifest_path = out / MANIFEST
    if manifest_path.exists():
        existing = json.loads(manifest_path.read_text())
        if existing.get("config") == cfg:
            print(f"dataset at {out} is up to date")
            return 0
        if not args.force:
            raise CliError(f"{manifest_path} exists with a different configuration (use --force)")
        manifest_path.unlink()

    # train and test phantoms come from disjoint seed families
    def phantoms(split_id: int, count: int, folder):
        if folder is not None:
            return _images_from_dir(Path(folder), args.size)
        spec = PhantomSpec(kind=args.kind, count=count, size=args.size, seed=args.seed * 2 + split_id)
        return generate_phantoms(spec)

    sets = {"train": phantoms(0, args.train_count, args.train_images),
            "test": phantoms(1, args.test_count, args.test_images)}
    manifest = build_dataset(sets, args.protocol, noise, out, num_angles=args.angles,
                             stride=args.stride, poisson=args.poisson, extra=cfg)
    print(f"wrote {manifest['sample_count']} samples to {out}")
    return 0


# train -----------------------------------------------------------------------
def _train_config(args) -> TrainConfig:
    w1, w2 = args.width
    cfg = TrainConfig(lam=args.lam, lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      width1=w1, width2=w2, seed=args.seed, val_fraction=args.val_fraction,
                      pad_factor=args.pad_factor, deterministic=args.deterministic)
    cfg.validate()
    return cfg


def _check_protocol(manifest: dict, protocol: str | None) -> None:
    if protocol is not None and manifest["protocol"] != protocol:
        raise CliError(f"dataset protocol is {manifest['protocol']!r}, --protocol asked for {protocol!r}")


def cmd_train(args) -> int:
    cfg = _train_config(args)
    manifest = read_manifest(args.dataset)
    _check_protocol(manifest, args.protocol)
    data, _ = load_split(args.dataset, "train")
    with _thread_limit(1 if args.deterministic else args.threads):
        result = train(data, cfg, run_dir=args.run_dir)
    last = result.history[-1]
    print(f"trained {cfg.epochs} epochs; best epoch {result.best_epoch}; "
          f"last val psnr {last['val_psnr_image']:.2f} dB -> {Path(args.run_dir) / 'best.fbpn'}")
    return 0


# reconstruct -----------------------------------------------------------------
def cmd_reconstruct(args) -> int:
    if (args.checkpoint is None) == (args.baseline is None):
        raise CliError("give exactly one of --checkpoint or --baseline fbp")
    if args.checkpoint is not None and not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint {args.checkpoint} not found")
    data, names = load_split(args.dataset, args.split)
    out = Path(args.out)
    with _thread_limit(args.threads):
        if args.baseline == "fbp":
            geom = make_geometry(data.x.shape[1], data.x.shape[2])
            images = fbp_forward(make_fbp_layer(geom, args.pad_factor), data.x)
            sinos = None
        else:
            net = DualDomainNet.load(args.checkpoint)
            sinos, images = net.predict(data.x)
    for i, name in enumerate(names):
        arrays = {"image": images[i]}
        if sinos is not None:
            arrays["sinogram"] = sinos[i]
        save_arrays(out / f"{name}.fbpa", arrays)
    print(f"wrote {len(names)} reconstructions to {out}")
    return 0


# eval ------------------------------------------------------------------------
def _load_folder(folder: Path) -> dict[str, dict[str, np.ndarray]]:
    """Map sample name -> arrays, for a reconstruction folder or a dataset split."""
    files = sorted(folder.glob("*.fbpa"))
    if not files:
        raise CliError(f"no .fbpa files in {folder}")
    out = {}
    for p in files:
        a = load_arrays(p)
        entry = {}
        if "image" in a or "u" in a:
            entry["image"] = a.get("image", a.get("u"))
        if "sinogram" in a or "y" in a:
            entry["sinogram"] = a.get("sinogram", a.get("y"))
        out[p.stem] = entry
    return out


def _resolve_ref(ref: Path, split: str) -> Path:
    if (ref / MANIFEST).exists():
        return ref / split
    return ref


def cmd_eval(args) -> int:
    pred_dir, ref_dir = Path(args.pred), _resolve_ref(Path(args.ref), args.split)
    for d in (pred_dir, ref_dir):
        if not d.is_dir():
            raise CliError(f"folder {d} does not exist")
    pred, ref = _load_folder(pred_dir), _load_folder(ref_dir)
    missing = sorted(set(pred) - set(ref))
    if missing:
        raise CliError(f"{len(missing)} predictions have no reference, e.g. {missing[0]}")
    images = MetricReport()
    sinos = MetricReport()
    sino_peak = None
    for name in sorted(pred):
        images.add(name, pred[name]["image"], ref[name]["image"])
        if "sinogram" in pred[name] and "sinogram" in ref[name]:
            if sino_peak is None:
                sino_peak = max(float(r["sinogram"].max()) for r in ref.values() if "sinogram" in r)
            c = 255.0 / sino_peak
            sinos.add(name, pred[name]["sinogram"] * c, ref[name]["sinogram"] * c, masked=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["name", "psnr", "ssim"] + (["sino_psnr", "sino_ssim"] if sinos.names else [])
        w.writerow(header)
        for i, name in enumerate(images.names):
            row = [name, images.psnr[i], images.ssim[i]]
            if sinos.names:
                row += [sinos.psnr[i], sinos.ssim[i]]
            w.writerow(row)
    summary = {"method": args.method or pred_dir.name, "image": images.summary()}
    if sinos.names:
        summary["sinogram"] = sinos.summary()
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    s = images.summary()
    print(f"{s['count']} images: psnr {s['psnr_mean']:.2f} dB, ssim {s['ssim_mean']:.4f}")
    return 0


# sweep-lambda ----------------------------------------------------------------
SWEEP_COLUMNS = ("lambda", "sino_psnr", "sino_ssim", "ct_psnr", "ct_ssim")


def sweep_lambda(dataset: Path, run_dir: Path, lambdas, seeds, base: TrainConfig) -> list[dict]:
    train_set, _ = load_split(dataset, "train")
    test_set, _ = load_split(dataset, "test")
    sino_scale = float(train_set.y.max())
    rows = []
    for lam in lambdas:
        for seed in seeds:
            cfg = TrainConfig(**{**base.__dict__, "lam": lam, "seed": seed})
            result = train(train_set, cfg, run_dir=run_dir / f"lambda{lam:g}_seed{seed}", sino_scale=sino_scale)
            s1, ct = result.net.predict(test_set.x)
            c = 255.0 / sino_scale
            n = len(test_set)
            rows.append({
                "lambda": lam, "seed": seed,
                "sino_psnr": float(np.mean([psnr(s1[i] * c, test_set.y[i] * c, masked=False) for i in range(n)])),
                "sino_ssim": float(np.mean([ssim(s1[i] * c, test_set.y[i] * c, masked=False) for i in range(n)])),
                "ct_psnr": float(np.mean([psnr(ct[i], test_set.u[i]) for i in range(n)])),
                "ct_ssim": float(np.mean([ssim(ct[i], test_set.u[i]) for i in range(n)])),
            })
            log.info("lambda %g seed %d: %s", lam, seed, rows[-1])
    return rows


def write_sweep(rows: list[dict], run_dir: Path) -> None:
    with open(run_dir / "sweep_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("lambda", "seed") + SWEEP_COLUMNS[1:])
        w.writeheader()
        w.writerows(rows)
    with open(run_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for lam in dict.fromkeys(r["lambda"] for r in rows):
            sel = [r for r in rows if r["lambda"] == lam]
            w.writerow([lam] + [float(np.mean([r[k] for r in sel])) for k in SWEEP_COLUMNS[1:]])


def cmd_sweep(args) -> int:
    base = _train_config(args)
    lambdas = args.lambdas
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise CliError(f"lambda {lam} outside [0, 1]")
    manifest = read_manifest(args.dataset)
    _check_protocol(manifest, args.protocol)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with _thread_limit(1 if args.deterministic else args.threads):
        rows = sweep_lambda(Path(args.dataset), run_dir, lambdas, args.seeds, base)
    write_sweep(rows, run_dir)
    print(f"wrote {run_dir / 'sweep.csv'}")
    return 0


# diffmap ---------------------------------------------------------------------
def cmd_diffmap(args) -> int:
    from PIL import Image

    pred_dir, ref_dir = Path(args.pred), _resolve_ref(Path(args.ref), args.split)
    pred, ref = _load_folder(pred_dir), _load_folder(ref_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(pred):
        if name not in ref:
            raise CliError(f"no reference for {name}")
        diff = np.abs(pred[name]["image"] - ref[name]["image"])
        scaled = np.clip(diff / args.vmax, 0.0, 1.0) * 255.0
        Image.fromarray(np.round(scaled).astype(np.uint8)).save(out / f"{name}.png")
    print(f"wrote {len(pred)} difference maps to {out}")
    return 0


# parser ----------------------------------------------------------------------
def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--width", type=_int_pair, default=(16, 24), help="W or W1,W2 channel widths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--pad-factor", type=int, default=2)
    p.add_argument("--protocol", choices=PROTOCOLS, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="single BLAS thread and no wall-clock column values")
    p.add_argument("--threads", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbpnet", description=__doc__)
    parser.add_argument("--config", help="JSON file of flag defaults (keys are flag names with underscores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="phantoms + (x, y, u) dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=("random-ellipses", "shepp-logan"), default="random-ellipses")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--train-count", type=int, default=200)
    g.add_argument("--test-count", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--protocol", choices=PROTOCOLS, default="direct-180")
    g.add_argument("--angles", type=int, default=180)
    g.add_argument("--stride", type=int, default=2)
    g.add_argument("--noise-b", type=float, default=1e7)
    g.add_argument("--noise-var", type=float, default=0.002)
    g.add_argument("--poisson", choices=("sample", "mean"), default="sample")
    g.add_argument("--train-images", default=None, help="folder of grayscale images instead of phantoms")
    g.add_argument("--test-images", default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the network on a dataset's train split")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="network or plain-FBP reconstructions of a split")
    r.add_argument("--dataset", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--out", required=True)
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--baseline", choices=("fbp",), default=None)
    r.add_argument("--pad-factor", type=int, default=2)
    r.add_argument("--threads", type=int, default=None)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="PSNR/SSIM report of predictions against references")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True, help="reconstruction folder or dataset root")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--method", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-lambda", help="train at several lambdas and tabulate metrics")
    _add_train_flags(s)
    s.add_argument("--lambdas", type=_float_list, default=[0.1, 0.5, 0.9])
    s.add_argument("--seeds", type=_int_list, default=[0])
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("diffmap", help="absolute-difference PNGs")
    d.add_argument("--pred", required=True)
    d.add_argument("--ref", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--out", required=True)
    d.add_argument("--vmax", type=float, default=50.0, help="difference mapped to white")
    d.set_defaults(func=cmd_diffmap)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    cfg = json.loads(Path(known.config).read_text())
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a JSON object")
    choices = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in choices), None)
    if command is None:
        return parser.parse_args(argv)
    sub = choices[command]
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(cfg) - set(actions))
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    for dest, value in cfg.items():
        action = actions[dest]
        if action.type is not None and isinstance(value, (str, int, float)) and not isinstance(value, bool):
            value = action.type(str(value)) if action.type in (_int_pair, _float_list, _int_list) else action.type(value)
        cfg[dest] = value
        # a config value satisfies a required flag; the command line still overrides it
        action.required = False
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CliError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"fbpnet: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
