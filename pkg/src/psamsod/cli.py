"""``psamsod`` command line: generate, train, eval, infer, gradcheck, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff import OP_REGISTRY
from .dataio import (
    DataError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    read_netpbm,
    stack_batch,
    write_saliency_pgm,
)
from .gradcheck_suite import run_suite
from .metrics import EvalPair, MetricsReport, evaluate
from .model import (
    CheckpointError,
    ModelConfig,
    VARIANTS,
    build_model,
    load_checkpoint,
    normalize_variant,
    predict,
    save_checkpoint,
)
from .nn import resize_bilinear
from .trainer import PROFILES, NonFiniteError, TrainConfig, train, with_overrides, write_log

logger = logging.getLogger("psamsod")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_FORMAT = "psamsod-manifest/1"
VARIANT_CHOICES = ("baseline", "baseline-sa", "full")
LOG_NAME = "train_log.csv"

# DUTS-TE max-F / MAE of the three ablation rows, reported for context only
REFERENCE_ROWS = {"baseline": (0.856, 0.045), "baseline-sa": (0.876, 0.041), "full": (0.879, 0.040)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- manifest -----------------------------------------------------------------------

def file_hash(path: Path) -> str:
    """sha256 of a file; training logs are hashed without their wall_ms column."""
    h = hashlib.sha256()
    if path.name == LOG_NAME:
        for line in path.read_text().splitlines():
            h.update((line.rsplit(",", 1)[0] + "\n").encode())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(path: Path, command: str, config: dict, seed, artifacts: list[Path], started: float) -> Path:
    root = path.parent
    entries = {}
    for a in sorted(set(artifacts)):
        a = Path(a)
        try:
            key = str(a.resolve().relative_to(root.resolve()))
        except ValueError:
            key = str(a)
        entries[key] = file_hash(a)
    combined = hashlib.sha256("".join(f"{k} {v}\n" for k, v in sorted(entries.items())).encode()).hexdigest()
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "artifacts": entries,
        "output_hash": combined,
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- shared helpers -------------------------------------------------------------------

def _dataset(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    data = load_dataset(root / "images", root / "masks")
    if not data:
        raise DataError(f"no images found under {root / 'images'}")
    return data


def _model_config(args) -> ModelConfig:
    size = (args.size, args.size)
    return ModelConfig(input_size=size, backbone_channels=tuple(args.backbone_channels),
                       fpn_channels=args.fpn_channels, psam_scales=tuple(args.psam_scales),
                       window_k=args.window_k, se_reduction=args.se_reduction,
                       variant=normalize_variant(args.variant))


def _train_config(args) -> TrainConfig:
    base = PROFILES[args.profile]()
    kw = dict(epochs=args.epochs, lr_phase1=args.lr_phase1, lr_phase2=args.lr_phase2,
              phase1_epochs=args.phase1_epochs, weight_decay=args.weight_decay,
              batch_size=args.batch_size, seed=args.seed)
    if args.epochs is not None and args.phase1_epochs is None:
        kw["phase1_epochs"] = min(base.phase1_epochs, args.epochs)
    if args.no_flip:
        kw["flip"] = False
    return with_overrides(base, **kw)


def _predict_set(model, data) -> np.ndarray:
    size = model.config.input_size
    for s in data:
        if s.image.shape[1:] != size:
            raise DataError(f"sample {s.id} is {s.image.shape[1:]}, checkpoint expects {size}")
    preds = []
    for start in range(0, len(data), 16):
        images, _ = stack_batch(data[start:start + 16])
        preds.append(predict(model, images).data[:, 0])
    return np.concatenate(preds)


def _evaluate_arrays(preds, data, n_thresholds: int, average: str) -> MetricsReport:
    return evaluate([EvalPair(p, s.mask[0]) for p, s in zip(preds, data)], n_thresholds=n_thresholds, average=average)


# -- commands -------------------------------------------------------------------------

def cmd_generate(args) -> int:
    started = time.time()
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.shapes_min < 1 or args.shapes_max < args.shapes_min:
        raise UsageError("--shapes-min/--shapes-max must satisfy 1 <= min <= max")
    try:
        spec = SyntheticSpec(n_samples=args.n, size=(args.size, args.size),
                             shapes_per_image=(args.shapes_min, args.shapes_max),
                             noise_amplitude=args.noise, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = generate_synthetic(spec, args.out)
    data = load_dataset(out / "images", out / "masks")
    cov = np.array([s.mask.mean() for s in data])
    print(f"generated {len(data)} samples at {args.size}x{args.size} in {out}")
    print(f"coverage mean {cov.mean():.4f} min {cov.min():.4f} max {cov.max():.4f}")
    files = sorted((out / "images").glob("*.ppm")) + sorted((out / "masks").glob("*.pgm"))
    write_manifest(out / "manifest.json", "generate", spec.__dict__ | {"size": list(spec.size)}, args.seed,
                   files, started)
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    data = _dataset(args.data)
    mcfg = _model_config(args)
    tcfg = _train_config(args)
    out = Path(args.out)
    model = build_model(mcfg, args.seed)
    logger.info("training %s (%d parameters) for %d epochs on %d samples", mcfg.variant,
                model.n_parameters(), tcfg.epochs, len(data))
    res = train(model, data, tcfg, out_dir=out)
    log = write_log(res.log, out / LOG_NAME)
    print(f"trained {mcfg.variant} for {tcfg.epochs} epochs; final loss {res.log[-1].loss:.5f}")
    write_manifest(out / "manifest.json", "train", {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
                   args.seed, res.checkpoints + [log], started)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    data = _dataset(args.data)
    out = Path(args.out)
    config = {"n_thresholds": args.thresholds, "average": args.average}
    if args.predictions:
        preds = []
        for s in data:
            f = Path(args.predictions) / f"{s.id}.pgm"
            if not f.exists():
                raise DataError(f"no prediction for {s.id} (expected {f})")
            p = read_netpbm(f)
            if p.ndim != 2 or p.shape != s.mask.shape[1:]:
                raise DataError(f"prediction {f} has shape {p.shape}, mask is {s.mask.shape[1:]}")
            preds.append(p / 255.0)
        preds = np.stack(preds)
        config["predictions"] = str(args.predictions)
    else:
        model = load_checkpoint(args.checkpoint)
        preds = _predict_set(model, data)
        config["checkpoint"] = str(args.checkpoint)
        config["model"] = model.config.to_dict()
    rep = _evaluate_arrays(preds, data, args.thresholds, args.average)
    artifacts = list(rep.write(out))
    if args.dump_predictions:
        dump = out / "predictions.npz"
        np.savez(dump, ids=np.array([s.id for s in data]), predictions=preds)
        artifacts.append(dump)
    print(rep.summary_line())
    write_manifest(out / "manifest.json", "eval", config, None, artifacts, started)
    return EXIT_OK


def cmd_infer(args) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    h, w = model.config.input_size
    written = []
    for name in args.images:
        path = Path(name)
        if not path.exists():
            raise DataError(f"image not found: {path}")
        img = read_netpbm(path)
        if img.ndim != 3:
            raise DataError(f"{path}: expected a colour P6 image")
        x = img.transpose(2, 0, 1) / 255.0
        ih, iw = x.shape[1:]
        if (ih, iw) != (h, w):
            x = np.clip(resize_bilinear(x, h, w), 0.0, 1.0)
        prob = predict(model, x[None]).data[0, 0]
        if (ih, iw) != (h, w):
            prob = np.clip(resize_bilinear(prob[None], ih, iw)[0], 0.0, 1.0)
        target_dir = Path(args.out) if args.out else path.parent
        written.append(write_saliency_pgm(target_dir / f"{path.stem}_saliency.pgm", prob))
        print(written[-1])
    manifest_dir = Path(args.out) if args.out else written[0].parent
    write_manifest(manifest_dir / "infer_manifest.json", "infer", {"checkpoint": str(args.checkpoint)}, None,
                   written, started)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.time()
    results = run_suite(args.seed)
    covered = {r.component[3:] for r in results if r.component.startswith("op:")}
    lines = [f"{'component':<28} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.component:<28} {r.max_error:12.3e} {r.tolerance:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    missing = sorted(set(OP_REGISTRY) - covered)
    ok = all(r.passed for r in results) and not missing
    lines.append(f"{len(covered)} registered ops checked; overall {'PASS' if ok else 'FAIL'}")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep_path = out / "gradcheck_report.txt"
    rep_path.write_text(report)
    write_manifest(out / "gradcheck_manifest.json", "gradcheck", {"seed": args.seed}, args.seed, [rep_path], started)
    return EXIT_OK if ok else EXIT_NUMERIC


def ablation_seeds(seed: int) -> tuple[int, int]:
    """Train / test data seeds derived from the run seed."""
    return 2 * seed + 1, 2 * seed + 2


def run_ablation(out: Path, seed: int, tcfg: TrainConfig, n_train: int = 200, n_test: int = 50,
                 size: int = 64, mcfg_kw: dict | None = None) -> tuple[dict, list[Path]]:
    """Train and evaluate every variant with identical data, seed and budget."""
    train_seed, test_seed = ablation_seeds(seed)
    generate_synthetic(SyntheticSpec(n_samples=n_train, size=(size, size), seed=train_seed), out / "data" / "train")
    generate_synthetic(SyntheticSpec(n_samples=n_test, size=(size, size), seed=test_seed), out / "data" / "test")
    train_set = load_dataset(out / "data" / "train" / "images", out / "data" / "train" / "masks")
    test_set = load_dataset(out / "data" / "test" / "images", out / "data" / "test" / "masks")
    rows, artifacts = {}, []
    for variant in VARIANTS:
        label = variant.replace("_", "-")
        vdir = out / label
        mcfg = ModelConfig(input_size=(size, size), variant=variant, **(mcfg_kw or {}))
        model = build_model(mcfg, seed)
        t0 = time.time()
        res = train(model, train_set, tcfg)
        artifacts.append(save_checkpoint(model, vdir / "final.ckpt"))
        artifacts.append(write_log(res.log, vdir / LOG_NAME))
        rep = _evaluate_arrays(_predict_set(model, test_set), test_set, 256, "micro")
        artifacts.extend(rep.write(vdir))
        rows[label] = rep
        logger.info("%s: max_f %.4f (%.1fs)", label, rep.max_f, time.time() - t0)
    return rows, artifacts


def format_table(rows: dict) -> str:
    lines = [f"{'variant':<12} {'max_f':>8} {'mean_f':>8} {'mae':>8}"]
    for label, rep in rows.items():
        lines.append(f"{label:<12} {rep.max_f:8.4f} {rep.mean_f:8.4f} {rep.mae:8.4f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    started = time.time()
    if args.n_train < 1 or args.n_test < 1:
        raise UsageError("--n-train and --n-test must be positive")
    out = Path(args.out)
    tcfg = _train_config(args)
    rows, artifacts = run_ablation(out, args.seed, tcfg, args.n_train, args.n_test, args.size)
    table = format_table(rows)
    delta = rows["full"].max_f - rows["baseline"].max_f
    text = table + f"\nfull - baseline max_f: {delta:+.4f}\n"
    print(text, end="")
    table_path = out / "ablation.txt"
    table_path.write_text(text)
    csv_path = out / "ablation.csv"
    csv_path.write_text("variant,max_f,mean_f,mae\n" + "".join(
        f"{k},{r.max_f!r},{r.mean_f!r},{r.mae!r}\n" for k, r in rows.items()))
    train_seed, test_seed = ablation_seeds(args.seed)
    config = {"train": tcfg.to_dict(), "n_train": args.n_train, "n_test": args.n_test, "size": args.size,
              "data_seeds": [train_seed, test_seed], "reference_duts_te": REFERENCE_ROWS}
    write_manifest(out / "manifest.json", "ablate", config, args.seed, artifacts + [table_path, csv_path], started)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _add_train_flags(p, default_profile: str):
    paper = TrainConfig()
    p.add_argument("--profile", choices=sorted(PROFILES), default=default_profile,
                   help=f"hyperparameter profile (default {default_profile}); flags below override it")
    p.add_argument("--epochs", type=int, help=f"paper default {paper.epochs}")
    p.add_argument("--lr-phase1", type=float, help=f"paper default {paper.lr_phase1}")
    p.add_argument("--lr-phase2", type=float, help=f"paper default {paper.lr_phase2}")
    p.add_argument("--phase1-epochs", type=int, help=f"paper default {paper.phase1_epochs}")
    p.add_argument("--weight-decay", type=float, help=f"paper default {paper.weight_decay}")
    p.add_argument("--batch-size", type=int, help=f"default {paper.batch_size}")
    p.add_argument("--no-flip", action="store_true", help="disable horizontal-flip augmentation")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    defaults = ModelConfig()
    parser = _Parser(prog="psamsod", description="Pyramid self-attention salient object detection.")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 guarantees bit-reproducibility")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--shapes-min", type=int, default=1)
    g.add_argument("--shapes-max", type=int, default=2)
    g.add_argument("--noise", type=float, default=SyntheticSpec.noise_amplitude)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--data", required=True, help="directory with images/ and masks/")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANT_CHOICES, default="full")
    t.add_argument("--size", type=int, default=defaults.input_size[0])
    t.add_argument("--backbone-channels", type=int, nargs=4, default=list(defaults.backbone_channels),
                   metavar=("C2", "C3", "C4", "C5"))
    t.add_argument("--fpn-channels", type=int, default=defaults.fpn_channels)
    t.add_argument("--psam-scales", type=int, nargs=3, default=list(defaults.psam_scales),
                   metavar=("S1", "S2", "S3"))
    t.add_argument("--window-k", type=int, default=defaults.window_k)
    t.add_argument("--se-reduction", type=int, default=defaults.se_reduction)
    _add_train_flags(t, "paper")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or stored predictions")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="directory of <id>.pgm saliency maps")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--thresholds", type=int, default=256)
    e.add_argument("--average", choices=("micro", "macro"), default="micro")
    e.add_argument("--dump-predictions", action="store_true", help="also save float predictions (npz)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write a saliency PGM per input image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", help="output directory (default: next to each input)")
    i.add_argument("images", nargs="+")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and module")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and compare the three variants on synthetic data")
    a.add_argument("--out", required=True)
    a.add_argument("--n-train", type=int, default=200)
    a.add_argument("--n-test", type=int, default=50)
    a.add_argument("--size", type=int, default=64)
    _add_train_flags(a, "desk")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and argument errors
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("psamsod: usage error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"psamsod: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"psamsod: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"psamsod: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation failures come from flag values
        print(f"psamsod: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
