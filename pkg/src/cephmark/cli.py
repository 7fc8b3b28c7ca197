"""Command-line entry point: ``cephmark <command> ...``.

Exit status is 0 on success, 1 for invalid input or configuration and 2 for
runtime or numerical failures.  Error lines go to stderr prefixed ``error:``.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import platform
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (LANDMARKS, AnnotationError, FoldError, LandmarkAnnotation,
                   jitter_annotations, load_image, make_folds, read_annotations, save_pgm,
                   synth_generate, write_annotations)
from .evaluation import (EvalError, PixelSpacing, build_table, check_printed_means,
                         comparison_table, emit_report, interobserver_table,
                         parse_report_csv)
from .gradcheck import check_model
from .nn import ConfigError, ModelConfig, atomic_write, build_model, load_weights, param_count
from .tensor import inject_fault
from .train import (LandmarkDataset, TrainConfig, TrainingError, fold_config,
                    landmark_errors, prepare_dataset, run_cross_validation)

PUBLISHED_PROTOCOL = {
    "epochs": 80, "lr": 0.001, "k": 5, "input_h": 512, "input_w": 432,
    "landmarks": len(LANDMARKS), "base_channels": 64, "depth": 4,
}


class UsageError(Exception):
    """Invalid input; exit status 1."""


# configuration --------------------------------------------------------------------

@dataclass
class RunConfig:
    images_dir: Path
    annotations: Path
    output_dir: Path
    train: TrainConfig
    landmarks: tuple[str, ...]
    spacing: PixelSpacing
    reference_annotator: str | None = None
    k: int = 5
    source: Path | None = None
    overrides: dict = field(default_factory=dict)

    def digest(self) -> str:
        blob = json.dumps({
            "train": self.train.digest(), "landmarks": self.landmarks, "k": self.k,
            "spacing": asdict(self.spacing), "reference_annotator": self.reference_annotator,
        }, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _get(cp, section, key, conv, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise UsageError(f"config: missing required field {section}.{key}")
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError:
        raise UsageError(f"config: field {section}.{key} has invalid value {raw!r}") from None


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _landmark_list(s: str) -> tuple[str, ...]:
    s = s.strip()
    if s.isdigit():
        n = int(s)
        if not 1 <= n <= len(LANDMARKS):
            raise ValueError(s)
        return LANDMARKS[:n]
    names = tuple(x.strip() for x in s.split(",") if x.strip())
    if not names or any(n not in LANDMARKS for n in names):
        raise ValueError(s)
    return names


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Read an INI run config; ``overrides`` are flat keys (``epochs``, ``arch``, ...)."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise UsageError(f"config: {exc}") from None
    ov = dict(overrides or {})
    root = path.parent

    def p(key, default=None, required=True):
        v = _get(cp, "paths", key, str, default, required)
        return None if v is None else (root / v).resolve()

    def pick(section, key, conv, default):
        if ov.get(key) is not None:
            return ov[key]
        return _get(cp, section, key, conv, default)

    landmarks = pick("model", "landmarks", _landmark_list, LANDMARKS)
    if isinstance(landmarks, int):
        landmarks = LANDMARKS[:landmarks]
    model = ModelConfig(
        arch=pick("model", "arch", str, "unet"),
        input_hw=(pick("model", "input_h", int, 64), pick("model", "input_w", int, 64)),
        in_channels=1,
        out_channels=len(landmarks),
        base_channels=pick("model", "base_channels", int, 8),
        depth=pick("model", "depth", int, 2),
        kernel_size=pick("model", "kernel_size", int, 3),
        seed=pick("model", "seed", int, 0),
        upsample=pick("model", "upsample", str, "nearest"),
    )
    train = TrainConfig(
        model=model,
        epochs=pick("train", "epochs", int, 80),
        batch_size=pick("train", "batch_size", int, 2),
        alpha=pick("train", "lr", float, 0.001),
        beta1=pick("train", "beta1", float, 0.9),
        beta2=pick("train", "beta2", float, 0.999),
        eps=pick("train", "eps", float, 1e-8),
        sigma=pick("train", "sigma", float, 5.0),
        tau=pick("train", "tau", float, 0.5),
        shuffle=pick("train", "shuffle", _bool, True),
        seed=pick("train", "seed", int, 0),
    )
    try:
        train.validate()
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from None
    sx = _get(cp, "eval", "cm_per_px_x", float, required=True)
    sy = _get(cp, "eval", "cm_per_px_y", float, required=True)
    try:
        spacing = PixelSpacing(sx, sy)
    except EvalError as exc:
        raise UsageError(f"config: eval.cm_per_px_x/y: {exc}") from None
    k = pick("folds", "k", int, 5)
    out_dir = Path(ov["output_dir"]).resolve() if ov.get("output_dir") else p("output_dir")
    cfg = RunConfig(
        images_dir=p("images_dir"), annotations=p("annotations"), output_dir=out_dir,
        train=train, landmarks=tuple(landmarks), spacing=spacing,
        reference_annotator=_get(cp, "eval", "reference_annotator", str, None),
        k=k, source=path, overrides=ov)
    for name, pth in (("paths.images_dir", cfg.images_dir), ("paths.annotations", cfg.annotations)):
        if not pth.exists():
            raise UsageError(f"config: {name} does not exist: {pth}")
    return cfg


def render_config(images_dir: str, annotations: str, output_dir: str, n_landmarks: int,
                  hw: tuple[int, int], epochs: int = 200, sigma: float = 3.0,
                  reference_annotator: str | None = None) -> str:
    lines = [
        "[paths]", f"images_dir = {images_dir}", f"annotations = {annotations}",
        f"output_dir = {output_dir}", "",
        "[model]", "arch = unet", f"input_h = {hw[0]}", f"input_w = {hw[1]}",
        "base_channels = 8", "depth = 2", "kernel_size = 3", "upsample = nearest", "seed = 0",
        f"landmarks = {n_landmarks}", "",
        "[train]", f"epochs = {epochs}", "batch_size = 1", "lr = 0.001", f"sigma = {sigma}",
        "seed = 0", "",
        "[eval]", "cm_per_px_x = 1.0", "cm_per_px_y = 1.0",
    ]
    if reference_annotator:
        lines.append(f"reference_annotator = {reference_annotator}")
    lines += ["", "[folds]", "k = 5", ""]
    return "\n".join(lines)


# dataset loading ---------------------------------------------------------------------

def _find_image(images_dir: Path, image_id: str) -> Path:
    for ext in (".pgm", ".png"):
        cand = images_dir / f"{image_id}{ext}"
        if cand.is_file():
            return cand
    raise UsageError(f"no image file for {image_id!r} in {images_dir}")


def split_by_annotator(anns):
    by: dict[str, list[LandmarkAnnotation]] = {}
    for a in anns:
        by.setdefault(a.annotator_id, []).append(a)
    return by


def load_dataset(cfg: RunConfig) -> tuple[LandmarkDataset, list[LandmarkAnnotation]]:
    try:
        anns = read_annotations(cfg.annotations)
    except AnnotationError as exc:
        raise UsageError(str(exc)) from None
    by = split_by_annotator(anns)
    ref = cfg.reference_annotator or (next(iter(by)) if by else None)
    if ref not in by:
        raise UsageError(f"reference annotator {ref!r} not found; have {sorted(by)}")
    refs = by[ref]
    if len(refs) % cfg.k:
        raise UsageError(f"dataset size {len(refs)} is not divisible by k={cfg.k}")
    images = [load_image(_find_image(cfg.images_dir, a.image_id)) for a in refs]
    try:
        ds = prepare_dataset(images, refs, cfg.train.model.input_hw, cfg.train.sigma, cfg.landmarks)
    except (AnnotationError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return ds, anns


# commands ------------------------------------------------------------------------------

def _parse_hw(s: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in s.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {s!r}") from None
    return h, w


def dataset_digest(root: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def cmd_synth(args) -> int:
    out = Path(args.out)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    images, anns = synth_generate(args.seed, args.n, args.hw, args.landmarks, noise=args.noise,
                                  annotator_id="doctor1" if args.annotators == 3 else "synth")
    for img, ann in zip(images, anns):
        save_pgm(img_dir / f"{ann.image_id}.pgm", img)
    all_anns = list(anns)
    if args.annotators == 3:
        for j in (2, 3):
            all_anns += jitter_annotations(anns, f"doctor{j}", args.seed * 10 + j, args.jitter)
    write_annotations(out / "annotations.csv", all_anns)
    cfg_text = render_config("images", "annotations.csv", "run", max(args.landmarks, 1), args.hw,
                             reference_annotator="doctor1" if args.annotators == 3 else None)
    (out / "config.ini").write_text(cfg_text, encoding="utf-8")
    print(f"wrote {args.n} images to {out}")
    print(f"digest {dataset_digest(out)}")
    return 0


def _train_overrides(args) -> dict:
    ov = {"arch": args.arch, "epochs": args.epochs, "output_dir": args.out}
    if args.paper_protocol:
        ov.update(epochs=args.epochs or PUBLISHED_PROTOCOL["epochs"], lr=PUBLISHED_PROTOCOL["lr"],
                  k=PUBLISHED_PROTOCOL["k"], input_h=PUBLISHED_PROTOCOL["input_h"],
                  input_w=PUBLISHED_PROTOCOL["input_w"], landmarks=PUBLISHED_PROTOCOL["landmarks"],
                  base_channels=PUBLISHED_PROTOCOL["base_channels"], depth=PUBLISHED_PROTOCOL["depth"])
    return ov


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _train_overrides(args))
    ds, _ = load_dataset(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = replace(cfg.train, checkpoint_dir=out)
    plan = make_folds(len(ds), cfg.k)
    atomic_write(out / "folds.json", (plan.to_json() + "\n").encode())
    results = run_cross_validation(ds, train_cfg, cfg.k, cfg.spacing, jobs=args.jobs)
    for r in results:
        atomic_write(out / f"fold{r.fold}" / "history.csv",
                     r.history.to_csv(with_seconds=args.record_seconds))
    model = build_model(cfg.train.model)
    manifest = {
        "config_hash": cfg.digest(),
        "arch": cfg.train.model.arch,
        "param_count": param_count(model),
        "model": asdict(cfg.train.model),
        "folds": [{"fold": r.fold, "seed": fold_config(train_cfg, r.fold - 1).seed,
                   "model_seed": fold_config(train_cfg, r.fold - 1).model.seed,
                   "best_epoch": r.history.best_epoch, "best_val_loss": r.best_val_loss,
                   "test_indices": r.test_indices.tolist()} for r in results],
        "landmarks": list(cfg.landmarks),
        "versions": {"cephmark": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    atomic_write(out / "manifest.json", (json.dumps(manifest, indent=1) + "\n").encode())
    for r in results:
        print(f"fold {r.fold}: best epoch {r.history.best_epoch}, val loss "
              f"{r.best_val_loss:.6g}, mean error {r.mean_error_cm:.3f} cm")
    print(f"params {manifest['param_count']}  wrote {out}")
    return 0


def _write_report(out: Path | None, stem: str, report) -> None:
    if out is None:
        sys.stdout.write(emit_report(report, "md").decode())
        return
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / f"{stem}.csv", emit_report(report, "csv"))
    atomic_write(out / f"{stem}.md", emit_report(report, "md"))


def _eval_fixture(args) -> int:
    path = Path(args.from_fixture)
    if not path.is_file():
        raise UsageError(f"fixture not found: {path}")
    printed = parse_report_csv(path.read_bytes())
    if not printed.printed_means:
        raise UsageError(f"{path}: fixture has no printed mean column to check")
    rebuilt, checks = check_printed_means(printed)
    worst = max(checks, key=lambda c: c.delta)
    bad = [c for c in checks if c.delta > 0.005 + 1e-12]
    for c in bad:
        print(f"MISMATCH {c.landmark}: recomputed {c.recomputed:.4f}, printed {c.printed:.2f}")
    print(f"{len(checks)} rows checked, max |recomputed - printed| = {worst.delta:.4f} "
          f"({worst.landmark}); overall mean of row means {rebuilt.overall_mean:.4f}")
    _write_report(Path(args.out) if args.out else None, "fixture_report", rebuilt)
    return 0 if not bad else 2


def cmd_eval(args) -> int:
    if args.from_fixture:
        return _eval_fixture(args)
    if not args.config:
        raise UsageError("eval needs a config file (or --from-fixture)")
    cfg = load_run_config(args.config, {"arch": args.arch})
    ds, anns = load_dataset(cfg)
    ckpt_root = Path(args.checkpoints) if args.checkpoints else cfg.output_dir
    plan = make_folds(len(ds), cfg.k)
    per_fold = []
    model = build_model(cfg.train.model)
    for i, (_, test_idx) in enumerate(plan.folds, start=1):
        if args.oracle:
            errs = landmark_errors(model, ds, test_idx, cfg.spacing, heatmaps=ds.targets[test_idx])
        else:
            wpath = ckpt_root / f"fold{i}" / "best.weights"
            if not wpath.is_file():
                raise UsageError(f"missing checkpoint for fold {i}: {wpath}")
            model.load_state_dict(load_weights(wpath))
            errs = landmark_errors(model, ds, test_idx, cfg.spacing, cfg.train.batch_size)
        per_fold.append(errs)
    report = build_table(per_fold, cfg.spacing)
    out = Path(args.out) if args.out else cfg.output_dir
    _write_report(out, "report", report)
    print(f"{len(report.rows)} landmarks, overall mean {report.overall_mean:.4f} cm -> {out}")
    by = split_by_annotator(anns)
    if len(by) == 3:
        obs = interobserver_table(anns, cfg.spacing, cfg.landmarks)
        label = {"fcn": "CNN and doctor", "unet": "U-Net and doctor"}[cfg.train.model.arch]
        _write_report(out, "observers", obs)
        _write_report(out, "comparison", comparison_table({label: report, "Three doctors": obs}))
        print(f"three-annotator comparison written to {out}")
    return 0


def cmd_compare_observers(args) -> int:
    anns = []
    for f in args.annotations:
        try:
            anns += read_annotations(f)
        except (AnnotationError, OSError) as exc:
            raise UsageError(str(exc)) from None
    try:
        sx, sy = (float(v) for v in (args.spacing.split(",") * 2)[:2])
        spacing = PixelSpacing(sx, sy)
        report = interobserver_table(anns, spacing)
    except (ValueError, EvalError) as exc:
        raise UsageError(str(exc)) from None
    _write_report(Path(args.out) if args.out else None, "observers", report)
    return 0


def cmd_gradcheck(args) -> int:
    hw = args.size
    base = ModelConfig(input_hw=hw, out_channels=args.out_channels, base_channels=args.base,
                       depth=args.depth, seed=args.seed)
    try:
        base.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    ok = True
    for arch in args.arch.split(","):
        cfg = replace(base, arch=arch)
        if args.inject_fault:
            with inject_fault(args.inject_fault):
                rep = check_model(cfg, seed=args.seed)
        else:
            rep = check_model(cfg, seed=args.seed)
        print(rep.summary())
        ok &= rep.passed
    return 0 if ok else 2


def cmd_report(args) -> int:
    cols = {}
    for spec in args.column:
        if "=" not in spec:
            raise UsageError(f"--column expects LABEL=PATH, got {spec!r}")
        label, path = spec.split("=", 1)
        try:
            cols[label] = parse_report_csv(Path(path).read_bytes())
        except (OSError, EvalError, ValueError) as exc:
            raise UsageError(f"{path}: {exc}") from None
    try:
        table = comparison_table(cols)
    except EvalError as exc:
        raise UsageError(str(exc)) from None
    blob = emit_report(table, args.format)
    if args.out:
        atomic_write(Path(args.out), blob)
    else:
        sys.stdout.write(blob.decode())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cephmark", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic landmark dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--hw", type=_parse_hw, default=(64, 64), help="HxW, e.g. 64x64")
    s.add_argument("--landmarks", type=int, default=5)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--annotators", type=int, choices=(1, 3), default=1)
    s.add_argument("--jitter", type=int, default=2, help="max px offset for annotators 2 and 3")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="cross-validated training")
    t.add_argument("config")
    t.add_argument("--arch", choices=("fcn", "unet"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="override paths.output_dir")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--paper-protocol", action="store_true",
                   help="80 epochs, lr 0.001, 5 folds, 512x432 input, 27 landmarks")
    t.add_argument("--record-seconds", action="store_true",
                   help="fill the history seconds column (output no longer reproducible)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-fold radial errors from saved checkpoints")
    e.add_argument("config", nargs="?")
    e.add_argument("--arch", choices=("fcn", "unet"))
    e.add_argument("--checkpoints")
    e.add_argument("--out")
    e.add_argument("--oracle", action="store_true",
                   help="score the encoded targets instead of model output")
    e.add_argument("--from-fixture", help="check a published split table's Mean column")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare-observers", help="three-annotator pairwise distances")
    c.add_argument("annotations", nargs="+")
    c.add_argument("--spacing", required=True, help="cm per px, 'S' or 'SX,SY'")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare_observers)

    g = sub.add_parser("gradcheck", help="finite-difference check of both architectures")
    g.add_argument("--arch", default="fcn,unet")
    g.add_argument("--size", type=_parse_hw, default=(16, 16))
    g.add_argument("--base", type=int, default=4)
    g.add_argument("--depth", type=int, default=2)
    g.add_argument("--out-channels", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="side-by-side table from report CSVs")
    r.add_argument("--column", action="append", required=True, metavar="LABEL=CSV")
    r.add_argument("--format", choices=("md", "csv"), default="md")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return args.func(args)
    except (UsageError, ConfigError, FoldError, AnnotationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, FloatingPointError, EvalError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
