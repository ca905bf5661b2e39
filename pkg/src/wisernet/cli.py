"""``wisernet`` command line: generate, train, eval, ablate, distances, verify.

Exit codes: 0 success, 1 verification failure, 2 usage, 3 IO, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

import wisernet
from wisernet import ablation
from wisernet.config import TrainConfig, load_config_file, resolve_config, write_config
from wisernet.exceptions import ConfigurationError, LoadError, NumericalError, UsageError
from wisernet.metrics import CLASS_NAMES, SPACES, binarize, boundary, distance_row, embed, segmentation_rows
from wisernet.segnet import WaveSegNet, load_model, save_model
from wisernet.synthdata import PRESETS, AnatomySpec, Dataset, generate_domain, load_dataset, style_presets
from wisernet.training import fit, predict_proba

logger = logging.getLogger("wisernet")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
RUN_MANIFEST = "run_manifest.json"
DEFAULT_TARGETS = "shift_mild,shift_color,shift_lowlight"
SUMMARY_COLUMNS = (
    "domain", "n_images",
    "dsc_od_mean", "dsc_od_sd", "dsc_oc_mean", "dsc_oc_sd",
    "hd95_od_mean", "hd95_od_sd", "hd95_oc_mean", "hd95_oc_sd",
    "n_flagged",
)
METRIC_COLUMNS = ("image_id", "domain", "dsc_od", "dsc_oc", "hd95_od", "hd95_oc", "flags")


# -- run manifest ------------------------------------------------------------


def source_revision() -> str:
    """Package version plus a digest of its source files."""
    root = Path(wisernet.__file__).parent
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return f"wisernet {wisernet.__version__} src:{digest.hexdigest()[:12]}"


class RunManifest:
    """JSON record of one command: written before work starts, finalized on exit."""

    def __init__(self, out_dir: Path, command: str, argv: Sequence[str], seed: Optional[int], config=None):
        self.path = out_dir / RUN_MANIFEST
        self.data = {
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "config": config or {},
            "source_revision": source_revision(),
            "outputs": [],
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "status": "running",
            "exit_code": None,
        }
        self.write()

    def write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def add_outputs(self, paths) -> None:
        base = self.path.parent
        for p in paths:
            p = Path(p)
            self.data["outputs"].append(str(p.relative_to(base)) if p.is_relative_to(base) else str(p))

    def finalize(self, exit_code: int) -> None:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["status"] = "ok" if exit_code == EXIT_OK else "failed"
        self.data["exit_code"] = exit_code
        self.write()


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


# -- helpers ---------------------------------------------------------------


def _on_off(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training overrides (flag > config file > default)")
    g.add_argument("--config", help="key=value config file")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--patience", type=int)
    g.add_argument("--lambda-max", dest="lambda_max", type=float)
    g.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    g.add_argument("--ramp-epochs", dest="ramp_epochs", type=int)
    g.add_argument("--base-width", dest="base_width", type=int)
    g.add_argument("--depth", type=int)
    g.add_argument("--input-size", dest="input_size", type=int)
    g.add_argument("--weighted-dice", dest="weighted_dice", type=_on_off)


_OVERRIDE_KEYS = ("epochs", "batch_size", "lr", "patience", "lambda_max", "warmup_epochs", "ramp_epochs",
                  "base_width", "depth", "input_size", "weighted_dice", "seed")


def _resolved_config(args, base: Optional[TrainConfig] = None, **extra) -> TrainConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
    overrides.update(extra)
    return resolve_config(file_values, overrides, base)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in columns])


def _load_source(data_dir: Path, domain: str, input_size: int):
    source = load_dataset(data_dir / domain, input_size)
    train, val, test = source.subset("train"), source.subset("val"), source.subset("test")
    if not len(train) or not len(val):
        raise LoadError(f"{data_dir / domain}: source domain needs train_* and val_* samples")
    test.domain = source.domain
    return train, val, test


def _target_dirs(data_dir: Path, source: str, names: Optional[str]) -> List[Path]:
    if names:
        return [data_dir / n for n in names.split(",") if n]
    return sorted(p for p in data_dir.iterdir() if p.is_dir() and p.name != source and (p / "manifest.txt").is_file())


def dataset_hash(domain_dir: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(p for p in domain_dir.rglob("*") if p.is_file()):
        digest.update(path.relative_to(domain_dir).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


# -- commands ----------------------------------------------------------------


def cmd_generate(args, manifest: RunManifest) -> int:
    names = [args.source] + [t for t in args.targets.split(",") if t]
    for name in names:
        if name not in PRESETS:
            raise UsageError(f"unknown style preset {name!r}; known: {', '.join(PRESETS)}")
    out = Path(args.out)
    anat = AnatomySpec()
    dirs = []
    splits = [("train", args.n), ("val", args.n_val), ("test", args.n_test)]
    splits = [(k, n) for k, n in splits if n > 0]
    generate_domain(anat, style_presets(args.source), sum(n for _, n in splits), args.seed * 10,
                    out / args.source, args.source, args.size, splits)
    dirs.append(out / args.source)
    for k, name in enumerate(names[1:], 1):
        generate_domain(anat, style_presets(name), args.n_target, args.seed * 10 + k, out / name, name, args.size)
        dirs.append(out / name)
    hashes = out / "dataset_hashes.txt"
    hashes.write_text("".join(f"{d.name}\t{dataset_hash(d)}\n" for d in dirs))
    manifest.add_outputs(dirs + [hashes])
    print(f"generated {len(dirs)} domains under {out}")
    return EXIT_OK


def cmd_train(args, manifest: RunManifest) -> int:
    cfg = _resolved_config(args, wiser_enabled=args.wiser, ds_enabled=args.ds)
    out = Path(args.out)
    write_config(out / "config.txt", cfg)
    manifest.data["config"] = asdict(cfg)
    manifest.write()
    train, val, _ = _load_source(Path(args.data), args.source_domain, cfg.input_size)
    model = WaveSegNet(cfg.model_config())
    try:
        model, history = fit(model, (train.images, train.masks), (val.images, val.masks), cfg)
    except NumericalError as exc:
        (out / "nan_diagnostics.json").write_text(json.dumps(exc.diagnostics, indent=2, sort_keys=True) + "\n")
        raise
    save_model(out / "model.ckpt", model, {"best_epoch": history.best_epoch})
    history.to_csv(out / "history.csv")
    history.timings_to_csv(out / "timings.csv")
    manifest.add_outputs([out / "model.ckpt", out / "history.csv", out / "timings.csv", out / "config.txt"])
    print(f"best epoch {history.best_epoch}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _overlay(image: np.ndarray, pred: np.ndarray, scale: int = 4) -> Image.Image:
    rgb = np.round(np.clip(image.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    colors = {0: (0, 255, 0), 1: (0, 160, 255)}
    for c, color in colors.items():
        rgb[boundary(pred[c])] = color
    img = Image.fromarray(rgb, mode="RGB")
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def _summary_row(domain: str, rows: List[dict]) -> dict:
    out = {"domain": domain, "n_images": len(rows)}
    for key in ("dsc_od", "dsc_oc", "hd95_od", "hd95_oc"):
        vals = np.array([r[key] for r in rows])
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    out["n_flagged"] = sum(1 for r in rows if r["flags"])
    return out


def cmd_eval(args, manifest: RunManifest) -> int:
    model, meta = load_model(args.checkpoint)
    out = Path(args.out)
    threshold = args.threshold
    summaries = []
    outputs = []
    for d in args.domains:
        data = load_dataset(d, args.input_size)
        if args.split and any(i.startswith(args.split + "_") for i in data.ids):
            # target domains carry no splits and are held out whole
            data = data.subset(args.split)
        probs = predict_proba(model, data.images)
        rows = segmentation_rows(probs, data.masks, data.ids, data.domain, threshold)
        path = out / f"metrics_{data.domain}.csv"
        _write_csv(path, METRIC_COLUMNS, rows)
        outputs.append(path)
        summaries.append(_summary_row(data.domain, rows))
        if args.overlays:
            odir = out / "overlays" / data.domain
            odir.mkdir(parents=True, exist_ok=True)
            pred = binarize(probs, threshold)
            for i, sample_id in enumerate(data.ids):
                _overlay(data.images[i], pred[i]).save(odir / f"{sample_id}.png")
            outputs.append(odir)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summaries)
    manifest.add_outputs(outputs + [out / "summary.csv"])
    for s in summaries:
        print(f"{s['domain']}: DSC od {s['dsc_od_mean']:.2f} oc {s['dsc_oc_mean']:.2f}  "
              f"HD95 od {s['hd95_od_mean']:.2f} oc {s['hd95_oc_mean']:.2f}")
    return EXIT_OK


def cmd_ablate(args, manifest: RunManifest) -> int:
    cfg = _resolved_config(args, base=ablation.desk_protocol())
    seeds = [cfg.seed + k for k in range(args.seeds)]
    manifest.data["config"] = asdict(cfg)
    manifest.data["seeds"] = seeds
    manifest.write()
    data_dir = Path(args.data)
    out = Path(args.out)
    write_config(out / "config.txt", cfg)
    train, val, test = _load_source(data_dir, args.source_domain, cfg.input_size)
    targets = [load_dataset(p, cfg.input_size) for p in _target_dirs(data_dir, args.source_domain, args.targets)]
    if not targets:
        raise LoadError(f"{data_dir}: no target domains found")
    if not len(test):
        raise LoadError(f"{data_dir / args.source_domain}: no test_* samples for the source row")
    eval_sets = [test] + targets
    result = ablation.run_ablation(train, val, eval_sets, cfg, seeds, source_domain=test.domain)
    distances = ablation.distance_table(result, test, targets, space=args.space)
    paths = ablation.write_ablation_outputs(out, result, distances, save_models=not args.no_checkpoints)
    manifest.add_outputs(list(paths.values()) + [out / "runs", out / "config.txt"])
    for config in ablation.ABLATION_CONFIGS:
        print(f"{config:<9} target DSC {result.mean_target_dsc(config):6.2f}  "
              f"source DSC {result.source_dsc(config, test.domain):6.2f}")
    return EXIT_OK


def cmd_distances(args, manifest: RunManifest) -> int:
    source = load_dataset(args.source, args.input_size, split=args.split)
    targets = [load_dataset(t, args.input_size) for t in args.target]
    models = [("with_wiser" if args.baseline else "model", args.checkpoint)]
    if args.baseline:
        models.insert(0, ("without_wiser", args.baseline))
    rows = []
    pooled = np.concatenate([t.images for t in targets], axis=0)
    for label, ckpt in models:
        model, _ = load_model(ckpt)
        src = embed(model, source.images, args.space, args.level, domain_label=source.domain)
        for t in targets:
            emb = embed(model, t.images, args.space, args.level, domain_label=t.domain)
            rows.append({"pair": f"{label}:{source.domain}~{t.domain}", "space": args.space,
                         **distance_row(src, emb, args.bins)})
        if len(targets) > 1:
            emb = embed(model, pooled, args.space, args.level)
            rows.append({"pair": f"{label}:{source.domain}~{ablation.POOLED}", "space": args.space,
                         **distance_row(src, emb, args.bins)})
    out = Path(args.out)
    ablation.write_distance_csv(out / "distances.csv", rows)
    outputs = [out / "distances.csv"]
    if args.baseline:
        compare = ablation.compare_distances(rows, without="without_wiser", with_="with_wiser")
        ablation.write_compare_csv(out / "distances_compare.csv", compare)
        outputs.append(out / "distances_compare.csv")
    manifest.add_outputs(outputs)
    for r in rows:
        print(f"{r['pair']:<48} mmd {r['mmd']:.4f} jsd {r['jsd']:.4f} frechet {r['frechet']:.4f}")
    return EXIT_OK


def cmd_verify(args, manifest: Optional[RunManifest]) -> int:
    from wisernet.verify import format_table, run_suite

    results = run_suite(quick=args.quick)
    print(format_table(results))
    if args.out:
        out = Path(args.out)
        with open(out / "verify.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("check", "status", "value", "tolerance", "detail"))
            for r in results:
                writer.writerow((r.name, "PASS" if r.passed else "FAIL", f"{r.value:.6e}", r.tolerance, r.detail))
        manifest.add_outputs([out / "verify.csv"])
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wisernet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, needs_out=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=False, help="output root" + ("" if needs_out else " (optional)"))
        p.add_argument("--replay", help="re-run the command recorded in a run manifest")
        return p

    p = add("generate", "render the synthetic source and target domains")
    p.add_argument("--source", default="source")
    p.add_argument("--targets", default=DEFAULT_TARGETS)
    p.add_argument("--n", type=int, default=200, help="source training images")
    p.add_argument("--n-val", dest="n_val", type=int, default=40)
    p.add_argument("--n-test", dest="n_test", type=int, default=60)
    p.add_argument("--n-target", dest="n_target", type=int, default=60)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = add("train", "train one model on the source domain")
    p.add_argument("--data", help="dataset root holding the source domain directory")
    p.add_argument("--source-domain", dest="source_domain", default="source")
    p.add_argument("--wiser", type=_on_off)
    p.add_argument("--ds", type=_on_off)
    p.add_argument("--seed", type=int)
    _add_train_overrides(p)

    p = add("eval", "score a checkpoint on domain directories")
    p.add_argument("--checkpoint")
    p.add_argument("--domains", nargs="+")
    p.add_argument("--split", help="only ids with this prefix, e.g. test; domains without it are used whole")
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--overlays", action="store_true", help="write prediction contour PNGs")

    p = add("ablate", "train baseline, +WISER and +WISER+DS over several seeds")
    p.add_argument("--data")
    p.add_argument("--source-domain", dest="source_domain", default="source")
    p.add_argument("--targets", help="comma-separated target directory names (default: all others)")
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    p.add_argument("--seed", type=int)
    p.add_argument("--space", choices=SPACES, default="bottleneck")
    p.add_argument("--no-checkpoints", dest="no_checkpoints", action="store_true")
    _add_train_overrides(p)

    p = add("distances", "source-to-target feature distances")
    p.add_argument("--checkpoint", help="model to embed with (the WISER model when --baseline is given)")
    p.add_argument("--baseline", help="checkpoint trained without WISER, for a with/without comparison")
    p.add_argument("--source")
    p.add_argument("--target", nargs="+")
    p.add_argument("--split", help="source id prefix, e.g. test")
    p.add_argument("--space", choices=SPACES, default="bottleneck")
    p.add_argument("--level", type=int, default=1)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--input-size", dest="input_size", type=int)

    p = add("verify", "run the property suite", needs_out=False)
    p.add_argument("--quick", action="store_true", help="smaller sample counts, no end-to-end check")
    return parser


_REQUIRED = {
    "generate": ("out",),
    "train": ("out", "data"),
    "eval": ("out", "checkpoint", "domains"),
    "ablate": ("out", "data"),
    "distances": ("out", "checkpoint", "source", "target"),
    "verify": (),
}

COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "distances": cmd_distances,
    "verify": cmd_verify,
}


def _replay_argv(manifest_path: str, out: Optional[str]) -> List[str]:
    try:
        data = json.loads(Path(manifest_path).read_text())
        argv = list(data["argv"])
    except (OSError, ValueError, KeyError) as exc:
        raise LoadError(f"cannot replay {manifest_path}: {exc}") from exc
    if out is not None:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = out
        else:
            argv += ["--out", out]
    return argv


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = None
    try:
        if args.replay:
            return main(_replay_argv(args.replay, args.out))
        missing = [f"--{k.replace('_', '-')}" for k in _REQUIRED[args.command] if getattr(args, k) in (None, [])]
        if missing:
            raise UsageError(f"{args.command}: missing required flags {' '.join(missing)}")
        if args.out:
            out = _prepare_out(args.out)
            seed = getattr(args, "seed", None)
            manifest = RunManifest(out, args.command, argv, seed)
        code = COMMANDS[args.command](args, manifest)
    except (UsageError, ConfigurationError) as exc:
        print(f"wisernet {args.command}: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except NumericalError as exc:
        print(f"wisernet {args.command}: numerical abort: {exc}", file=sys.stderr)
        for key, value in sorted(exc.diagnostics.items()):
            print(f"  {key} = {value}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (LoadError, OSError) as exc:
        print(f"wisernet {args.command}: {exc}", file=sys.stderr)
        code = EXIT_IO
    if manifest is not None:
        manifest.finalize(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
