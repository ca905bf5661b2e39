"""Three-way ablation (baseline, +WISER, +WISER+DS) over seeds and domains."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from wisernet.config import TrainConfig
from wisernet.metrics import EmbeddingSet, distance_row, embed, segmentation_rows
from wisernet.segnet import WaveSegNet, save_model
from wisernet.synthdata import Dataset
from wisernet.training import TrainHistory, fit, predict_proba

logger = logging.getLogger(__name__)

# name -> (wiser_enabled, ds_enabled)
ABLATION_CONFIGS: Dict[str, Tuple[bool, bool]] = {
    "base": (False, False),
    "wiser": (True, False),
    "wiser_ds": (True, True),
}

ABLATION_COLUMNS = ("config", "domain", "dsc_od", "dsc_oc", "dsc_mean", "dsc_mean_sd", "hd95_od", "hd95_oc", "n_seeds")
PER_SEED_COLUMNS = ("config", "seed", "domain", "dsc_od", "dsc_oc", "dsc_mean", "hd95_od", "hd95_oc", "best_epoch")
DISTANCE_COLUMNS = ("pair", "space", "mmd", "jsd", "frechet")
COMPARE_COLUMNS = ("pair", "space", "metric", "without_wiser", "with_wiser", "lower_with_wiser")
DISTANCE_METRICS = ("mmd", "jsd", "frechet")
POOLED = "pooled_targets"


def desk_protocol(seed: int = 0, **changes) -> TrainConfig:
    """Short schedule for 64x64 synthetic domains on one CPU core.

    A larger learning rate than the full-scale default lets the network
    converge within a few dozen epochs.
    """
    cfg = TrainConfig(epochs=30, lr=1e-3, patience=8, warmup_epochs=5, ramp_epochs=10, seed=seed)
    return cfg.updated(**changes) if changes else cfg


def _fmt(value: float) -> str:
    return f"{value:.6f}"


@dataclass
class RunResult:
    config: str
    seed: int
    model: WaveSegNet
    history: TrainHistory
    # domain -> mean scores over images
    scores: Dict[str, Dict[str, float]] = field(default_factory=dict)


@dataclass
class AblationResult:
    runs: List[RunResult] = field(default_factory=list)
    domains: List[str] = field(default_factory=list)
    target_domains: List[str] = field(default_factory=list)

    def run(self, config: str, seed: int) -> RunResult:
        for r in self.runs:
            if r.config == config and r.seed == seed:
                return r
        raise KeyError((config, seed))

    @property
    def seeds(self) -> List[int]:
        return sorted({r.seed for r in self.runs})

    def per_seed_rows(self) -> List[Dict[str, object]]:
        rows = []
        for r in self.runs:
            for domain in self.domains:
                s = r.scores[domain]
                rows.append({"config": r.config, "seed": r.seed, "domain": domain, **s,
                             "best_epoch": r.history.best_epoch})
        return rows

    def table_rows(self) -> List[Dict[str, object]]:
        rows = []
        for config in ABLATION_CONFIGS:
            runs = [r for r in self.runs if r.config == config]
            if not runs:
                continue
            for domain in self.domains:
                vals = {k: np.array([r.scores[domain][k] for r in runs]) for k in runs[0].scores[domain]}
                rows.append({
                    "config": config,
                    "domain": domain,
                    "dsc_od": float(vals["dsc_od"].mean()),
                    "dsc_oc": float(vals["dsc_oc"].mean()),
                    "dsc_mean": float(vals["dsc_mean"].mean()),
                    "dsc_mean_sd": float(vals["dsc_mean"].std()),
                    "hd95_od": float(vals["hd95_od"].mean()),
                    "hd95_oc": float(vals["hd95_oc"].mean()),
                    "n_seeds": len(runs),
                })
        return rows

    def mean_target_dsc(self, config: str) -> float:
        """Mean DSC over target domains and seeds."""
        runs = [r for r in self.runs if r.config == config]
        return float(np.mean([r.scores[d]["dsc_mean"] for r in runs for d in self.target_domains]))

    def source_dsc(self, config: str, domain: str = "source") -> float:
        runs = [r for r in self.runs if r.config == config]
        return float(np.mean([r.scores[domain]["dsc_mean"] for r in runs]))


def domain_scores(model: WaveSegNet, data: Dataset, threshold: float) -> Dict[str, float]:
    rows = segmentation_rows(predict_proba(model, data.images), data.masks, data.ids, data.domain, threshold)
    out = {k: float(np.mean([row[k] for row in rows])) for k in ("dsc_od", "dsc_oc", "hd95_od", "hd95_oc")}
    out["dsc_mean"] = 0.5 * (out["dsc_od"] + out["dsc_oc"])
    return out


def run_ablation(
    train: Dataset,
    val: Dataset,
    eval_sets: Sequence[Dataset],
    base: TrainConfig,
    seeds: Sequence[int],
    configs: Sequence[str] = tuple(ABLATION_CONFIGS),
    source_domain: str = "source",
    on_run: Optional[Callable[[RunResult], None]] = None,
) -> AblationResult:
    """Train every config for every seed on the same data and score all domains.

    ``eval_sets`` holds the held-out source split (named ``source_domain``)
    and the target domains; the rest count as targets.
    """
    result = AblationResult(
        domains=[d.domain for d in eval_sets],
        target_domains=[d.domain for d in eval_sets if d.domain != source_domain],
    )
    for seed in seeds:
        for name in configs:
            wiser, ds = ABLATION_CONFIGS[name]
            cfg = base.updated(seed=seed, wiser_enabled=wiser, ds_enabled=ds)
            model = WaveSegNet(cfg.model_config())
            model, history = fit(model, (train.images, train.masks), (val.images, val.masks), cfg)
            run = RunResult(name, seed, model, history)
            for data in eval_sets:
                run.scores[data.domain] = domain_scores(model, data, cfg.threshold)
            logger.info("ablation %s seed %d: %s", name, seed,
                        {d: round(s["dsc_mean"], 2) for d, s in run.scores.items()})
            result.runs.append(run)
            if on_run is not None:
                on_run(run)
    return result


def distance_table(
    result: AblationResult,
    source: Dataset,
    targets: Sequence[Dataset],
    space: str = "bottleneck",
    level: int = 1,
) -> List[Dict[str, object]]:
    """Source-vs-target distances per config, averaged over seeds.

    Pairs are ``<config>:source~<target>`` for every target and for the
    pooled targets.
    """
    pooled_images = np.concatenate([t.images for t in targets], axis=0)
    rows = []
    configs = [c for c in ABLATION_CONFIGS if any(r.config == c for r in result.runs)]
    for config in configs:
        if space != "bottleneck" and not ABLATION_CONFIGS[config][0]:
            continue
        per_pair: Dict[str, List[Dict[str, float]]] = {}
        for r in [r for r in result.runs if r.config == config]:
            src = embed(r.model, source.images, space, level)
            pooled = embed(r.model, pooled_images, space, level)
            offset = 0
            for t in targets:
                part = EmbeddingSet(pooled.vectors[offset : offset + len(t)], space, t.domain)
                offset += len(t)
                per_pair.setdefault(t.domain, []).append(distance_row(src, part))
            per_pair.setdefault(POOLED, []).append(distance_row(src, pooled))
        for target, values in per_pair.items():
            row = {"pair": f"{config}:{source.domain}~{target}", "space": space}
            for m in DISTANCE_METRICS:
                row[m] = float(np.mean([v[m] for v in values]))
            rows.append(row)
    return rows


def compare_distances(rows: Sequence[Dict[str, object]], without: str = "base", with_: str = "wiser"):
    """Pair up the same ``source~target`` distances of two configs."""
    index = {(r["pair"], r["space"]): r for r in rows}
    out = []
    for (pair, space), row in index.items():
        config, _, domains = pair.partition(":")
        if config != without or (f"{with_}:{domains}", space) not in index:
            continue
        other = index[(f"{with_}:{domains}", space)]
        for m in DISTANCE_METRICS:
            out.append({
                "pair": domains,
                "space": space,
                "metric": m,
                "without_wiser": row[m],
                "with_wiser": other[m],
                "lower_with_wiser": int(other[m] < row[m]),
            })
    return out


def _write(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def write_ablation_outputs(out_dir, result: AblationResult, distances=None, save_models: bool = True) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"ablation": out / "ablation.csv", "per_seed": out / "ablation_per_seed.csv"}
    _write(paths["ablation"], ABLATION_COLUMNS, result.table_rows())
    _write(paths["per_seed"], PER_SEED_COLUMNS, result.per_seed_rows())
    if distances is not None:
        paths["distances"] = out / "distances.csv"
        paths["distances_compare"] = out / "distances_compare.csv"
        _write(paths["distances"], DISTANCE_COLUMNS, distances)
        _write(paths["distances_compare"], COMPARE_COLUMNS, compare_distances(distances))
    for r in result.runs:
        run_dir = out / "runs" / f"{r.config}_seed{r.seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        r.history.to_csv(run_dir / "history.csv")
        if save_models:
            save_model(run_dir / "model.ckpt", r.model, {"config_name": r.config, "best_epoch": r.history.best_epoch})
    return paths


def write_distance_csv(path, rows) -> None:
    _write(path, DISTANCE_COLUMNS, rows)


def write_compare_csv(path, rows) -> None:
    _write(path, COMPARE_COLUMNS, rows)
