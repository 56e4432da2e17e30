"""Command-line entry point: ``shearad <verb> [--config PATH] [--seed N] [--output DIR]``.

Every verb works inside ``<output>/<config-hash>/`` so runs with different
configurations never touch each other's artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

from shearad import phz, scoring
from shearad.config import RunConfig, default_config_json, load_config
from shearad.datamodel import (
    DatasetManifest,
    build_subset,
    ingest_external_predictions,
    load_manifest,
    save_manifest,
    save_predictions,
    subset_definition,
)
from shearad.errors import ValidationError
from shearad.eval.classification import chance_ap, pr_ap, roc_auc, scored_samples
from shearad.eval.detection import map_suite
from shearad.eval.features import extract_features
from shearad.eval.report import (
    MetricsReport,
    plot_embedding,
    plot_heatmap_overlays,
    plot_pr,
    plot_roc,
    write_curve_csv,
    write_embedding_csv,
    write_report,
)
from shearad.eval.tsne import tsne
from shearad.models.preprocess import heatmap_to_image_grid
from shearad.models.stfpm import load_teacher
from shearad.models.teacher import train_pretext_teacher
from shearad.models.training import KINDS, load_images, load_model, save_model, train
from shearad.synthgen import generate_dataset

log = logging.getLogger("shearad")

LEDGER_NAME = "ledger.json"
PROGRESS_NAME = "stages.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- layout


class RunLayout:
    """Artifact locations inside one run directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.root = config.run_dir

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def manifest(self) -> Path:
        return self.data / "manifest.json"

    @property
    def subset_manifest(self) -> Path:
        return self.root / f"subset_{self.config.subset.name}" / "manifest.json"

    @property
    def teacher(self) -> Path:
        return self.root / "models" / "teacher.pt"

    def checkpoint(self, kind: str) -> Path:
        return self.root / "models" / f"{kind}.pt"

    def report_dir(self, kind: str, strategy: str) -> Path:
        return self.root / "reports" / f"{kind}_{strategy}"

    @property
    def embed_dir(self) -> Path:
        return self.root / "embedding"

    @property
    def external_predictions(self) -> Path:
        return self.root / "external" / "predictions.json"


# ---------------------------------------------------------------- stages


def cmd_generate(config: RunConfig) -> Path:
    layout = RunLayout(config)
    manifest = generate_dataset(config.generator, config.seed, layout.data)
    counts = {}
    for r in manifest.samples:
        key = "defective" if r.defective else r.condition
        counts[key] = counts.get(key, 0) + 1
    print(f"generated {len(manifest.samples)} samples {counts} -> {layout.manifest}")
    return layout.manifest


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"missing {what} {path}; run the earlier stage first")
    return path


def cmd_subset(config: RunConfig) -> Path:
    layout = RunLayout(config)
    manifest = load_manifest(_require(layout.manifest, "dataset manifest"))
    subset = build_subset(manifest, subset_definition(config.subset.name), config.subset.ratios, config.seed)
    layout.subset_manifest.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(subset, layout.subset_manifest)
    sizes = {s: len(subset.split(s)) for s in ("train", "val", "test", "unassigned")}
    print(f"subset {config.subset.name}: {sizes} -> {layout.subset_manifest}")
    return layout.subset_manifest


def _teacher(config: RunConfig):
    layout = RunLayout(config)
    stfpm_cfg = config.model.configs["STFPM"]
    if stfpm_cfg.teacher_checkpoint:
        return load_teacher(stfpm_cfg.teacher_checkpoint, stfpm_cfg.pyramid_layers)
    if layout.teacher.exists():
        return load_teacher(layout.teacher, stfpm_cfg.pyramid_layers)
    layout.teacher.parent.mkdir(parents=True, exist_ok=True)
    teacher_cfg = config.model.teacher
    if tuple(teacher_cfg.layers) != tuple(stfpm_cfg.pyramid_layers):
        raise ValidationError("teacher layers must match the STFPM pyramid layers")
    return train_pretext_teacher(config.generator, layout.teacher, config.seed, teacher_cfg)


def cmd_train(config: RunConfig, kinds: Sequence[str] | None = None) -> list[Path]:
    layout = RunLayout(config)
    subset = load_manifest(_require(layout.subset_manifest, "subset manifest"))
    out = []
    for kind in kinds or config.model.kinds:
        if kind not in KINDS:
            raise ValidationError(f"unknown model kind {kind!r}")
        teacher = _teacher(config) if kind == "STFPM" else None
        model = train(kind, subset, config.model.hyperparams[kind], config.seed, config.model.configs[kind], teacher)
        path = layout.checkpoint(kind)
        save_model(model, path)
        print(f"trained {kind}: final train loss {model.metadata['final_train_loss']:.6g} -> {path}")
        out.append(path)
    return out


def _classification_report(ids, labels, scores, **meta) -> MetricsReport:
    samples = scored_samples(ids, labels, scores)
    roc, auc = roc_auc(samples)
    pr, ap = pr_ap(samples)
    return MetricsReport(roc, auc, pr, ap, chance_ap(samples), **meta)


def _columns(records, idx, scores):
    if len({records[i].defective for i in idx}) != 2:
        raise ValidationError("test split needs both defective and defect-free samples")
    return [records[i].id for i in idx], [records[i].defective for i in idx], scores[idx]


def _threshold(config: RunConfig, val_maps, val_boxes) -> float:
    n = config.scoring.threshold_search
    if not n or not val_maps:
        return config.scoring.threshold_for(config.subset.name)
    candidates = scoring.threshold_candidates(val_maps, n)
    best, _ = scoring.search_threshold(val_maps, val_boxes, candidates, config.scoring.sigma, config.scoring.min_area)
    return best


def _write_report_bundle(report: MetricsReport, out_dir: Path) -> list[Path]:
    return [
        write_report(report, out_dir / "report.json"),
        write_curve_csv(report.roc_points, ("fpr", "tpr"), out_dir / "roc.csv"),
        write_curve_csv(report.pr_points, ("recall", "precision"), out_dir / "pr.csv"),
        plot_roc(report, out_dir / "roc.png"),
        plot_pr(report, out_dir / "pr.png"),
    ]


def cmd_evaluate(
    config: RunConfig,
    kinds: Sequence[str] | None = None,
    strategies: Sequence[str] | None = None,
    predictions: str | Path | None = None,
) -> list[Path]:
    """Score val+test once per model; write one report bundle per strategy.

    Classification metrics are computed on the test split and repeated for
    val under ``extra``. STFPM reports carry the localization section, or
    ``predictions`` replaces it with externally ingested boxes.
    """
    layout = RunLayout(config)
    subset = load_manifest(_require(layout.subset_manifest, "subset manifest"))
    records = subset.split("val") + subset.split("test")
    images = load_images(subset, records)
    written: list[Path] = []
    for kind in kinds or config.model.kinds:
        model = load_model(_require(layout.checkpoint(kind), f"{kind} checkpoint"))
        wanted = [s for s in (strategies or config.scoring.strategies) if s in scoring.COMPATIBLE[kind]]
        if strategies:
            for s in strategies:
                scoring.check_strategy(kind, s)
        if not wanted:
            continue
        scores = scoring.score_images(model, images, wanted)
        localization, extra_files, loc_meta = None, [], {}
        if kind == "STFPM" or predictions is not None:
            localization, extra_files, loc_meta = _localize(config, layout, subset, records, images, scores, predictions)
        for strategy in wanted:
            meta = dict(config_hash=config.digest(), subset=config.subset.name, model=kind, strategy=strategy)
            test_idx = [i for i, r in enumerate(records) if r.split == "test"]
            val_idx = [i for i, r in enumerate(records) if r.split == "val"]
            extra = {"localization": loc_meta} if loc_meta else {}
            if len({records[i].defective for i in val_idx}) == 2:
                val_report = _classification_report(*_columns(records, val_idx, scores[strategy]))
                extra["val"] = {"auc": val_report.auc, "ap": val_report.ap}
            report = _classification_report(
                *_columns(records, test_idx, scores[strategy]), localization=localization, extra=extra, **meta
            )
            out_dir = layout.report_dir(kind, strategy + ("_external" if predictions is not None else ""))
            written += _write_report_bundle(report, out_dir)
            print(f"{kind}/{strategy}: AUC {report.auc:.4f} AP {report.ap:.4f} (chance {report.chance_ap:.2f})")
        written += extra_files
    return written


def _localize(config, layout, subset: DatasetManifest, records, images, scores, predictions):
    """Localization metrics on test defectives plus heatmap/detection artifacts."""
    sc = config.scoring
    test_def = [i for i, r in enumerate(records) if r.split == "test" and r.defective]
    if not test_def:
        return None, [], {}
    gts = {records[i].id: list(records[i].boxes) for i in test_def}
    files: list[Path] = []
    if predictions is not None:
        ingested = ingest_external_predictions(predictions, subset)
        preds = {sid: ingested.get(sid, []) for sid in gts}
        meta = {"source": "external"}
    else:
        maps = scores["heatmaps"]
        stfpm_res = config.model.configs["STFPM"].input_resolution
        grid = {i: heatmap_to_image_grid(maps[i], images.shape[-2:], stfpm_res) for i in range(len(records))}
        val_def = [i for i, r in enumerate(records) if r.split == "val" and r.defective]
        thr = _threshold(config, [grid[i] for i in val_def], [records[i].boxes for i in val_def])
        preds = {records[i].id: scoring.localize(grid[i], thr, sc.sigma, sc.min_area) for i in test_def}
        meta = {"source": "STFPM", "threshold": thr, "sigma": sc.sigma, "min_area": sc.min_area}
        heat_dir = layout.root / "heatmaps"
        heat_dir.mkdir(parents=True, exist_ok=True)
        for i in test_def:
            path = heat_dir / f"{records[i].id}.hmp"
            phz.write_heatmap(path, grid[i])
            files.append(path)
        shown = test_def[: config.eval.overlay_count]
        files.append(
            plot_heatmap_overlays(
                [images[i] for i in shown],
                [grid[i] for i in shown],
                [preds[records[i].id] for i in shown],
                [records[i].boxes for i in shown],
                [records[i].id for i in shown],
                layout.root / "reports" / "STFPM_overlays.png",
            )
        )
    det_path = layout.root / "detections" / f"{meta['source']}.json"
    det_path.parent.mkdir(parents=True, exist_ok=True)
    save_predictions(preds, det_path)
    files.append(det_path)
    suite = map_suite(preds, gts)
    suite.pop("ap_per_threshold")
    return suite, files, meta


def cmd_embed(config: RunConfig, kind: str | None = None) -> list[Path]:
    layout = RunLayout(config)
    kind = kind or config.eval.embed_model
    subset = load_manifest(_require(layout.subset_manifest, "subset manifest"))
    records = subset.split("val") + subset.split("test")
    if len(records) <= 3 * config.eval.perplexity:
        raise ValidationError(
            f"{len(records)} val+test samples are too few for perplexity {config.eval.perplexity}"
        )
    model = load_model(_require(layout.checkpoint(kind), f"{kind} checkpoint"))
    feats = extract_features(model, load_images(subset, records), config.eval.feature_source)
    labels = [r.defective for r in records]
    result = tsne(feats, config.eval.perplexity, config.eval.iterations, config.seed, labels)
    ids = [r.id for r in records]
    out = [
        write_embedding_csv(ids, result.coords, labels, layout.embed_dir / f"{kind}_embedding.csv"),
        plot_embedding(result.coords, labels, layout.embed_dir / f"{kind}_embedding.png", f"{kind} features"),
    ]
    print(f"embedded {len(ids)} samples from {kind}, KL {result.kl_final:.4f}")
    return out


def cmd_ingest(config: RunConfig, path: str | Path) -> Path:
    layout = RunLayout(config)
    subset = load_manifest(_require(layout.subset_manifest, "subset manifest"))
    preds = ingest_external_predictions(path, subset)
    layout.external_predictions.parent.mkdir(parents=True, exist_ok=True)
    save_predictions(preds, layout.external_predictions)
    n = sum(len(v) for v in preds.values())
    print(f"ingested {n} boxes for {len(preds)} samples -> {layout.external_predictions}")
    return layout.external_predictions


# ---------------------------------------------------------------- pipeline


def _relative(paths: Sequence[Path], root: Path) -> list[str]:
    return sorted(str(Path(p).resolve().relative_to(root.resolve())) for p in paths)


def _dataset_files(config: RunConfig) -> list[Path]:
    layout = RunLayout(config)
    manifest = load_manifest(layout.manifest)
    return [layout.manifest, layout.data / "truth.json", layout.data / "generator_config.json"] + [
        manifest.resolve(r) for r in manifest.samples
    ]


def cmd_pipeline(config: RunConfig) -> Path:
    """generate -> subset -> train -> evaluate -> embed, then the ledger.

    Completed stages whose recorded artifacts still hash the same are
    skipped; a changed artifact aborts with the owning stage's name.
    """
    layout = RunLayout(config)
    layout.root.mkdir(parents=True, exist_ok=True)
    progress_path = layout.root / PROGRESS_NAME
    progress = json.loads(progress_path.read_text()) if progress_path.exists() else {}
    # The snapshot omits output_dir so a run's contents do not depend on where it lives.
    snapshot = {k: v for k, v in config.to_json().items() if k != "output_dir"}
    (layout.root / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True) + "\n")

    def run(name: str, fn: Callable[[], Sequence[Path]]) -> None:
        done = progress.get(name)
        if done:
            present = {rel: (layout.root / rel).exists() for rel in done["artifacts"]}
            if all(present.values()):
                for rel, digest in done["artifacts"].items():
                    if file_sha256(layout.root / rel) != digest:
                        raise StageError(name, f"artifact {rel} no longer matches its recorded hash")
                print(f"[{name}] up to date")
                return
        started = time.time()
        try:
            paths = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
        artifacts = {rel: file_sha256(layout.root / rel) for rel in _relative(paths, layout.root)}
        progress[name] = {"started": started, "finished": time.time(), "artifacts": artifacts}
        progress_path.write_text(json.dumps(progress, indent=1, sort_keys=True) + "\n")

    run("generate", lambda: (cmd_generate(config), _dataset_files(config))[1])
    run("subset", lambda: [cmd_subset(config)])

    def train_all() -> list[Path]:
        paths = cmd_train(config)
        paths += [Path(f"{p}.json") for p in paths]
        if "STFPM" in config.model.kinds and not config.model.configs["STFPM"].teacher_checkpoint:
            paths.append(layout.teacher)
        return paths

    run("train", train_all)

    def verify_checkpoints() -> None:
        # load_model rejects checkpoints whose bytes no longer match their sidecar hash.
        for kind in config.model.kinds:
            try:
                load_model(layout.checkpoint(kind))
            except ValidationError as exc:
                raise StageError("train", str(exc)) from exc

    verify_checkpoints()
    run("evaluate", lambda: cmd_evaluate(config))
    if config.eval.embed_model in config.model.kinds:
        run("embed", lambda: cmd_embed(config))

    ledger = {
        "config_hash": config.digest(),
        "stages": {k: {"started": v["started"], "finished": v["finished"]} for k, v in progress.items()},
        "artifacts": {rel: d for v in progress.values() for rel, d in v["artifacts"].items()},
    }
    missing = [rel for rel in ledger["artifacts"] if not (layout.root / rel).exists()]
    if missing:
        raise StageError("ledger", f"artifacts missing at finalization: {missing[:5]}")
    ledger_path = layout.root / LEDGER_NAME
    ledger_path.write_text(json.dumps(ledger, indent=1, sort_keys=True) + "\n")
    print(f"pipeline complete -> {ledger_path}")
    return ledger_path


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--output", help="root directory for run outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="shearad", description="Unsupervised defect detection on shearography phase images.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("generate", parents=[common], help="synthesize the labelled dataset")
    sub.add_parser("subset", parents=[common], help="assign train/val/test splits")
    t = sub.add_parser("train", parents=[common], help="train detectors on defect-free data")
    t.add_argument("--kind", action="append", choices=KINDS)
    e = sub.add_parser("evaluate", parents=[common], help="score, localize and report")
    e.add_argument("--kind", action="append", choices=KINDS)
    e.add_argument("--strategy", action="append", choices=scoring.STRATEGIES)
    e.add_argument("--predictions", help="external detections JSON replacing STFPM localization")
    m = sub.add_parser("embed", parents=[common], help="t-SNE of learned features")
    m.add_argument("--kind", choices=KINDS)
    sub.add_parser("pipeline", parents=[common], help="run every stage and write the ledger")
    i = sub.add_parser("ingest-predictions", parents=[common], help="validate and store external detections")
    i.add_argument("predictions")
    sub.add_parser("show-defaults", parents=[common], help="print the default configuration")
    return p


def _set_threads() -> None:
    value = os.environ.get("SHEARO_THREADS")
    if value:
        import torch

        try:
            n = int(value)
        except ValueError:
            raise ValidationError(f"SHEARO_THREADS must be a positive integer, got {value!r}") from None
        if n < 1:
            raise ValidationError(f"SHEARO_THREADS must be a positive integer, got {value!r}")
        torch.set_num_threads(n)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.verb == "show-defaults":
            print(json.dumps(default_config_json(args.seed or 0), indent=1, sort_keys=True))
            return 0
        _set_threads()
        config = load_config(args.config, args.seed, args.output)
        if args.verb == "generate":
            cmd_generate(config)
        elif args.verb == "subset":
            cmd_subset(config)
        elif args.verb == "train":
            cmd_train(config, args.kind)
        elif args.verb == "evaluate":
            cmd_evaluate(config, args.kind, args.strategy, args.predictions)
        elif args.verb == "embed":
            cmd_embed(config, args.kind)
        elif args.verb == "pipeline":
            cmd_pipeline(config)
        elif args.verb == "ingest-predictions":
            cmd_ingest(config, args.predictions)
    except (ValidationError, StageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
