"""Command-line surface for reproducible pipeline runs.

Subcommands: synth | tile | split | train | classify | score | evaluate |
report. A JSON config file may predefine any flag (per-subcommand sections;
explicit flags win). Every run writes ``run.json`` next to its outputs with
the artifact version, the sha256 of the effective configuration, the seed
and a timestamp; the data outputs themselves (scores.csv, eval.json,
manifests) are timestamp-free so identical seeded runs are byte-identical.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, cohort, model, pipeline, scoring, stain, synth, tiler
from .annotate import (
    LABEL_RULE_MAJORITY,
    LABEL_RULE_SINGLE,
    TissueClass,
    parse_annotations,
    rasterize,
    write_annotations,
)
from .cohort import LabeledPatch, ManifestRow, NineClassEntry
from .errors import TsrPipeError
from .raster import read_image, tissue_mask, write_image
from .rng import derive_seed

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad invocation or missing input file; exits with code 2."""


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} not found: {path}")
    return p


def _write_run_metadata(out_dir: Path, subcommand: str, args: argparse.Namespace) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    canonical = json.dumps(config, sort_keys=True, default=str)
    meta = {
        "artifact": f"tsrpipe {__version__}",
        "subcommand": subcommand,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "effective_config": config,
        "generated_at": datetime.now(timezone.utc).isoformat(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _config_echo(args: argparse.Namespace) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    canonical = json.dumps(config, sort_keys=True, default=str)
    return {"artifact": f"tsrpipe {__version__}",
            "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
            "seed": getattr(args, "seed", None)}


# ----------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------

def _cmd_synth(args: argparse.Namespace) -> int:
    spec_path = _require_file(args.spec, "spec file")
    try:
        spec = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"spec file is not valid JSON: {e}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else int(spec.get("seed", 0))

    truth_rows = []
    for entry in spec.get("slides", []):
        slide_id = entry["slide_id"]
        sspec = synth.slide_spec_for_target(
            target=float(entry["target_tsr"]),
            seed=derive_seed(seed, "slide", slide_id),
            ts_cells=int(entry.get("ts_cells", 12)),
            other_cells=int(entry.get("other_cells", 2)),
            background_fraction=float(entry.get("background_fraction", 0.3)),
        )
        img, ann, achieved = synth.gen_slide(sspec)
        write_image(out / f"{slide_id}.ppm", img)
        write_annotations(out / f"{slide_id}.annotation.json", ann)
        truth_rows.append((slide_id, 100.0 * achieved))
    if truth_rows:
        with open(out / "truth.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["slide_id", "true_tsr_percent"])
            for slide_id, percent in truth_rows:
                writer.writerow([slide_id, repr(percent)])

    corpus_spec = spec.get("corpus")
    if corpus_spec:
        n = int(corpus_spec.get("n_per_class", 30))
        patches = synth.gen_corpus(n_per_class=n, seed=derive_seed(seed, "corpus"))
        if corpus_spec.get("normalize", False):
            ref = stain.default_reference_profile()
            patches = [LabeledPatch(p.patch_id, p.label, stain.normalize(p.pixels, ref))
                       for p in patches]
        records = [tiler.PatchRecord(p.patch_id, (0, 0, synth.PATCH_SIZE, synth.PATCH_SIZE),
                                     p.label, p.pixels, normalized=False)
                   for p in patches]
        corpus_dir = out / corpus_spec.get("name", "corpus")
        tiler.write_patches(records, corpus_dir)

    _write_run_metadata(out, "synth", args)
    print(f"synth: wrote {len(truth_rows)} slides"
          + (f" and corpus '{corpus_spec.get('name', 'corpus')}'" if corpus_spec else "")
          + f" to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# tile
# ----------------------------------------------------------------------

def _cmd_tile(args: argparse.Namespace) -> int:
    slide_path = _require_file(args.slide, "slide")
    img = read_image(slide_path)
    slide_id = slide_path.stem
    reference = stain.ReferenceProfile.load(args.reference) if args.reference else None

    if args.annotations:
        ann = parse_annotations(_require_file(args.annotations, "annotation file"))
        lm = rasterize(ann, img.width, img.height)
        cfg = tiler.TilingConfig(patch_size=args.patch_size, overlap=args.overlap,
                                 min_coverage=args.min_coverage,
                                 normalize=not args.no_normalize, stride=args.stride)
        records = tiler.tile_annotated(img, lm, cfg, slide_id, reference,
                                       label_rule=args.label_rule)
    else:
        cfg = tiler.masked_config(patch_size=args.patch_size,
                                  min_coverage=args.min_coverage,
                                  normalize=not args.no_normalize)
        records = tiler.tile_masked(img, tissue_mask(img), cfg, slide_id, reference)

    out = Path(args.out)
    tiler.write_patches(records, out)
    _write_run_metadata(out, "tile", args)
    print(f"tile: {len(records)} patches from {slide_id} -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# split
# ----------------------------------------------------------------------

def _read_patch_class_csv(path: Path) -> list[tuple[str, str, str]]:
    """(patch_id, slide_id, class) rows from a manifest-style CSV."""
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rows.append((row["patch_id"], row.get("slide_id", ""), row["class"]))
    return rows


def _cmd_split(args: argparse.Namespace) -> int:
    manifest = _require_file(args.manifest, "manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = _read_patch_class_csv(manifest)

    if args.mode == "collapse":
        entries = [NineClassEntry(pid, cls) for pid, _, cls in rows]
        collapsed = cohort.collapse_other(entries, args.n_other, args.seed)
        with open(out / "collapsed.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["patch_id", "class"])
            for pid, cls in collapsed:
                writer.writerow([pid, cls.label_name])
        print(f"split: collapsed {len(rows)} entries to {len(collapsed)} rows -> {out}")
    elif args.mode == "constrained":
        by_slide: dict[str, dict[TissueClass, int]] = {}
        for pid, slide_id, cls in rows:
            counts = by_slide.setdefault(slide_id, {c: 0 for c in TissueClass})
            counts[TissueClass.from_name(cls)] += 1
        slides = [cohort.SlideEntry(sid, counts) for sid, counts in sorted(by_slide.items())]
        result = cohort.split_with_constraints(
            slides, args.seed, args.max_diff, args.min_test_per_class,
            args.min_test_fraction, args.max_attempts)
        test_set = set(result.test_slides)
        out_rows = [ManifestRow(pid, sid, TissueClass.from_name(cls),
                                "test" if sid in test_set else "train")
                    for pid, sid, cls in rows]
        cohort.write_split_manifest(out / "split.csv", out_rows)
        print(f"split: {len(result.train_slides)} train / {len(result.test_slides)} test slides -> {out}")
    else:  # holdout or kfold over patches
        labels = [TissueClass.from_name(cls) for _, _, cls in rows]
        if args.mode == "holdout":
            train_idx, val_idx = cohort.holdout_split(labels, args.fraction, args.seed)
            split_of = {}
            for i in train_idx:
                split_of[i] = "train"
            for i in val_idx:
                split_of[i] = "val"
        else:
            folds = cohort.kfold(labels, args.k, args.seed)
            split_of = {int(i): f"fold{fi}" for fi, fold in enumerate(folds) for i in fold}
        out_rows = [ManifestRow(pid, sid, TissueClass.from_name(cls), split_of[i])
                    for i, (pid, sid, cls) in enumerate(rows)]
        cohort.write_split_manifest(out / "split.csv", out_rows)
        print(f"split: {args.mode} assignment for {len(rows)} patches -> {out}")

    _write_run_metadata(out, "split", args)
    return EXIT_OK


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------

def _load_corpus(path: Path) -> list[LabeledPatch]:
    records = tiler.read_patches(_require_file(str(path / "manifest.csv"), "corpus manifest"))
    out = []
    for r in records:
        if r.label is None:
            raise UsageError(f"corpus patch {r.patch_id} has no label")
        out.append(LabeledPatch(r.patch_id, r.label, r.pixels))
    return out


def _load_grid(path: str | None, seed: int) -> list[model.TrainConfig]:
    if path is None:
        return [model.TrainConfig(learning_rate=0.05, batch_size=16, epochs_max=12, seed=seed),
                model.TrainConfig(learning_rate=0.1, batch_size=16, epochs_max=12, seed=seed)]
    entries = json.loads(_require_file(path, "grid file").read_text(encoding="utf-8"))
    if not isinstance(entries, list) or not entries:
        raise UsageError("grid file must be a nonempty JSON array of config objects")
    return [model.TrainConfig(seed=seed, **entry) for entry in entries]


def _cmd_train(args: argparse.Namespace) -> int:
    target = _load_corpus(_require_dir(args.target, "target corpus"))
    test = _load_corpus(_require_dir(args.test, "test corpus"))
    generic = _load_corpus(_require_dir(args.generic, "generic corpus")) if args.generic else []
    domain = _load_corpus(_require_dir(args.domain, "domain corpus")) if args.domain else []

    setups = [model.Setup(int(s)) for s in
              ((1, 2, 3) if args.setup == "all" else (args.setup,))]
    grid = _load_grid(args.grid, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    best_cfg, cv_results = model.cross_validate(grid, target, k=args.cv_folds,
                                                seed=derive_seed(args.seed, "cv"))
    report: dict = {
        "schema": "train-report/1",
        "config": _config_echo(args),
        "cross_validation": {
            "folds": args.cv_folds,
            "grid": [dict(vars(g)) for g in grid],
            "mean_validation_accuracy": [acc for _, acc in cv_results],
            "chosen": dict(vars(best_cfg)),
        },
        "setups": {},
    }

    for setup in setups:
        net, provenance = model.run_setup(setup, generic, domain, target, best_cfg)
        test_acc = model.evaluate_accuracy(net, test)
        ckpt = out / f"{setup.name.lower()}.mnet"
        net.save(ckpt)
        report["setups"][setup.name] = {
            "test_accuracy": test_acc,
            "validation_accuracy": provenance["best_val_accuracy"],
            "optimal_epochs": provenance["optimal_epochs"],
            "checkpoint": ckpt.name,
            "provenance": provenance,
        }

    (out / "training_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    _write_run_metadata(out, "train", args)

    print(_format_setup_table(report))
    return EXIT_OK


def _format_setup_table(report: dict) -> str:
    lines = ["setup    test_accuracy  validation_accuracy  optimal_epochs"]
    for name, cells in sorted(report["setups"].items()):
        lines.append(f"{name:<8} {cells['test_accuracy']:>12.4f}  "
                     f"{cells['validation_accuracy']:>18.4f}  {cells['optimal_epochs']:>14d}")
    return "\n".join(lines)


# ----------------------------------------------------------------------
# classify
# ----------------------------------------------------------------------

def _cmd_classify(args: argparse.Namespace) -> int:
    records = tiler.read_patches(_require_file(args.manifest, "patch manifest"))
    if args.checkpoint:
        classifier = model.MiniNetClassifier(model.MiniNet.load(_require_file(args.checkpoint, "checkpoint")))
    else:
        classifier = model.external_classifier(_require_file(args.predictions, "predictions file"))
    predictions = model.classify_manifest(classifier, records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.write_predictions_csv(out, predictions)
    _write_run_metadata(out.parent, "classify", args)
    print(f"classify: {len(predictions)} patches -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# score (the slide pipeline) and evaluate
# ----------------------------------------------------------------------

def _read_truth_csv(path: Path) -> dict[str, int]:
    truth = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            truth[row["slide_id"]] = int(round(float(row["true_tsr_percent"])))
    return truth


def _cmd_score(args: argparse.Namespace) -> int:
    slides_dir = _require_dir(args.slides, "slides directory")
    slide_paths = sorted(slides_dir.glob("*.ppm"))
    if not slide_paths:
        raise UsageError(f"no .ppm slides in {slides_dir}")
    slides = [(p.stem, read_image(p)) for p in slide_paths]

    if args.oracle:
        oracles = {}
        for path, (slide_id, img) in zip(slide_paths, slides):
            ann_path = path.with_suffix(".annotation.json")
            ann = parse_annotations(_require_file(str(ann_path), f"annotation for {slide_id}"))
            oracles[slide_id] = model.LabelMapOracle(rasterize(ann, img.width, img.height))
        classifier_for = lambda sid, img: oracles[sid]
    elif args.checkpoint:
        clf = model.MiniNetClassifier(model.MiniNet.load(_require_file(args.checkpoint, "checkpoint")))
        classifier_for = lambda sid, img: clf
    elif args.predictions:
        clf = model.external_classifier(_require_file(args.predictions, "predictions file"))
        classifier_for = lambda sid, img: clf
    else:
        raise UsageError("one of --oracle, --checkpoint or --predictions is required")

    cfg = tiler.masked_config(min_coverage=args.min_coverage,
                              normalize=not args.no_normalize)
    reference = stain.ReferenceProfile.load(args.reference) if args.reference else None
    result = pipeline.run_pipeline(slides, classifier_for, cfg, reference,
                                   stain_fit=args.stain_fit, strict=args.strict,
                                   jobs=args.jobs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scoring.write_scores_csv(out / "scores.csv", result.scores)
    with open(out / "errors.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["slide_id", "reason"])
        for failure in result.failures:
            writer.writerow([failure.slide_id, failure.reason])

    truth_path = args.truth or (slides_dir / "truth.csv" if (slides_dir / "truth.csv").is_file() else None)
    if truth_path:
        truth = _read_truth_csv(_require_file(str(truth_path), "truth file"))
        report = scoring.build_eval_report(result.scores, truth, _config_echo(args),
                                           args.see_divisor, args.std_ddof)
        scoring.write_eval_json(out / "eval.json", report)

    _write_run_metadata(out, "score", args)
    print(f"score: {len(result.scores)} slides scored, {len(result.failures)} failures -> {out}")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    scores = scoring.read_scores_csv(_require_file(args.scores, "scores file"))
    truth = _read_truth_csv(_require_file(args.truth, "truth file"))
    report = scoring.build_eval_report(scores, truth, _config_echo(args),
                                       args.see_divisor, args.std_ddof)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scoring.write_eval_json(out, report)
    _write_run_metadata(out.parent, "evaluate", args)
    print(f"evaluate: {report.get('n_evaluated', 0)} slides -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------

def _format_decile_table(report: dict) -> str:
    cats = [str(c) for c in range(10, 100, 10)]
    lines = ["true_tsr   " + "  ".join(f"{c:>6}%" for c in cats)]
    for stat in ("mean", "median", "see", "std", "n"):
        cells = []
        for c in cats:
            value = report.get("deciles", {}).get(c, {}).get(stat)
            if value is None:
                cells.append("      -")
            elif stat == "n":
                cells.append(f"{value:>7d}")
            else:
                cells.append(f"{value:>7.1f}")
        lines.append(f"{stat:<10} " + "  ".join(cells))
    return "\n".join(lines)


def _cmd_report(args: argparse.Namespace) -> int:
    sections = []
    if args.eval:
        report = json.loads(_require_file(args.eval, "eval file").read_text(encoding="utf-8"))
        r = report.get("pearson_r")
        see_val = report.get("see")
        kappa = report.get("cohen_kappa_high_low")
        sections.append(
            f"TSR evaluation ({report.get('n_evaluated', 0)} slides)\n"
            f"  pearson_r = {r if r is None else format(r, '.4f')}\n"
            f"  SEE ({report.get('see_divisor', 'n')}) = "
            f"{see_val if see_val is None else format(see_val, '.2f')}\n"
            f"  kappa (high/low at 50%) = {kappa if kappa is None else format(kappa, '.4f')}\n\n"
            + _format_decile_table(report))
    if args.train_report:
        train_report = json.loads(_require_file(args.train_report, "training report").read_text(encoding="utf-8"))
        sections.append(_format_setup_table(train_report))
    if not sections:
        raise UsageError("nothing to report: pass --eval and/or --train-report")
    text = "\n\n".join(sections) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsrpipe",
        description="Automated tumor-stroma-ratio pipeline for whole-slide images")
    parser.add_argument("--config", help="JSON config file; flags override its values")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate synthetic slides and corpora")
    p.add_argument("--spec", required=True, help="synthesis spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the spec's seed")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tile", help="tile one slide into patches")
    p.add_argument("--slide", required=True, help="slide PPM")
    p.add_argument("--out", required=True)
    p.add_argument("--annotations", help="annotation JSON (annotated mode; else masked mode)")
    p.add_argument("--patch-size", type=int, default=tiler.PATCH_SIZE)
    p.add_argument("--overlap", type=int, default=tiler.ANNOTATED_OVERLAP)
    p.add_argument("--stride", type=int, default=None,
                   help="explicit stride override (annotated mode)")
    p.add_argument("--min-coverage", type=float, default=0.75)
    p.add_argument("--label-rule", choices=[LABEL_RULE_SINGLE, LABEL_RULE_MAJORITY],
                   default=LABEL_RULE_SINGLE)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--reference", help="reference stain profile JSON")
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("split", help="assign patches/slides to splits or folds")
    p.add_argument("--manifest", required=True, help="CSV with patch_id,slide_id,class")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["constrained", "holdout", "kfold", "collapse"],
                   default="constrained")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-diff", type=int, default=80)
    p.add_argument("--min-test-per-class", type=int, default=900)
    p.add_argument("--min-test-fraction", type=float, default=0.10)
    p.add_argument("--max-attempts", type=int, default=10_000)
    p.add_argument("--fraction", type=float, default=1 / 3, help="holdout validation fraction")
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--n-other", type=int, default=10_445, help="collapse mode: size of *other*")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="cross-validate and run pretraining setups")
    p.add_argument("--target", required=True, help="target corpus directory")
    p.add_argument("--test", required=True, help="held-out test corpus directory")
    p.add_argument("--generic", help="generic pretraining corpus directory")
    p.add_argument("--domain", help="domain pretraining corpus directory")
    p.add_argument("--setup", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--grid", help="hyperparameter grid JSON (array of TrainConfig fields)")
    p.add_argument("--cv-folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("classify", help="classify a patch manifest")
    p.add_argument("--manifest", required=True, help="patch manifest CSV")
    p.add_argument("--checkpoint", help="MiniNet checkpoint")
    p.add_argument("--predictions", help="external predictions CSV")
    p.add_argument("--out", required=True, help="output predictions CSV")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("score", help="run the slide pipeline: mask, tile, classify, score")
    p.add_argument("--slides", required=True, help="directory of slide PPMs")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="MiniNet checkpoint")
    p.add_argument("--predictions", help="external predictions CSV")
    p.add_argument("--oracle", action="store_true",
                   help="classify from each slide's annotation JSON (ground truth)")
    p.add_argument("--truth", help="truth CSV (slide_id,true_tsr_percent); "
                                   "defaults to <slides>/truth.csv when present")
    p.add_argument("--min-coverage", type=float, default=0.75)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--reference", help="reference stain profile JSON")
    p.add_argument("--stain-fit", choices=["patch", "slide"], default="patch")
    p.add_argument("--strict", action="store_true", help="abort the batch on the first slide error")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--see-divisor", choices=["n", "n-2"], default="n")
    p.add_argument("--std-ddof", type=int, choices=[0, 1], default=0)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("evaluate", help="evaluate scores.csv against true TSR values")
    p.add_argument("--scores", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True, help="output eval.json path")
    p.add_argument("--see-divisor", choices=["n", "n-2"], default="n")
    p.add_argument("--std-ddof", type=int, choices=[0, 1], default=0)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="render human-readable tables from JSON reports")
    p.add_argument("--eval", help="eval.json from score/evaluate")
    p.add_argument("--train-report", help="training_report.json from train")
    p.add_argument("--out", help="also write the report text here")
    p.set_defaults(func=_cmd_report)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Seed subcommand defaults from --config before the real parse."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return argv
    path = argv[idx + 1]
    config = json.loads(_require_file(path, "config file").read_text(encoding="utf-8"))
    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    for name, sub in sub_actions[0].choices.items():
        section = {**{k: v for k, v in config.items() if not isinstance(v, dict)},
                   **config.get(name, {})}
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()
                            if k.replace("-", "_") in known})
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TsrPipeError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
