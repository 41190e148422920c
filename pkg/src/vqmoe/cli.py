"""Command-line front end: synth, split, mos, train, eval, gmad, gradcheck.

One executable covers the whole pipeline on precomputed feature tensors.
Every command writes a ``resolved_config.json`` echo into its output
directory so a run can be reproduced from the echo plus its seed, and no
command ever modifies its input files.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    SplitSpec,
    gen_synthetic,
    load_samples,
    make_splits,
    read_manifest,
)
from .errors import (
    ConfigError,
    DegenerateInputError,
    FormatError,
    NumericalError,
    ShapeError,
    UsageError,
)
from .gmad import gmad_pairs
from .gradcheck import DEFAULT_STEP, DEFAULT_TOL, SUITE_SEED, micro_config, run_gradient_check
from .metrics import MetricReport, aggregate_reports, format_table, metric_report
from .model import ModelConfig, init_params
from .mos import RatingRecord, consolidate
from .training import (
    LossWeights,
    TrainSchedule,
    set_param_state,
    train,
    predict,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# Baseline shape set used when no config file is given: small enough for
# quick desk runs, large enough to exercise every branch.
DEFAULT_MODEL = {
    "t_frames": 4,
    "height": 4,
    "width": 4,
    "l_tokens": 4,
    "channels": 16,
    "m_spatial": 4,
    "n_temporal": 4,
    "z_alignment": 4,
    "k": 2,
}

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_SCHEDULE_KEYS = {f.name for f in fields(TrainSchedule)}
_WEIGHT_KEYS = {"weight_" + f.name for f in fields(LossWeights)}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via UsageError (exit 1)."""

    def error(self, message):  # noqa: A003 - argparse API name
        raise UsageError(message)


def _parse_value(text: str):
    """Interpret a config value: JSON literal if possible, else bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` config file.

    Blank lines and ``#`` comments are ignored. Values use JSON literals
    (numbers, true/false, null, quoted strings); anything unparseable is
    kept as a bare string. Unknown keys are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"config file not found: {path}")
    out: dict = {}
    known = _MODEL_KEYS | _SCHEDULE_KEYS | _WEIGHT_KEYS
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
        out[key] = _parse_value(value.strip())
    return out


def resolve_run_config(
    config_path=None, dtype: str | None = None, seed: int | None = None
) -> tuple[ModelConfig, TrainSchedule, LossWeights]:
    """Merge defaults, the optional config file, and CLI overrides."""
    raw = read_config_file(config_path) if config_path else {}
    model_d = dict(DEFAULT_MODEL)
    model_d.update({k: v for k, v in raw.items() if k in _MODEL_KEYS})
    sched_d = {k: v for k, v in raw.items() if k in _SCHEDULE_KEYS}
    weight_d = {
        k[len("weight_"):]: v for k, v in raw.items() if k in _WEIGHT_KEYS
    }
    if dtype is not None:
        model_d["dtype"] = dtype
    if seed is not None:
        sched_d["seed"] = seed
    return (
        ModelConfig.from_dict(model_d),
        TrainSchedule(**sched_d),
        LossWeights(**weight_d),
    )


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _echo_config(out_dir, command: str, args: argparse.Namespace, **extra) -> None:
    """Write the resolved-config echo that makes the run reproducible."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {}
    for key, value in sorted(vars(args).items()):
        if key == "func":
            continue
        if isinstance(value, Path):
            value = str(value.resolve())
        resolved[key] = value
    payload = {"command": command, "args": resolved}
    payload.update(extra)
    _write_json(out_dir / "resolved_config.json", payload)


def _read_csv(path, columns: tuple[str, ...]) -> list[dict]:
    """Read a CSV with exactly the given header columns."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty file, expected header {columns}")
        if tuple(reader.fieldnames) != columns:
            raise FormatError(
                f"{path}: expected header {','.join(columns)}, "
                f"got {','.join(reader.fieldnames)}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise FormatError(f"{path}:{lineno}: wrong number of fields")
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return rows


def _parse_score(text: str, path, lineno: int, integer: bool):
    try:
        return int(text) if integer else float(text)
    except ValueError:
        kind = "integer" if integer else "number"
        raise FormatError(f"{path}:{lineno}: score {text!r} is not a {kind}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config, _, _ = resolve_run_config(args.config, args.dtype)
    _echo_config(args.out_dir, "synth", args, model=config.to_dict())
    records, manifest = gen_synthetic(
        config, args.n_videos, args.sigma, args.seed, args.out_dir
    )
    print(f"wrote {len(records)} videos under {Path(args.out_dir).resolve()}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_split(args) -> int:
    _echo_config(args.out_dir, "split", args)
    records = read_manifest(args.manifest)
    specs = make_splits(records, seed_count=args.seeds)
    out = Path(args.out_dir) / "splits.json"
    _write_json(out, {"splits": [s.to_dict() for s in specs]})
    first = specs[0]
    sizes = {name: len(first.ids_for(name)) for name in ("train", "val", "test")}
    print(f"{len(records)} videos -> {len(specs)} split seeds (sizes {sizes})")
    print(f"splits: {out}")
    return EXIT_OK


def _load_ratings_csv(path) -> list[RatingRecord]:
    rows = _read_csv(path, ("annotator_id", "video_id", "dimension", "score"))
    records = []
    for lineno, row in enumerate(rows, start=2):
        score = _parse_score(row["score"], path, lineno, integer=True)
        records.append(
            RatingRecord(
                annotator_id=row["annotator_id"],
                video_id=row["video_id"],
                dimension=row["dimension"],
                score=score,
            )
        )
    return records


def cmd_mos(args) -> int:
    _echo_config(args.out_dir, "mos", args)
    ratings = _load_ratings_csv(args.ratings)
    report, labels = consolidate(ratings)
    out_dir = Path(args.out_dir)
    with (out_dir / "labels.jsonl").open("w") as fh:
        for video_id in sorted(labels):
            fh.write(json.dumps({"video_id": video_id, **labels[video_id]}) + "\n")
    _write_json(out_dir / "mos_report.json", report.to_dict())
    rejected = sorted(a for a, r in report.annotators.items() if r.rejected)
    print(f"consolidated {len(report.cells)} cells over {len(labels)} videos")
    print(f"rejected annotators: {rejected if rejected else 'none'}")
    header = f"{'video':<12} {'dimension':<14} {'n':>3} {'excluded':>8} {'lambda':>7} {'mos':>7}"
    print(header)
    print("-" * len(header))
    for key in sorted(report.cells):
        cell = report.cells[key]
        lam = f"{cell.lam:.3f}" if cell.lam is not None else "-"
        print(
            f"{cell.video_id:<12} {cell.dimension:<14} {cell.n_ratings:>3d} "
            f"{len(cell.excluded):>8d} {lam:>7} {cell.mos:>7.4f}"
        )
    return EXIT_OK


def _load_split_spec(path, seed: int) -> SplitSpec:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"split file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    specs = [SplitSpec.from_dict(d) for d in payload.get("splits", [])]
    for spec in specs:
        if spec.seed == seed:
            return spec
    raise FormatError(f"{path}: no split with seed {seed}")


def _load_all_split_specs(path) -> list[SplitSpec]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"split file not found: {path}")
    payload = json.loads(path.read_text())
    specs = [SplitSpec.from_dict(d) for d in payload.get("splits", [])]
    if not specs:
        raise FormatError(f"{path}: no splits")
    return specs


def _samples_for(records, ids, base_dir):
    by_id = {r.video_id: r for r in records}
    missing = [v for v in ids if v not in by_id]
    if missing:
        raise FormatError(f"split references unknown videos: {missing[:5]}")
    return load_samples([by_id[v] for v in ids], base_dir)


def cmd_train(args) -> int:
    config, schedule, weights = resolve_run_config(args.config, args.dtype, args.seed)
    _echo_config(
        args.out_dir,
        "train",
        args,
        model=config.to_dict(),
        schedule=schedule.to_dict(),
        weights=weights.as_dict(),
    )
    records = read_manifest(args.manifest)
    base_dir = Path(args.manifest).parent
    spec = _load_split_spec(args.split, args.split_seed)
    train_samples = _samples_for(records, spec.ids_for("train"), base_dir)
    val_samples = _samples_for(records, spec.ids_for("val"), base_dir)
    out_dir = Path(args.out_dir)
    result = train(
        train_samples,
        val_samples,
        config,
        schedule=schedule,
        weights=weights,
        log_path=out_dir / "train_log.jsonl",
        init_scale=args.init_scale,
    )
    save_checkpoint(
        out_dir / "checkpoint_best.zip", config, result.best_state,
        epoch=result.best_epoch,
    )
    save_checkpoint(
        out_dir / "checkpoint_final.zip", config, result.final_state,
        epoch=schedule.epochs - 1,
    )
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_srcc": result.best_val,
        "aborted": result.aborted,
        "abort_reason": result.abort_reason,
        "epochs_run": len(result.log),
    }
    _write_json(out_dir / "train_summary.json", summary)
    if result.aborted:
        print(f"training aborted: {result.abort_reason}", file=sys.stderr)
        return EXIT_NUMERIC
    print(
        f"trained {len(result.log)} epochs; best epoch {result.best_epoch} "
        f"(mean val SRCC {result.best_val:.4f})"
    )
    print(f"checkpoints: {out_dir / 'checkpoint_best.zip'}")
    return EXIT_OK


def _label_pairs_from_predictions(rows, records, path) -> dict:
    """Pair a predictions CSV against manifest labels, dimension by dimension."""
    by_id = {r.video_id: r for r in records}
    dim_map = {
        "spatial": "q_spatial",
        "temporal": "q_temporal",
        "overall_percept": "q_overall_percept",
        "sentence": "q_sentence",
    }
    collected: dict[str, tuple[list, list]] = {}
    for lineno, row in enumerate(rows, start=2):
        vid, dim = row["video_id"], row["dimension"]
        if vid not in by_id:
            raise FormatError(f"{path}:{lineno}: unknown video {vid!r}")
        score = _parse_score(row["score"], path, lineno, integer=False)
        labels = by_id[vid].labels
        if dim in dim_map:
            target = labels[dim_map[dim]]
            key = dim
        elif dim.startswith("word[") and dim.endswith("]"):
            try:
                pos = int(dim[5:-1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad dimension {dim!r}") from None
            words = labels["q_word"]
            if pos < 1 or pos > len(words):
                raise FormatError(
                    f"{path}:{lineno}: word position {pos} outside 1..{len(words)}"
                )
            target = words[pos - 1]
            key = "word"
        else:
            raise FormatError(f"{path}:{lineno}: unknown dimension {dim!r}")
        if target is None:
            continue  # unlabeled (masked) positions carry no ground truth
        preds, targets = collected.setdefault(key, ([], []))
        preds.append(score)
        targets.append(float(target))
    pairs = {k: v for k, v in collected.items() if len(v[0]) >= 2}
    if not pairs:
        raise FormatError(f"{path}: no dimension has 2+ labeled predictions")
    return pairs


def _pairs_from_model(samples, params) -> dict:
    """Predict over samples and pair every head with its targets."""
    bundles = predict(params, samples)
    collected: dict[str, tuple[list, list]] = {}

    def put(key, pred, target):
        if target is None:
            return
        preds, targets = collected.setdefault(key, ([], []))
        preds.append(float(pred))
        targets.append(float(target))

    for bundle, sample in zip(bundles, samples):
        t = sample.targets
        if bundle.q_spatial is not None:
            put("spatial", bundle.q_spatial.item(), t["q_spatial"])
            put("temporal", bundle.q_temporal.item(), t["q_temporal"])
        put("overall_percept", bundle.q_overall_percept.item(), t["q_overall_percept"])
        if bundle.q_sentence is not None:
            put("sentence", bundle.q_sentence.item(), t["q_sentence"])
        if bundle.q_word is not None:
            values = bundle.q_word.tolist()
            for pos, keep in enumerate(t["token_mask"]):
                if keep and t["q_word"][pos] is not None:
                    put("word", values[pos + 1], t["q_word"][pos])
    return {k: v for k, v in collected.items() if len(v[0]) >= 2}


def cmd_eval(args) -> int:
    if (args.predictions is None) == (args.checkpoint is None):
        raise UsageError("provide exactly one of --predictions or --checkpoint")
    _echo_config(args.out_dir, "eval", args)
    records = read_manifest(args.manifest)
    out_dir = Path(args.out_dir)

    if args.predictions is not None:
        rows = _read_csv(args.predictions, ("video_id", "dimension", "score"))
        pairs = _label_pairs_from_predictions(rows, records, args.predictions)
        report = metric_report(pairs, split_id="predictions",
                               mapped_plcc=args.mapped_plcc)
        _write_json(out_dir / "eval_report.json", report.to_dict())
        print(format_table(report))
        return EXIT_OK

    if args.split is None:
        raise UsageError("--checkpoint evaluation requires --split")
    loaded = load_checkpoint(args.checkpoint)
    params = init_params(loaded.config, seed=0)
    set_param_state(params, loaded.state)
    base_dir = Path(args.manifest).parent
    if args.all_splits:
        specs = _load_all_split_specs(args.split)
    else:
        specs = [_load_split_spec(args.split, args.split_seed)]
    reports: list[MetricReport] = []
    for spec in specs:
        samples = _samples_for(records, spec.ids_for(args.split_name), base_dir)
        pairs = _pairs_from_model(samples, params)
        if not pairs:
            raise ShapeError(f"split seed {spec.seed}: no dimension has 2+ samples")
        reports.append(
            metric_report(pairs, split_id=f"seed-{spec.seed}",
                          mapped_plcc=args.mapped_plcc)
        )
    payload = {"splits": [r.to_dict() for r in reports]}
    if len(reports) > 1:
        agg = aggregate_reports(reports)
        payload["aggregate"] = agg.to_dict()
        print(f"averaged over {len(reports)} splits ({args.split_name} portion):")
        print(format_table(agg))
    else:
        print(f"split seed {specs[0].seed} ({args.split_name} portion):")
        print(format_table(reports[0]))
    _write_json(out_dir / "eval_report.json", payload)
    return EXIT_OK


def _load_scores_csv(path) -> dict[str, float]:
    rows = _read_csv(path, ("video_id", "score"))
    scores: dict[str, float] = {}
    for lineno, row in enumerate(rows, start=2):
        vid = row["video_id"]
        if vid in scores:
            raise FormatError(f"{path}:{lineno}: duplicate video {vid!r}")
        scores[vid] = _parse_score(row["score"], path, lineno, integer=False)
    return scores


def cmd_gmad(args) -> int:
    _echo_config(args.out_dir, "gmad", args)
    defender = _load_scores_csv(args.defender)
    attacker = _load_scores_csv(args.attacker)
    payload = {}
    for orientation in ("standard", "swapped"):
        pairs = gmad_pairs(
            defender,
            attacker,
            eps=args.eps,
            top_n=args.top_n,
            defender_id=args.defender_id,
            attacker_id=args.attacker_id,
            orientation=orientation,
        )
        payload[orientation] = [p.to_dict() for p in pairs]
        print(f"[{orientation}] top {len(pairs)} pair(s):")
        for p in pairs:
            print(
                f"  {p.video_a} vs {p.video_b}: defender delta "
                f"{p.defender_delta:+.4f}, attacker delta {p.attacker_delta:+.4f}"
            )
    _write_json(Path(args.out_dir) / "gmad_pairs.json", payload)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo_config(args.out_dir, "gradcheck", args)
    ks = [args.k] if args.k is not None else [1, 2]
    payload = {}
    failed = False
    for k in ks:
        report = run_gradient_check(
            config=micro_config(k=k),
            seed=args.seed,
            batch_size=args.batch_size,
            step=args.step,
            tol=args.tol,
        )
        payload[f"k={k}"] = report.to_dict()
        print(f"routing width k={k}:")
        for line in report.format_lines():
            print("  " + line)
        failed = failed or not report.passed
    _write_json(Path(args.out_dir) / "gradcheck_report.json", payload)
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="vqmoe",
        description="Dual-path video-quality model: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_shared(p, dtype=True, config=True):
        p.add_argument("--out-dir", required=True, type=Path,
                       help="directory for artifacts and the resolved-config echo")
        if config:
            p.add_argument("--config", type=Path, default=None,
                           help="flat key = value config file")
        if dtype:
            p.add_argument("--dtype", choices=("float32", "float64"), default=None,
                           help="override the configured tensor dtype")

    p = sub.add_parser("synth", help="generate a synthetic feature corpus")
    add_shared(p)
    p.add_argument("--n-videos", type=int, default=40)
    p.add_argument("--sigma", type=float, default=0.1,
                   help="feature noise level (0 plants labels exactly)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="create stratified train/val/test splits")
    add_shared(p, dtype=False, config=False)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--seeds", type=int, default=10,
                   help="number of independent split seeds")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("mos", help="consolidate subjective ratings into labels")
    add_shared(p, dtype=False, config=False)
    p.add_argument("--ratings", required=True, type=Path,
                   help="CSV with header annotator_id,video_id,dimension,score")
    p.set_defaults(func=cmd_mos)

    p = sub.add_parser("train", help="train the model on one split")
    add_shared(p)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--split", required=True, type=Path,
                   help="splits.json produced by the split command")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=None,
                   help="override the schedule seed")
    p.add_argument("--init-scale", type=float, default=0.05)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions or a checkpoint")
    add_shared(p, dtype=False, config=False)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--predictions", type=Path, default=None,
                   help="CSV with header video_id,dimension,score")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--split", type=Path, default=None)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--all-splits", action="store_true",
                   help="average the report over every split seed")
    p.add_argument("--split-name", choices=("train", "val", "test"),
                   default="test")
    p.add_argument("--mapped-plcc", action="store_true",
                   help="fit the logistic mapping before PLCC/RMSE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gmad", help="adversarial pair selection between two models")
    add_shared(p, dtype=False, config=False)
    p.add_argument("--defender", required=True, type=Path,
                   help="CSV with header video_id,score")
    p.add_argument("--attacker", required=True, type=Path)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--top-n", type=int, default=1)
    p.add_argument("--defender-id", default="defender")
    p.add_argument("--attacker-id", default="attacker")
    p.set_defaults(func=cmd_gmad)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    add_shared(p, dtype=False, config=False)
    p.add_argument("--k", type=int, default=None,
                   help="routing width (default: run both 1 and 2)")
    p.add_argument("--seed", type=int, default=SUITE_SEED)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, DegenerateInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
