"""Command-line pipeline: data generation, training, evaluation, compression.

Subcommands:
    gen-data  --seed --duration-s --out
    train     --model --config --data --out
    eval      --model-file --data --mode --report [--predictions]
    compress  prune --ratio --in --out | quantize --format --in --out
    bench     --models --data --repeat --out

``LDYN_SEED`` overrides ``--seed`` wherever a seed applies. Every command
writes the resolved configuration next to its output artifact
(``<out>.config.json``) and exits nonzero with a one-line diagnostic on any
validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import compress as compress_mod
from . import data as data_mod
from . import evaluate as eval_mod
from .errors import LatdynError
from .jepa import CLOSED_LOOP, TEACHER_FORCED
from .train import RunConfig, train_jepa, train_lstm

ENV_SEED = "LDYN_SEED"


def _env_seed(seed: int) -> int:
    raw = os.environ.get(ENV_SEED)
    if raw is None:
        return seed
    try:
        return int(raw)
    except ValueError:
        raise LatdynError(f"{ENV_SEED} must be an integer, got {raw!r}") from None


def _echo_config(artifact: Path, resolved: dict) -> None:
    Path(f"{artifact}.config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def cmd_gen_data(args) -> int:
    seed = _env_seed(args.seed)
    records = data_mod.generate_synthetic_cycle(seed, args.duration_s)
    out = Path(args.out)
    data_mod.save_csv(records, out)
    _echo_config(out, {"command": "gen-data", "seed": seed, "duration_s": args.duration_s})
    print(f"wrote {len(records)} records to {out}")
    return 0


def _load_run_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise LatdynError(f"{args.config}: config must be a JSON object")
    if args.model:
        raw["model"] = args.model
    raw.setdefault("model", "jepa")
    cfg = RunConfig.from_dict(raw)
    seed = _env_seed(cfg.seed)
    if seed != cfg.seed:
        raw["seed"] = seed
        cfg = RunConfig.from_dict(raw)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    records = data_mod.load_csv(args.data)
    out = Path(args.out)

    if cfg.model == "jepa":
        result = train_jepa(records, cfg)
        archive = compress_mod.jepa_to_archive(
            result.jepa_model, result.normalizer, extra={"train_config": cfg.to_dict()}
        )
    else:
        result = train_lstm(records, cfg)
        archive = compress_mod.lstm_to_archive(
            result.lstm_spec,
            result.lstm_params,
            result.normalizer,
            extra={"train_config": cfg.to_dict()},
        )
    compress_mod.save_archive(archive, out)
    _echo_config(out, cfg.to_dict())

    log_path = Path(f"{out}.train_log.csv")
    if cfg.model == "jepa":
        cols = ["step", "variance", "invariance", "covariance", "cross_covariance", "total"]
    else:
        cols = ["step", "total"]
    _write_csv(log_path, cols, [dict(zip(cols, row)) for row in result.train_log])
    if result.decoder_log:
        dcols = ["decoder", "step", "mse"]
        _write_csv(
            Path(f"{out}.decoder_log.csv"),
            dcols,
            [dict(zip(dcols, row)) for row in result.decoder_log],
        )

    if result.diverged:
        print(f"training diverged (non-finite loss); wrote last-good checkpoint to {out}", file=sys.stderr)
        return 3
    final = result.train_log[-1][-1] if result.train_log else float("nan")
    print(f"trained {cfg.model} for {cfg.epochs} epochs, final loss {final:.6g}, archive {out}")
    return 0


def cmd_eval(args) -> int:
    archive = compress_mod.load_archive(args.model_file)
    records = data_mod.load_csv(args.data)
    normalizer = archive.get_normalizer()
    modes = [args.mode] if args.mode != "both" else [TEACHER_FORCED, CLOSED_LOOP]

    results = []
    if archive.kind == "jepa":
        model = compress_mod.archive_to_jepa(archive)
        for mode in modes:
            results.append(eval_mod.evaluate_jepa(model, normalizer, records, mode=mode))
        start = model.config.t_past
    else:
        spec, params = compress_mod.archive_to_lstm(archive)
        # Input-only model: no emission feedback, both modes coincide.
        base = eval_mod.evaluate_lstm(spec, params, normalizer, records, start=spec.timesteps)
        for mode in modes:
            row = eval_mod.EvalResult(
                name=base.name,
                mode=mode,
                start=base.start,
                predictions=base.predictions,
                targets=base.targets,
                per_species_mse=base.per_species_mse,
                wmse=base.wmse,
            )
            results.append(row)
        start = spec.timesteps

    persistence = eval_mod.evaluate_persistence(records, normalizer, start=start)
    report = Path(args.report)
    rows = [r.report_row() for r in results] + [persistence.report_row()]
    _write_csv(report, eval_mod.REPORT_COLUMNS, rows)
    _echo_config(report, {"command": "eval", "model_file": str(args.model_file), "mode": args.mode})

    if args.predictions:
        _write_predictions(Path(args.predictions), records, results[0])
    for row in rows:
        print(
            f"{row['model']:>12s} [{row['mode']}] wmse={row['wmse']:.6g} "
            + " ".join(f"{sp}={row[f'mse_{sp}']:.3g}" for sp in data_mod.SPECIES)
        )
    return 0


def _write_predictions(path: Path, records, result: eval_mod.EvalResult) -> None:
    """Per-timestep actual-vs-predicted table (normalized scale) for plotting."""
    cols = ["time_s"]
    for sp in data_mod.SPECIES:
        cols += [f"{sp}_actual", f"{sp}_predicted"]
    rows = []
    for i in range(result.predictions.shape[0]):
        rec = records[result.start + i]
        row = {"time_s": rec.time_s}
        for j, sp in enumerate(data_mod.SPECIES):
            row[f"{sp}_actual"] = result.targets[i, j]
            row[f"{sp}_predicted"] = result.predictions[i, j]
        rows.append(row)
    _write_csv(path, cols, rows)


def cmd_compress(args) -> int:
    archive = compress_mod.load_archive(args.in_path)
    out = Path(args.out)
    if args.action == "prune":
        model = compress_mod.archive_to_jepa(archive)
        pruned, report = compress_mod.prune_structured(model, args.ratio)
        extra = dict(archive.extra)
        extra["prune_ratio"] = args.ratio
        extra["prune_report"] = {
            "params_before": report.params_before,
            "params_after": report.params_after,
            "layers": [
                {
                    "component": li.component,
                    "layer": li.layer,
                    "width_before": li.width_before,
                    "kept": li.kept,
                    "removed": li.removed,
                }
                for li in report.layers
            ],
        }
        new_archive = compress_mod.jepa_to_archive(pruned, archive.get_normalizer(), extra=extra)
        compress_mod.save_archive(new_archive, out)
        _echo_config(out, {"command": "compress-prune", "ratio": args.ratio, "in": str(args.in_path)})
        print(report.summary())
    else:
        quantized = compress_mod.quantize_archive(archive, args.format)
        compress_mod.save_archive(quantized, out)
        _echo_config(
            out, {"command": "compress-quantize", "format": args.format, "in": str(args.in_path)}
        )
        payload = quantized.payload_bytes()
        for e in quantized.entries[:1]:
            if e.scale is not None:
                print(f"per-tensor affine int8, e.g. {e.name}: scale={e.scale:.3g} zero_point={e.zero_point}")
        print(f"quantized to {args.format}: payload {payload} bytes -> {out}")
    return 0


def cmd_bench(args) -> int:
    models_dir = Path(args.models)
    paths = sorted(models_dir.glob("*.ldyn"))
    if not paths:
        raise LatdynError(f"no .ldyn archives found in {models_dir}")
    records = data_mod.load_csv(args.data)
    rows = compress_mod.benchmark(paths, records, repeats=args.repeat)
    out = Path(args.out)
    _write_csv(out, compress_mod.BENCH_COLUMNS, rows)
    _echo_config(
        out,
        {"command": "bench", "models": str(models_dir), "repeat": args.repeat, "data": str(args.data)},
    )
    for row in rows:
        print(
            f"{row['model']:>24s} {row['scheme']:>12s} {row['size_bytes']:>10d} B "
            f"{row['latency_ms_per_step']:8.3f} ms/step wmse={row['wmse']:.6g}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latdyn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic drive cycle CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-s", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and save an archive")
    p.add_argument("--model", choices=["jepa", "lstm"], default=None)
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate an archive on a cycle")
    p.add_argument("--model-file", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=[TEACHER_FORCED, CLOSED_LOOP, "both"], default=TEACHER_FORCED)
    p.add_argument("--report", required=True)
    p.add_argument("--predictions", default=None, help="optional per-timestep prediction CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compress", help="prune or quantize an archive")
    csub = p.add_subparsers(dest="action", required=True)
    cp = csub.add_parser("prune")
    cp.add_argument("--ratio", type=float, required=True)
    cp.add_argument("--in", dest="in_path", required=True)
    cp.add_argument("--out", required=True)
    cp.set_defaults(func=cmd_compress, action="prune")
    cq = csub.add_parser("quantize")
    cq.add_argument("--format", choices=["bf16", "int8"], required=True)
    cq.add_argument("--in", dest="in_path", required=True)
    cq.add_argument("--out", required=True)
    cq.set_defaults(func=cmd_compress, action="quantize")

    p = sub.add_parser("bench", help="size/latency/accuracy report over archives")
    p.add_argument("--models", required=True, help="directory of .ldyn archives")
    p.add_argument("--data", required=True)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LatdynError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
