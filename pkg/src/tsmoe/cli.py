"""Command-line surface: training, evaluation, and diagnostic dumps.

Every run directory receives the fully resolved configuration alongside the
delimited outputs; figures are rendered next to them unless disabled.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, restore_model, save_checkpoint
from .config import OUT_DIR_ENV, ConfigError, RunConfig, parse_config_file, resolve_config
from .data import CsvParseError, contiguous_split
from .gradcheck import grad_check
from .metrics import stable_json
from .model import TSMoE, trace_cka, routing_table
from .preprocess import SeriesBatch
from .router import EVAL, TRAIN
from .tasks import TaskData, build_task_data, evaluate
from .training import DivergenceError, train_model
from . import report


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value config file")
    for f in fields(RunConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}")


def _resolve(args) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = value
    if getattr(args, "task_name", None):
        overrides["task"] = args.task_name
    config = resolve_config(file_values, overrides)
    if "out_dir" not in overrides:
        env = os.environ.get(OUT_DIR_ENV)
        if env:
            config.out_dir = env
    return config


def _prepare_out_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(config.to_file_text())
    return out


def _write_loss_log(rows: list[dict], path: Path):
    lines = ["step,task_loss,l_tem,l_cha,total"]
    for r in rows:
        lines.append(
            f"{r['step']},{format(r['task_loss'], '.17g')},{format(r['l_tem'], '.17g')},"
            f"{format(r['l_cha'], '.17g')},{format(r['total'], '.17g')}"
        )
    path.write_text("\n".join(lines) + "\n")


def _eval_figure(result, config: RunConfig, out: Path):
    if not config.figures or not result.figure_payload:
        return
    if config.task == "forecast":
        report.render_forecast(result.figure_payload, out / "forecast.png")
    elif config.task == "impute":
        report.render_imputation(result.figure_payload, out / "imputation.png")
    elif config.task == "anomaly":
        report.render_anomaly(result.figure_payload, out / "anomaly_scores.png")
    else:
        report.render_confusion(result.figure_payload["confusion"], out / "confusion.png")


def _build_model(config: RunConfig, data: TaskData) -> TSMoE:
    return TSMoE(config.model_config(n_channels=data.n_channels))


def _first_eval_batch(config: RunConfig, data: TaskData):
    """The input the diagnostic commands run on: first test window/instance."""
    if config.task == "classify":
        return data.classification.test[0]
    _, _, test_region = contiguous_split(data.series.length, config.split_ratios())
    start = max(0, test_region[0] - config.lookback)
    values = data.series.values[:, start:start + config.lookback]
    return SeriesBatch(values, list(data.series.channel_names))


def cmd_train(args) -> int:
    config = _resolve(args)
    out = _prepare_out_dir(config)
    data = build_task_data(config)
    model = _build_model(config, data)
    result = train_model(
        model,
        data.train_examples,
        data.val_examples,
        steps=config.steps,
        lr=config.lr,
        batch_size=config.batch_size,
        seed=config.seed,
        val_every=config.val_every,
    )
    _write_loss_log(result.rows, out / "loss_log.csv")
    save_checkpoint(out / "checkpoint", model.config, model.parameters())
    if result.best_params:
        saved = {p.name: p.data.copy() for p in model.parameters()}
        for p in model.parameters():
            p.data = result.best_params[p.name].copy()
        save_checkpoint(out / "checkpoint_best", model.config, model.parameters())
        for p in model.parameters():
            p.data = saved[p.name]
    eval_result = evaluate(model, data, config, split="val")
    (out / "metrics_val.json").write_text(eval_result.report.to_json() + "\n")
    if config.figures:
        report.render_loss_curves(result.rows, out / "loss_curves.png")
        _eval_figure(eval_result, config, out)
    print(f"trained {config.steps} steps; best val {result.best_val:.6g} "
          f"at step {result.best_step}; artifacts in {out}")
    return 0


def _load_for_eval(args):
    config = _resolve(args)
    out = _prepare_out_dir(config)
    data = build_task_data(config)
    model = _build_model(config, data)
    stem = args.checkpoint or str(Path(config.out_dir) / "checkpoint")
    restore_model(model, stem)
    return config, out, data, model


def cmd_eval(args) -> int:
    config, out, data, model = _load_for_eval(args)
    result = evaluate(model, data, config, split="test")
    (out / "metrics.json").write_text(result.report.to_json() + "\n")
    _eval_figure(result, config, out)
    print(result.report.to_json())
    return 0


def cmd_inspect_routing(args) -> int:
    config, out, data, model = _load_for_eval(args)
    batch = _first_eval_batch(config, data)
    trace = model.forward(batch, EVAL)
    mc = model.config
    rows = routing_table(trace, mc.n_channels, mc.n_patches)
    lines = ["layer,channel,patch,expert,weight"]
    for layer, channel, patch, expert, weight in rows:
        lines.append(f"{layer},{channel},{patch},{expert},{format(weight, '.17g')}")
    (out / "routing.csv").write_text("\n".join(lines) + "\n")
    if config.figures:
        report.render_routing_heatmap(
            rows, mc.layers, mc.n_channels, mc.n_patches, mc.n_routed,
            out / "routing_heatmap.png",
        )
    print(f"wrote {len(rows)} routing rows to {out / 'routing.csv'}")
    return 0


def cmd_cka(args) -> int:
    config, out, data, model = _load_for_eval(args)
    batch = _first_eval_batch(config, data)
    trace = model.forward(batch, EVAL)
    pairs = trace_cka(trace)
    (out / "cka.json").write_text(stable_json(pairs) + "\n")
    if config.figures:
        report.render_cka(pairs, out / "cka.png")
    print(stable_json(pairs))
    return 0


def cmd_gradcheck(args) -> int:
    config = _resolve(args)
    data = build_task_data(config)
    model = _build_model(config, data)
    limit = 100_000
    if model.param_count() > limit:
        print(
            f"refusing gradient check: {model.param_count()} parameters exceeds "
            f"the finite-difference bound of {limit}",
            file=sys.stderr,
        )
        return 2
    batch, target = data.train_examples[0]
    mc = model.config
    n_tokens = mc.n_channels * mc.n_patches
    noise_rng = np.random.default_rng(config.seed + 1)
    noise = [noise_rng.standard_normal((n_tokens, mc.n_routed)) for _ in range(mc.layers)]

    def objective():
        trace = model.forward(batch, TRAIN, noise=noise)
        loss, _ = model.total_loss(trace, target)
        return loss

    rel_tol = float(args.rel_tol)
    reports = grad_check(objective, model.parameters(), rel_tol=rel_tol)
    failed = [r for r in reports if not r.passed(rel_tol)]
    for r in reports:
        status = "PASS" if r.passed(rel_tol) else "FAIL"
        print(f"{status} {r.name:32s} entries={r.size:5d} max_rel_err={r.max_rel_err:.3e}")
    if failed:
        names = ", ".join(r.name for r in failed)
        print(f"gradient check failed for: {names}", file=sys.stderr)
        return 1
    print(f"gradient check passed for all {len(reports)} parameter groups "
          f"({model.param_count()} entries) at rel_tol {rel_tol:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsmoe",
        description="Patch-tokenized MoE transformer for time series tasks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, checkpoint_flag=False, task_name=None):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if checkpoint_flag:
            p.add_argument("--checkpoint", help="checkpoint stem (default: <out_dir>/checkpoint)")
        if name == "gradcheck":
            p.add_argument("--rel-tol", default="1e-4")
        p.set_defaults(func=func, task_name=task_name)
        return p

    command("train", cmd_train, "train a model and write run artifacts")
    command("eval", cmd_eval, "evaluate a checkpoint on the test split", True)
    command("forecast", cmd_eval, "forecast-task evaluation", True, "forecast")
    command("impute", cmd_eval, "imputation-task evaluation", True, "impute")
    command("detect", cmd_eval, "anomaly-detection evaluation", True, "anomaly")
    command("classify", cmd_eval, "classification evaluation", True, "classify")
    command("inspect-routing", cmd_inspect_routing,
            "dump per-token gate weights for one input", True)
    command("cka", cmd_cka, "layer representation similarity for one input", True)
    command("gradcheck", cmd_gradcheck,
            "verify model gradients against central differences")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, CheckpointError, CsvParseError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
