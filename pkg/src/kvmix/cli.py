"""Command-line harness: generate, tag, calibrate, allocate, sweep, replay.

Every command reads and writes plain files (JSON plus raw float blobs), so
the whole pipeline composes in shell scripts and golden-file tests. Report
commands additionally render matplotlib figures next to the CSV output.

Exit codes: 0 success, 2 validation error, 3 capacity error, 4 infeasible
allocation.
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import allocation as alloc_mod
from . import calibration as calib_mod
from .attention import attention_full, flash_decode, output_mse
from .capture import generate_synthetic_capture, load_capture, save_capture
from .errors import CapacityError, InfeasibleBudgetError, ValidationError
from .pool import MixedPrecisionPool, PoolConfig, init_pool
from .report import render_replay_mse, render_sweep_curve, write_csv, write_json
from .tags import tag_tokens
from .traces import (
    default_template,
    generate_synthetic_trace,
    load_template,
    load_trace,
    save_template,
    save_trace,
)

CALIBRATION_FRACTION = 0.05
CALIBRATION_MIN = 3


@click.group()
def cli():
    """Mixed-precision KV-cache toolkit."""


@cli.command("generate")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--n-traces", default=4, show_default=True, type=int)
@click.option("--n-turns", default=3, show_default=True, type=int)
@click.option("--n-layers", default=2, show_default=True, type=int)
@click.option("--n-heads", default=4, show_default=True, type=int)
@click.option("--n-kv-heads", default=2, show_default=True, type=int)
@click.option("--head-dim", default=32, show_default=True, type=int)
@click.option("--group-size", default=32, show_default=True, type=int)
@click.option("--include-images", is_flag=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def cmd_generate(seed, n_traces, n_turns, n_layers, n_heads, n_kv_heads,
                 head_dim, group_size, include_images, out):
    """Write a synthetic template, traces, and KV captures."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    template = default_template()
    save_template(template, root / "template.json")
    for i in range(n_traces):
        trace = generate_synthetic_trace(
            seed + i, n_turns, template, include_images=include_images,
            request_id=f"req-{i:03d}",
        )
        save_trace(trace, root / f"trace_{i:03d}.json")
        tags = tag_tokens(trace, template)
        capture = generate_synthetic_capture(
            trace, tags, n_layers, n_heads, n_kv_heads, head_dim,
            seed=seed * 1000 + i, group_len=group_size,
        )
        save_capture(capture, root / f"capture_{i:03d}")
    click.echo(f"wrote {n_traces} traces + captures under {root}")


@cli.command("tag")
@click.option("--trace", "trace_path", required=True, type=click.Path(exists=True))
@click.option("--template", "template_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(dir_okay=False))
def cmd_tag(trace_path, template_path, out):
    """Tag one trace; emit the tag-code array as JSON."""
    trace = load_trace(trace_path)
    template = load_template(template_path)
    codes = tag_tokens(trace, template)
    payload = json.dumps({"request_id": trace.request_id, "tags": codes})
    if out:
        Path(out).write_text(payload)
    else:
        click.echo(payload)


def _capture_dirs(captures_root: str) -> list[Path]:
    root = Path(captures_root)
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    if not dirs:
        raise ValidationError(f"no capture directories under {root}")
    return dirs


def _select_calibration(dirs: list[Path], fraction: float, minimum: int) -> list[Path]:
    k = max(minimum, math.ceil(fraction * len(dirs)))
    return dirs[: min(k, len(dirs))]


@cli.command("calibrate")
@click.option("--captures", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--fraction", default=CALIBRATION_FRACTION, show_default=True, type=float,
              help="Fraction of the capture set used for calibration.")
@click.option("--all", "use_all", is_flag=True, help="Use every capture.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_calibrate(captures, fraction, use_all, out):
    """Build the per-tag sensitivity table from captures."""
    dirs = _capture_dirs(captures)
    if not use_all:
        dirs = _select_calibration(dirs, fraction, CALIBRATION_MIN)
    loaded = [load_capture(d) for d in dirs]
    table = calib_mod.build_table(loaded)
    calib_mod.save_table(table, out)
    click.echo(f"calibrated {len(loaded)} captures -> {out} ({len(table.counts)} active tags)")


@cli.command("allocate")
@click.option("--table", "table_path", required=True, type=click.Path(exists=True))
@click.option("--budget", required=True, type=float)
@click.option("--solver", default="auto", show_default=True,
              type=click.Choice(["exhaustive", "greedy", "auto"]))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_allocate(table_path, budget, solver, out):
    """Solve the budgeted bitwidth assignment; auto cross-checks both solvers."""
    table = calib_mod.load_table(table_path)
    result = alloc_mod.allocate(table, budget, solver)
    payload = result.to_json()
    if solver == "auto" and result.solver == "exhaustive":
        greedy = alloc_mod.allocate_greedy(table, budget)
        if result.objective > greedy.objective + 1e-12:
            raise ValidationError("exhaustive objective exceeds greedy; solver bug")
        payload["cross_check"] = {"greedy_objective": greedy.objective}
    write_json(payload, out)
    click.echo(
        f"solver={result.solver} objective={result.objective:.6g} "
        f"realized_avg={result.realized_avg:.4g} -> {out}"
    )


def _sweep_grid(spec: str) -> list[float]:
    if ":" in spec:
        lo, hi, step = (float(x) for x in spec.split(":"))
        n = int(round((hi - lo) / step))
        return [round(lo + i * step, 6) for i in range(n + 1)]
    return [float(x) for x in spec.split(",")]


@cli.command("sweep")
@click.option("--captures", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--grid", default="2.0:4.0:0.1", show_default=True,
              help="lo:hi:step or a comma-separated budget list.")
@click.option("--threshold", required=True, type=float)
@click.option("--solver", default="auto", show_default=True,
              type=click.Choice(["exhaustive", "greedy", "auto"]))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--figures/--no-figures", default=True, show_default=True)
def cmd_sweep(captures, grid, threshold, solver, out, figures):
    """Sweep the budget; pick the smallest stable B on the calibration set."""
    loaded = [load_capture(d) for d in _capture_dirs(captures)]
    table = calib_mod.build_table(loaded)

    def evaluator(allocation):
        return float(np.mean([
            calib_mod.joint_replay_mse(c, allocation.bits) for c in loaded
        ]))

    result = alloc_mod.sweep_budget(table, _sweep_grid(grid), evaluator, threshold, solver)
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    write_json(
        {
            "chosen_budget": result.chosen,
            "flagged": result.flagged,
            "baseline_score": result.baseline_score,
            "threshold": threshold,
            "curve": [{"budget": b, "score": s} for b, s in result.curve],
        },
        root / "sweep.json",
    )
    write_csv(
        [{"budget": b, "score": s} for b, s in result.curve],
        root / "sweep.csv",
        ["budget", "score"],
    )
    if figures:
        render_sweep_curve(result.curve, result.chosen, result.baseline_score,
                           root / "sweep_curve.png")
    click.echo(f"chosen budget {result.chosen}{' (flagged)' if result.flagged else ''}")


def _replay_one(capture, bits_map, split_len, pool, probe_queries):
    """Store one request in the pool, flash-decode probes, score the MSE."""
    try:
        bits = np.array([bits_map[int(t)] for t in capture.tags])
    except KeyError as exc:
        raise ValidationError(f"allocation missing tag {exc}") from exc
    table = pool.alloc(capture.request_id, bits)
    keys = np.stack([layer.k for layer in capture.layers])
    values = np.stack([layer.v for layer in capture.layers])
    pool.write_prefill(table, keys, values)
    pool.partition(table)

    per_layer = []
    for layer_idx, layer in enumerate(capture.layers):
        probes = layer.q[-probe_queries:]
        ref = attention_full(probes, layer.k, layer.v, causal=False)
        view = pool.view(layer_idx)
        decoded = np.stack([
            flash_decode(q, table, view, split_len=split_len) for q in probes
        ])
        per_layer.append(output_mse(ref, decoded))

    n_int2 = sum(1 for a in table.entries if pool.is_int2(a))
    n_int4 = len(table.entries) - n_int2
    realized = (2 * n_int2 + 4 * n_int4) / len(table.entries)
    return {
        "request_id": capture.request_id,
        "mse": float(np.mean(per_layer)),
        "per_layer_mse": per_layer,
        "realized_avg_bitwidth": realized,
        "n_int2_tokens": n_int2,
        "n_int4_tokens": n_int4,
    }


@cli.command("replay")
@click.option("--captures", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--allocation", "allocation_path", required=True, type=click.Path(exists=True))
@click.option("--split-len", default=128, show_default=True, type=int)
@click.option("--probe-queries", default=4, show_default=True, type=int)
@click.option("--pool-slots", default=None, type=int,
              help="Total pool slots; sized from the workload when omitted.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--figures/--no-figures", default=True, show_default=True)
def cmd_replay(captures, allocation_path, split_len, probe_queries, pool_slots, out, figures):
    """Mixed-precision replay: quantize, partition, flash-decode, report."""
    allocation = alloc_mod.load_allocation(allocation_path)
    loaded = [load_capture(d) for d in _capture_dirs(captures)]
    first = loaded[0]
    g = first.group_len

    # Size the pool from the actual token mix so region exhaustion cannot
    # mask a quantization bug; init_pool's B-ratio split is reported anyway.
    n2 = n4 = 0
    for capture in loaded:
        bits = np.array([allocation.bits.get(int(t), 0) for t in capture.tags])
        if 0 in bits:
            missing = sorted({int(t) for t in capture.tags} - set(allocation.bits))
            raise ValidationError(f"allocation missing tags {missing}")
        c2 = int((bits == 2).sum())
        n2 += c2 // g * g
        n4 += int((bits == 4).sum()) + c2 % g
    if pool_slots is not None:
        config = init_pool(allocation.budget, pool_slots, len(first.layers),
                           first.n_kv_heads, first.head_dim, page_size=g)
        if config.offset < n2 or config.total_slots - config.offset < n4:
            raise CapacityError(
                f"--pool-slots {pool_slots} too small for the workload", region="pool")
    else:
        config = PoolConfig(total_slots=n2 + n4, offset=n2, n_layers=len(first.layers),
                            n_kv_heads=first.n_kv_heads, head_dim=first.head_dim,
                            page_size=g)
    pool = MixedPrecisionPool(config)

    rows = [
        _replay_one(capture, allocation.bits, split_len, pool, probe_queries)
        for capture in loaded
    ]
    report = {
        "budget": allocation.budget,
        "allocation": allocation.to_json(),
        "split_len": split_len,
        "probe_queries": probe_queries,
        "requests": rows,
        "pool_stats": pool.stats(),
    }
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    write_json(report, root / "report.json")
    write_csv(
        [
            {k: r[k] for k in ("request_id", "mse", "realized_avg_bitwidth",
                               "n_int2_tokens", "n_int4_tokens")}
            for r in rows
        ],
        root / "report.csv",
        ["request_id", "mse", "realized_avg_bitwidth", "n_int2_tokens", "n_int4_tokens"],
    )
    if figures:
        render_replay_mse(
            [r["request_id"] for r in rows],
            [r["mse"] for r in rows],
            [r["realized_avg_bitwidth"] for r in rows],
            root / "replay_mse.png",
        )
    click.echo(f"replayed {len(rows)} requests -> {root}")


@cli.command("pool-stats")
@click.option("--budget", required=True, type=float)
@click.option("--total-slots", required=True, type=int)
@click.option("--n-layers", default=2, show_default=True, type=int)
@click.option("--n-kv-heads", default=2, show_default=True, type=int)
@click.option("--head-dim", default=32, show_default=True, type=int)
@click.option("--group-size", default=32, show_default=True, type=int)
@click.option("--out", type=click.Path(dir_okay=False))
def cmd_pool_stats(budget, total_slots, n_layers, n_kv_heads, head_dim, group_size, out):
    """Show the region split a budget implies for a fresh pool."""
    config = init_pool(budget, total_slots, n_layers, n_kv_heads, head_dim,
                       page_size=group_size)
    stats = MixedPrecisionPool(config).stats()
    payload = json.dumps(stats, sort_keys=True, indent=1)
    if out:
        Path(out).write_text(payload)
    else:
        click.echo(payload)


def main(argv=None):
    try:
        cli(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(1)
    except ValidationError as exc:
        click.echo(f"validation error: {exc}", err=True)
        sys.exit(2)
    except CapacityError as exc:
        click.echo(f"capacity error: {exc}", err=True)
        sys.exit(3)
    except InfeasibleBudgetError as exc:
        click.echo(f"infeasible budget: {exc}", err=True)
        sys.exit(4)
    sys.exit(0)


if __name__ == "__main__":
    main()
