"""Command-line entry point: ``miaod generate | run | sweep | report``.

Exit codes: 0 success, 2 bad configuration or input schema, 3 I/O failure,
4 numeric fault during training.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .activeloop import ImageBank, PoolState, TrainingFault, init_pool, run_cycle
from .detector import build_anchors
from .config import ConfigError, RunConfig, load_config, with_overrides
from .evaluation import dump_heatmap
from .synthdata import DatasetError, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("miaod")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
METRICS_VERSION = "# miaod-metrics v1"
BASE_COLUMNS = ["cycle", "labeled_fraction", "strategy", "seed", "mAP"]
TAIL_COLUMNS = ["tp_selected", "mean_selected_uncertainty", "wall_seconds"]
SWEEP_KEYS = ["lambda", "k"]


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _fmt(v: float) -> str:
    return "nan" if v != v else f"{v:.6f}"


def metrics_columns(classes) -> list[str]:
    return BASE_COLUMNS + [f"AP_{c}" for c in classes] + TAIL_COLUMNS


def _open_dataset(root: Path):
    try:
        train = load_dataset(root / "train")
        test = load_dataset(root / "test")
    except DatasetError as exc:
        raise CliError(EXIT_IO, f"dataset {root}: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"dataset {root}: {exc}") from None
    return train, test


# ---------------------------------------------------------------- generate


def cmd_generate(cfg: RunConfig, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    sums = {}
    try:
        for split, count in (("train", cfg.train_count), ("test", cfg.test_count)):
            samples = generate_dataset(cfg.scene, count, cfg.data_seed, split)
            sums[split] = save_dataset(samples, out / split, cfg.scene, cfg.data_seed, split)
            print(f"{split}: {count} samples, checksum {sums[split]}")
    except DatasetError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {out}: {exc}") from None
    return sums


# ---------------------------------------------------------------- run


def _attach_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("miaod")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def execute_run(cfg: RunConfig, dataset_dir, out_dir, extra: dict | None = None) -> list[dict]:
    """One active-learning run; writes all artifacts and returns the metric rows."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        handler = _attach_log(out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from None
    try:
        return _execute(cfg, Path(dataset_dir), out, extra or {})
    finally:
        logging.getLogger("miaod").removeHandler(handler)
        handler.close()


def _execute(cfg: RunConfig, dataset_dir: Path, out: Path, extra: dict) -> list[dict]:
    train, test = _open_dataset(dataset_dir)
    classes = train.spec.classes
    cc = cfg.cycle
    try:
        pool = init_pool(train.samples, cc)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    bank = ImageBank(train.samples, len(classes))
    heat_samples = test.samples[: cfg.heatmap_count]
    log.info("run start: strategy=%s seed=%d lambda=%g k=%d dataset=%s",
             cc.strategy, cc.seed, cc.lam, cc.k, dataset_dir)
    rows = []
    columns = list(extra) + metrics_columns(classes)
    try:
        for _ in range(cc.num_cycles):
            t0 = time.perf_counter()
            cycle = pool.cycle
            model, pool, m = run_cycle(None, pool, bank, cc, test.samples)
            elapsed = time.perf_counter() - t0
            selected = pool.history[-1]["selected"]
            (out / f"selected_cycle{cycle}.txt").write_text("".join(f"{i}\n" for i in selected))
            for s in heat_samples:
                dump_heatmap(model, s.pixels, out / f"heatmap_cycle{cycle}_{s.id}.pgm", weighted=cc.reweight)
            row = dict(extra)
            row.update({"cycle": cycle, "labeled_fraction": _fmt(m.labeled_fraction),
                        "strategy": cc.strategy, "seed": cc.seed, "mAP": _fmt(m.mAP)})
            row.update({f"AP_{c}": _fmt(ap) for c, ap in zip(classes, m.per_class_ap)})
            row.update({"tp_selected": m.tp_selected,
                        "mean_selected_uncertainty": _fmt(m.mean_selected_uncertainty),
                        "wall_seconds": f"{elapsed:.3f}" if cfg.record_timing else ""})
            rows.append(row)
            log.info("cycle %d done in %.2fs: mAP=%.4f tp_selected=%d", cycle, elapsed, m.mAP, m.tp_selected)
    except (TrainingFault, ad.NumericFault) as exc:
        log.error("numeric fault: %s", exc)
        raise CliError(EXIT_NUMERIC, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    write_csv(out / "metrics.csv", columns, rows)
    return rows


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    buf.write(METRICS_VERSION + "\n")
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


def read_csv(path) -> tuple[list[str], list[dict]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None
    body = [ln for ln in lines if not ln.startswith("#")]
    reader = csv.DictReader(body)
    rows = list(reader)
    return list(reader.fieldnames or []), rows


# ---------------------------------------------------------------- sweep


def _cell_name(lam, k, strategy, seed) -> str:
    return f"lambda={lam}_k={k}_strategy={strategy}_seed={seed}"


def cmd_sweep(cfg: RunConfig, dataset_dir, out_dir, runner=execute_run) -> int:
    """Run every grid cell into its own subdirectory and merge the rows."""
    out = Path(out_dir)
    grid = cfg.sweep
    if not (grid.lambdas and grid.ks and grid.strategies and grid.seeds):
        raise CliError(EXIT_CONFIG, "sweep grid is empty")
    train, _ = _open_dataset(Path(dataset_dir))
    classes = train.spec.classes
    n_anchors = _num_anchors(cfg, train.spec.image_size)
    rows, failures = [], []
    for lam in grid.lambdas:
        for k in grid.ks:
            kv = n_anchors if k == "N" else int(k)
            for strategy in grid.strategies:
                for seed in grid.seeds:
                    name = _cell_name(lam, k, strategy, seed)
                    try:
                        cell = with_overrides(cfg, seed=seed, strategy=strategy, lam=lam, k=kv)
                        rows += runner(cell, dataset_dir, out / name, {"lambda": lam, "k": k})
                    except ConfigError as exc:
                        failures.append((lam, k, strategy, seed, EXIT_CONFIG, str(exc)))
                    except CliError as exc:
                        failures.append((lam, k, strategy, seed, exc.code, str(exc)))
                    except Exception as exc:  # keep the sweep going on unexpected faults
                        failures.append((lam, k, strategy, seed, 1, f"{type(exc).__name__}: {exc}"))
                    if failures and failures[-1][:4] == (lam, k, strategy, seed):
                        log.error("sweep cell %s failed: %s", name, failures[-1][5])
                        print(f"cell {name} failed (exit {failures[-1][4]}): {failures[-1][5]}", file=sys.stderr)
    rows.sort(key=lambda r: (float(r["lambda"]), _k_key(r["k"]), r["strategy"], int(r["seed"]), int(r["cycle"])))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", SWEEP_KEYS + metrics_columns(classes), rows)
    if failures:
        with open(out / "sweep_failures.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "k", "strategy", "seed", "exit_code", "message"])
            w.writerows(failures)
    print(f"sweep: {len(rows)} rows, {len(failures)} failed cells -> {out / 'sweep.csv'}")
    return max((f[4] for f in failures), default=EXIT_OK)


def _k_key(k) -> float:
    return float("inf") if str(k) == "N" else float(k)


def _num_anchors(cfg: RunConfig, image_size: int) -> int:
    return build_anchors(image_size, cfg.cycle.stride, cfg.cycle.anchor_sizes).N


# ---------------------------------------------------------------- report


REQUIRED = {"cycle", "strategy", "seed", "mAP", "tp_selected"}


def summarize(paths) -> tuple[list[str], list[dict]]:
    """Mean and population std of mAP and tp_selected per (group, cycle) across seeds."""
    groups: dict[tuple, dict[str, list[float]]] = {}
    keys_present: list[str] = []
    for path in paths:
        columns, rows = read_csv(path)
        missing = REQUIRED - set(columns)
        if missing:
            raise CliError(EXIT_CONFIG, f"{path}: missing column(s) {', '.join(sorted(missing))}")
        extra = [k for k in SWEEP_KEYS if k in columns]
        for k in extra:
            if k not in keys_present:
                keys_present.append(k)
        for r in rows:
            try:
                key = tuple(r.get(k, "") for k in SWEEP_KEYS) + (r["strategy"], int(r["cycle"]))
                bucket = groups.setdefault(key, {"mAP": [], "tp_selected": [], "labeled_fraction": []})
                bucket["mAP"].append(float(r["mAP"]))
                bucket["tp_selected"].append(float(r["tp_selected"]))
                if r.get("labeled_fraction"):
                    bucket["labeled_fraction"].append(float(r["labeled_fraction"]))
            except (KeyError, ValueError) as exc:
                raise CliError(EXIT_CONFIG, f"{path}: malformed row {r}: {exc}") from None
    out_cols = keys_present + ["strategy", "cycle", "labeled_fraction", "runs",
                               "mAP_mean", "mAP_std", "tp_selected_mean", "tp_selected_std"]
    summary = []
    for key in sorted(groups, key=lambda k: (k[:-2], k[-2], k[-1])):
        b = groups[key]
        row = {k: v for k, v in zip(SWEEP_KEYS, key[:2]) if k in keys_present}
        row.update({"strategy": key[2], "cycle": key[3],
                    "labeled_fraction": _fmt(float(np.mean(b["labeled_fraction"]))) if b["labeled_fraction"] else "",
                    "runs": len(b["mAP"]),
                    "mAP_mean": _fmt(float(np.mean(b["mAP"]))), "mAP_std": _fmt(float(np.std(b["mAP"]))),
                    "tp_selected_mean": _fmt(float(np.mean(b["tp_selected"]))),
                    "tp_selected_std": _fmt(float(np.std(b["tp_selected"])))})
        summary.append(row)
    return out_cols, summary


def comparison_table(summary: list[dict]) -> str:
    """One line per cycle, one mAP and tp_selected column pair per strategy group."""
    def label(r):
        parts = [f"{k}={r[k]}" for k in SWEEP_KEYS if k in r]
        return r["strategy"] + (f"[{','.join(parts)}]" if parts else "")

    labels = sorted({label(r) for r in summary})
    cycles = sorted({int(r["cycle"]) for r in summary})
    cell = {(label(r), int(r["cycle"])): r for r in summary}
    header = ["cycle"] + [f"{lb} mAP" for lb in labels] + [f"{lb} tp" for lb in labels]
    lines = [header]
    for c in cycles:
        line = [str(c)]
        for lb in labels:
            r = cell.get((lb, c))
            line.append(f"{float(r['mAP_mean']):.4f}±{float(r['mAP_std']):.4f}" if r else "-")
        for lb in labels:
            r = cell.get((lb, c))
            line.append(f"{float(r['tp_selected_mean']):.1f}±{float(r['tp_selected_std']):.1f}" if r else "-")
        lines.append(line)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in lines)


def cmd_report(paths, out_dir=None) -> str:
    if not paths:
        raise CliError(EXIT_CONFIG, "report needs at least one CSV")
    columns, summary = summarize(paths)
    table = comparison_table(summary)
    print(table)
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "summary.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
                w.writeheader()
                w.writerows(summary)
            (out / "comparison.txt").write_text(table + "\n")
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write report to {out}: {exc}") from None
    return table


# ---------------------------------------------------------------- argparse


def _split(text, cast):
    return tuple(cast(v) for v in str(text).split(",") if v != "")


def _k_value(text):
    return "N" if text == "N" else int(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miaod", description="Multiple-instance active detection lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--out", required=True, help="output directory")
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset directory written by 'generate'")

    p = sub.add_parser("generate", help="render the synthetic train/test datasets")
    common(p, dataset=False)
    p.add_argument("--seed", type=int, help="dataset seed")

    p = sub.add_parser("run", help="one active-learning run")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--k", type=int)

    p = sub.add_parser("sweep", help="grid of runs; list flags take comma-separated values")
    common(p)
    p.add_argument("--seed", help="e.g. 0,1,2")
    p.add_argument("--strategy", help="e.g. random,miaod_iur")
    p.add_argument("--lambda", dest="lam", help="e.g. 0.2,0.5,1,2")
    p.add_argument("--k", help="e.g. 1,20,N")

    p = sub.add_parser("report", help="summarise metrics CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help="directory for summary.csv")
    return parser


def _dispatch(args) -> int:
    if args.command == "report":
        cmd_report(args.csv, args.out)
        return EXIT_OK
    cfg = load_config(args.config)
    if args.command == "generate":
        if args.seed is not None:
            cfg = replace(cfg, data_seed=args.seed)
        cmd_generate(cfg, args.out)
        return EXIT_OK
    if args.command == "run":
        cfg = with_overrides(cfg, seed=args.seed, strategy=args.strategy, lam=args.lam, k=args.k)
        rows = execute_run(cfg, args.dataset, args.out)
        print(f"run: {len(rows)} cycles -> {Path(args.out) / 'metrics.csv'}")
        return EXIT_OK
    grid = cfg.sweep
    try:
        grid = replace(
            grid,
            lambdas=_split(args.lam, float) if args.lam else grid.lambdas,
            ks=_split(args.k, _k_value) if args.k else grid.ks,
            strategies=_split(args.strategy, str) if args.strategy else grid.strategies,
            seeds=_split(args.seed, int) if args.seed else grid.seeds,
        )
    except ValueError as exc:
        raise ConfigError(f"bad sweep flag: {exc}") from None
    return cmd_sweep(replace(cfg, sweep=grid), args.dataset, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
