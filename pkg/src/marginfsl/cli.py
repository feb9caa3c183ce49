"""Command-line entry point: gen-data, train, eval, gradcheck, sweep.

Exit codes: 0 success, 2 config or usage error, 3 training divergence,
4 failed gradient check. Relative paths are resolved against ``--out-dir``.
"""

import argparse
import csv
import hashlib
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from . import gradcheck
from .config import ConfigError, load_experiment
from .data import (CapacityError, EpisodeSpec, ParseError, gen_gaussian_tasks, load_csv, load_split,
                   save_csv, save_split, split_classes)
from .tensor import NumericError
from .train import (TrainingDivergence, evaluate, load_checkpoint, save_checkpoint,
                    train_episodic)

log = logging.getLogger("marginfsl")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4
DIVERGED = "×"
RESULT_FIELDS = ["model", "loss_kind", "lambda", "m", "C", "K", "mean", "ci95", "n_episodes"]


class UsageError(Exception):
    pass


def _path(out_dir, p):
    return p if os.path.isabs(p) else os.path.join(out_dir, p)


def format_acc(mean, ci):
    return f"{mean:.4f} ± {ci:.4f}"


# --- data -------------------------------------------------------------------------

def load_splits(exp, out_dir):
    """Dataset split into class-disjoint train/val/test Datasets."""
    d = exp.data
    if d.csv is not None:
        ds = load_csv(_path(out_dir, d.csv))
    else:
        try:
            ds = gen_gaussian_tasks(**d.generator)
        except TypeError as exc:
            raise ConfigError(f"data.generator: {exc}") from None
    if d.split is not None:
        ids = load_split(_path(out_dir, d.split))
    else:
        ids = split_classes(ds.classes, d.split_counts, d.split_seed)
    missing = set(c for v in ids.values() for c in v) - set(ds.classes)
    if missing:
        raise ConfigError(f"data.split: classes {sorted(missing)[:5]} not in the dataset")
    return {k: ds.subset(v) for k, v in ids.items()}


# --- sweep cells -------------------------------------------------------------------

def cell_config(train_cfg, lam, m):
    """TrainConfig for one (lambda, m) cell; m == 'config' keeps the margin mode."""
    loss = replace(train_cfg.loss, lam=lam)
    if m == "config":
        return replace(train_cfg, loss=loss)
    return replace(train_cfg, loss=replace(loss, margin=m), margin_mode="fixed")


def cell_suffix(lam, m):
    m_part = "config" if m == "config" else f"{m:g}"
    return f"lam{lam:g}_m{m_part}"


def cell_seed(base, lam, m):
    h = hashlib.sha256(f"{base}|{lam!r}|{m!r}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def run_cell(exp, out_dir, lam, m, seed, test=False):
    """Train one cell, write its history and checkpoint; returns a result dict."""
    cfg = replace(cell_config(exp.train, lam, m), seed=seed)
    splits = load_splits(exp, out_dir)
    suffix = cell_suffix(lam, m)
    row = {"model": cfg.model, "loss_kind": cfg.loss.kind, "lambda": lam, "m": None,
           "C": cfg.episode.c_way, "K": cfg.episode.k_shot, "suffix": suffix, "diverged": False}
    try:
        pools = {k: splits[k] for k in ("train", "val") if k in splits}
        model, hist = train_episodic(cfg, pools)
    except (TrainingDivergence, NumericError) as exc:
        log.error("cell %s diverged: %s", suffix, exc)
        row.update(diverged=True, mean=math.nan, ci95=math.nan, n_episodes=0)
        return row
    hist.to_csv(os.path.join(out_dir, f"history_{suffix}.csv"))
    margin = hist.records[-1].margin
    save_checkpoint(os.path.join(out_dir, f"checkpoint_{suffix}.json"), cfg, model, cfg.n_updates,
                    None if math.isnan(margin) else margin)
    row["m"] = None if math.isnan(margin) else margin
    if test:
        spec = EpisodeSpec(cfg.episode.c_way, cfg.episode.k_shot, exp.test_query, cfg.episode.n_unlabeled)
        mean, ci = evaluate(model, splits["test"], spec, exp.test_episodes, seed)
        n = exp.test_episodes
    else:
        last = hist.records[-1]
        mean, ci, n = last.val_acc, last.ci95, cfg.eval_episodes
    row.update(mean=mean, ci95=0.0 if math.isnan(ci) else ci, n_episodes=n)
    return row


def _run_cell_args(args):
    return run_cell(*args)


def run_cells(exp, out_dir, cells, test, workers):
    jobs = [(exp, out_dir, lam, m, seed, test) for lam, m, seed in cells]
    if workers <= 1:
        return [run_cell(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell_args, jobs))


def write_report(rows, lambdas, margins, path):
    """Grid of lambda rows by m columns; diverged cells show an '×'."""
    by_cell = {(r["lambda"], r["m_key"]): r for r in rows}
    head = ["lambda \\ m"] + ["config" if m == "config" else f"{m:g}" for m in margins]
    lines = ["\t".join(head)]
    for lam in lambdas:
        cells = []
        for m in margins:
            r = by_cell[(lam, m)]
            cells.append(DIVERGED if r["diverged"] else format_acc(r["mean"], r["ci95"]))
        lines.append("\t".join([f"{lam:g}"] + cells))
    text = "\n".join(lines) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return text


def append_results(rows, path):
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_FIELDS)
        for r in rows:
            if r.get("diverged"):
                mean = ci = DIVERGED
            else:
                mean, ci = repr(float(r["mean"])), repr(float(r["ci95"]))
            m = "" if r["m"] is None else repr(float(r["m"]))
            w.writerow([r["model"], r["loss_kind"], repr(float(r["lambda"])), m,
                        r["C"], r["K"], mean, ci, r["n_episodes"]])


def read_results(path):
    """Rows of a results CSV; '×' and empty cells come back as NaN."""
    def num(v):
        return math.nan if v in ("", DIVERGED) else float(v)

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("lambda", "m", "mean", "ci95"):
            r[k] = num(r[k])
        for k in ("C", "K", "n_episodes"):
            r[k] = int(r[k])
    return rows


def _grid(exp, args, derive_seeds):
    lambdas = exp.lambdas if args.lambdas is None else tuple(args.lambdas)
    margins = exp.margins if args.margins is None else tuple(args.margins)
    cells = []
    for lam in lambdas:
        for m in margins:
            seed = cell_seed(exp.train.seed, lam, m) if derive_seeds else exp.train.seed
            cells.append((lam, m, seed))
    return lambdas, margins, cells


def _finish(rows, lambdas, margins, cells, out_dir, results_name):
    for r, (lam, m, _) in zip(rows, cells):
        r["m_key"] = m
    print(write_report(rows, lambdas, margins, os.path.join(out_dir, "report.txt")), end="")
    append_results(rows, os.path.join(out_dir, results_name))
    return EXIT_DIVERGED if any(r["diverged"] for r in rows) else EXIT_OK


# --- commands ----------------------------------------------------------------------

def cmd_gen_data(args):
    counts = tuple(args.split)
    if sum(counts) > args.n_classes:
        raise UsageError(f"--split {counts} needs more than --n-classes {args.n_classes}")
    ds = gen_gaussian_tasks(args.n_classes, args.samples_per_class, args.dim,
                            args.center_scale, args.noise_sigma, args.seed)
    ids = split_classes(ds.classes, counts, args.split_seed)
    data_path = _path(args.out_dir, args.dataset)
    split_path = _path(args.out_dir, args.split_file)
    save_csv(ds, data_path)
    save_split(ids, split_path)
    print(f"wrote {data_path} ({len(ds)} rows, {len(ds.classes)} classes) and {split_path}")
    return EXIT_OK


def cmd_train(args):
    exp = load_experiment(_path(args.out_dir, args.config))
    lambdas, margins, cells = _grid(exp, args, derive_seeds=False)
    rows = run_cells(exp, args.out_dir, cells, test=False, workers=1)
    return _finish(rows, lambdas, margins, cells, args.out_dir, "train_results.csv")


def cmd_sweep(args):
    exp = load_experiment(_path(args.out_dir, args.config))
    lambdas, margins, cells = _grid(exp, args, derive_seeds=True)
    workers = int(os.environ.get("MARGINFSL_WORKERS", "1") or 1)
    rows = run_cells(exp, args.out_dir, cells, test=True, workers=workers)
    return _finish(rows, lambdas, margins, cells, args.out_dir, args.results)


def cmd_eval(args):
    cfg, model, _, margin = load_checkpoint(_path(args.out_dir, args.checkpoint))
    ds = load_csv(_path(args.out_dir, args.dataset))
    if args.split_file is not None:
        ids = load_split(_path(args.out_dir, args.split_file))
        if args.which not in ids:
            raise UsageError(f"split file has no {args.which!r} pool")
        ds = ds.subset(ids[args.which])
    if ds.dim != model.encoder.spec.layer_widths[0]:
        raise UsageError(f"dataset has {ds.dim} features, checkpoint expects "
                         f"{model.encoder.spec.layer_widths[0]}")
    c = args.c_way or cfg.episode.c_way
    k = args.k_shot or cfg.episode.k_shot
    if model.kind == "gnn" and c != model.n_way:
        raise UsageError(f"graph checkpoint is {model.n_way}-way, asked for {c}-way")
    spec = EpisodeSpec(c, k, args.n_query, 0)
    mean, ci = evaluate(model, ds, spec, args.n_episodes, args.seed)
    if math.isnan(ci):
        log.warning("ci95 undefined for a single episode; reporting 0")
        ci = 0.0
    print(format_acc(mean, ci))
    row = {"model": cfg.model, "loss_kind": cfg.loss.kind, "lambda": cfg.loss.lam, "m": margin,
           "C": c, "K": k, "mean": mean, "ci95": ci, "n_episodes": args.n_episodes}
    append_results([row], _path(args.out_dir, args.results))
    return EXIT_OK


def cmd_gradcheck(args):
    checks = gradcheck.default_checks(args.instances)
    results = gradcheck.run_suite(checks, args.seed)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="marginfsl", description="Large-margin few-shot learning toolkit")
    p.add_argument("--out-dir", default=".", help="base directory for every relative path")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic Gaussian dataset and a class split")
    g.add_argument("--n-classes", type=int, default=60)
    g.add_argument("--samples-per-class", type=int, default=30)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--center-scale", type=float, default=1.0)
    g.add_argument("--noise-sigma", type=float, default=0.9)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", type=int, nargs=3, default=(40, 10, 10), metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--split-seed", type=int, default=0)
    g.add_argument("--dataset", default="data.csv")
    g.add_argument("--split-file", default="split.json")
    g.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("train", cmd_train, "train every (lambda, m) cell of a config"),
                              ("sweep", cmd_sweep, "train and test every (lambda, m) cell")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("config", help="experiment JSON")
        t.add_argument("--lambdas", type=float, nargs="+", help="override the config's lambda grid")
        t.add_argument("--margins", type=_margin_arg, nargs="+", help="override the m grid ('config' allowed)")
        if name == "sweep":
            t.add_argument("--results", default="results.csv")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="test a checkpoint on fresh episodes")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", required=True)
    e.add_argument("--split-file")
    e.add_argument("--which", default="test")
    e.add_argument("--c-way", type=int)
    e.add_argument("--k-shot", type=int)
    e.add_argument("--n-query", type=int, default=15)
    e.add_argument("--n-episodes", type=int, default=600)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--results", default="results.csv")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference and identity checks")
    c.add_argument("--instances", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def _margin_arg(v):
    if v == "config":
        return v
    x = float(v)
    if not x > 0:
        raise argparse.ArgumentTypeError("margins must be > 0")
    return x


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        return args.func(args)
    except (ConfigError, UsageError, ParseError, CapacityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
