"""Command-line interface: ``dpm <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from . import dataio
from .baselines import MODEL_NAMES, build_lagged_design, fit_glm
from .estimation import SgdConfig, fit_restarts, segment_seed, split_segments
from .evaluation import dpm_rows, last_touch_histogram, roc_curve
from .model import ContractError
from .particles import DegenerateLikelihoodError, FilterConfig
from .simulate import PRODUCT_B, CalibrationError, generate

log = logging.getLogger("dpm")

SIM_TEMPLATE = {
    "true_params": {"c": -8.0, "phi": 0.53, "alpha": [0.5, 0.8, 1.0], "beta": [0.2, 0.6, 0.9]},
    "n_customers": 1000,
    "horizon": 180,
    "touch_rates": list(PRODUCT_B["rates"]),
    "touch_caps": list(PRODUCT_B["caps"]),
    "seed": 0,
    "targeting": 0.0,
    "targeting_signal": "observable",
    "process_noise": True,
    "segment": None,
    "first_id": 1,
}


def _with_seed(config: SgdConfig, seed: Optional[int]) -> SgdConfig:
    if seed is None:
        return config
    return dataclasses.replace(config, seed=seed, filter=dataclasses.replace(config.filter, seed=seed))


def _sgd_config(args) -> SgdConfig:
    config = SgdConfig()
    if getattr(args, "config", None):
        config = dataio.sgd_config_from_dict(dataio.read_json(args.config))
    return _with_seed(config, args.seed)


def _filter_config(args) -> FilterConfig:
    config = FilterConfig()
    if getattr(args, "filter_config", None):
        config = dataio.filter_config_from_dict(dataio.read_json(args.filter_config))
    if getattr(args, "particles", None):
        config = dataclasses.replace(config, particle_count=args.particles)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _print_config(args) -> int:
    if args.command == "simulate":
        doc = SIM_TEMPLATE
        if args.config:
            doc = dataio.sim_config_to_dict(dataio.sim_config_from_dict(dataio.read_json(args.config), args.seed))
    elif args.command == "fit":
        doc = dataio.sgd_config_to_dict(_sgd_config(args))
    elif args.command in ("score", "eval-roc"):
        doc = dataclasses.asdict(_filter_config(args))
    else:
        doc = {k: v for k, v in vars(args).items() if k not in ("func", "print_config")}
    sys.stdout.write(dataio.canonical_json(doc))
    return 0


# --------------------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    if not args.config:
        raise ContractError("simulate needs --config (see --print-config for a template)")
    config = dataio.sim_config_from_dict(dataio.read_json(args.config), args.seed)
    data = generate(config, threads=args.threads)
    dataio.write_dataset(args.out, data, args.segment_column)
    log.info("wrote %d customers (c = %.6g) to %s", len(data), config.true_params.c, args.out)
    return 0


def cmd_fit(args) -> int:
    data = dataio.load_dataset(args.data, args.segment_column)
    config = _sgd_config(args)
    K, L = data[0].K, data[0].L
    groups = split_segments(data) if args.segment_column else {None: data}

    def run(item):
        seg, group = item
        cfg = config if seg is None else dataclasses.replace(config, seed=segment_seed(config.seed, seg))
        return seg, cfg, fit_restarts(group, cfg, args.restarts)

    items = sorted(groups.items(), key=lambda kv: "" if kv[0] is None else str(kv[0]))
    if args.threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]
    models, meta = {}, {}
    for seg, cfg, report in results:
        models[seg] = report.final_params
        meta[seg] = dataio.fit_metadata(report, cfg, cfg.seed)
        for w in report.warnings:
            log.warning("segment %s: %s", seg, w)
        if args.trajectory:
            path = args.trajectory if seg is None else f"{args.trajectory}.{seg}.csv"
            dataio.write_trajectory(path, report.names, report.trajectory)
    dataio.ModelFile(K, L, models, meta).save(args.model)
    return 0


def cmd_fit_baseline(args) -> int:
    data = dataio.load_dataset(args.data, args.segment_column)
    result = fit_glm(build_lagged_design(data, args.lag), max_iters=args.max_iters, tol=args.tol)
    if not result.converged:
        log.warning("%s: IRLS did not converge in %d iterations", MODEL_NAMES.get(args.lag), result.iterations)
    if result.separation_detected:
        log.warning("%s: possible separation or near-singular information matrix", MODEL_NAMES.get(args.lag))
    dataio.write_coefficients(args.out, result)
    return 0


def _score_rows(args):
    model = dataio.ModelFile.load(args.model)
    data = dataio.load_dataset(args.data, args.segment_column)
    fconf = _filter_config(args)
    rows_by_seg = {}
    for seg, group in split_segments(data).items():
        rows_by_seg[seg] = dpm_rows(model.params_for(seg), group, fconf, args.min_day, args.threads)
    # restore dataset order
    order = {h.id: i for i, h in enumerate(data)}
    keys, scores, labels = [], [], []
    for r in rows_by_seg.values():
        keys.extend(r.keys)
        scores.append(r.scores)
        labels.append(r.labels)
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    idx = sorted(range(len(keys)), key=lambda i: (order[keys[i][0]], keys[i][1]))
    return [keys[i] for i in idx], scores[idx], labels[idx]


def cmd_score(args) -> int:
    keys, scores, labels = _score_rows(args)
    rows = ([cid, t, int(y), repr(float(s))] for (cid, t), s, y in zip(keys, scores, labels))
    dataio.write_csv(args.out, ["id", "day", "y", "score"], rows)
    return 0


def cmd_eval_roc(args) -> int:
    if args.scores:
        scores, labels = dataio.read_scores(args.scores)
    elif args.model and args.data:
        _, scores, labels = _score_rows(args)
    else:
        raise ContractError("eval-roc needs --scores, or --model with --data")
    curve = roc_curve(scores, labels)
    dataio.write_roc(args.out, curve)
    print(f"AUC {curve.auc!r}")
    return 0


def cmd_diag_lasttouch(args) -> int:
    data = dataio.load_dataset(args.data, args.segment_column)
    hist = last_touch_histogram(data, args.max_days)
    dataio.write_histogram(args.out, hist, data[0].K, data[0].L)
    return 0


def cmd_split(args) -> int:
    if not 0.0 < args.train_frac < 1.0:
        raise ContractError("--train-frac must lie in (0, 1)")
    data = dataio.load_dataset(args.data, args.segment_column)
    rng = np.random.default_rng(np.random.SeedSequence([0 if args.seed is None else args.seed, 11]))
    train_idx = []
    for stratum in (True, False):
        idx = np.array([i for i, h in enumerate(data) if h.purchased == stratum], dtype=np.int64)
        n_train = int(round(args.train_frac * idx.size))
        train_idx.extend(rng.permutation(idx)[:n_train].tolist())
    chosen = set(train_idx)
    train = [h for i, h in enumerate(data) if i in chosen]
    test = [h for i, h in enumerate(data) if i not in chosen]
    if not train or not test:
        raise ContractError("split leaves one side empty")
    dataio.write_dataset(args.train, train, args.segment_column)
    dataio.write_dataset(args.test, test, args.segment_column)
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the run")
    common.add_argument("--segment-column", default=None, help="dataset column holding a segment key")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="dpm",
        description="Dynamic propensity model: simulate, fit, score and evaluate.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "generate a synthetic dataset")
    p.add_argument("--config", help="simulation config JSON")
    p.add_argument("--out", required=False)

    p = add("fit", cmd_fit, "fit the model by stochastic gradient ascent")
    p.add_argument("--data")
    p.add_argument("--config", help="SGD config JSON (defaults if omitted)")
    p.add_argument("--model", help="output model JSON")
    p.add_argument("--trajectory", help="output trajectory CSV")
    p.add_argument("--restarts", type=int, default=1)

    p = add("fit-baseline", cmd_fit_baseline, "fit a lagged logistic regression")
    p.add_argument("--data")
    p.add_argument("--lag", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--out")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-8)

    for name, func, help in (
        ("score", cmd_score, "per-day one-step-ahead purchase probabilities"),
        ("eval-roc", cmd_eval_roc, "ROC curve and AUC of pooled day-level scores"),
    ):
        p = add(name, func, help)
        p.add_argument("--model")
        p.add_argument("--data")
        p.add_argument("--filter-config", help="particle filter config JSON")
        p.add_argument("--particles", type=int, default=None)
        p.add_argument("--min-day", type=int, default=1, help="first label day included")
        p.add_argument("--out")
        if name == "eval-roc":
            p.add_argument("--scores", help="score CSV from 'dpm score'")

    p = add("diag-lasttouch", cmd_diag_lasttouch, "days between last touch and purchase")
    p.add_argument("--data")
    p.add_argument("--max-days", type=int, default=30)
    p.add_argument("--out")

    p = add("split", cmd_split, "stratified customer-level train/test split")
    p.add_argument("--data")
    p.add_argument("--train-frac", type=float, default=0.5)
    p.add_argument("--train")
    p.add_argument("--test")
    return parser


REQUIRED = {
    "simulate": ("out",),
    "fit": ("data", "model"),
    "fit-baseline": ("data", "out"),
    "score": ("model", "data", "out"),
    "eval-roc": ("out",),
    "diag-lasttouch": ("data", "out"),
    "split": ("data", "train", "test"),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.print_config:
            return _print_config(args)
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if not getattr(args, k)]
        if missing:
            parser.error(f"{args.command}: missing {', '.join(missing)}")
        if args.threads < 1:
            raise ContractError("--threads must be at least 1")
        return args.func(args)
    except (ContractError, CalibrationError, DegenerateLikelihoodError, OSError, json.JSONDecodeError, RuntimeError) as err:
        print(f"dpm {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
