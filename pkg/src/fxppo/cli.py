"""Pipeline driver: preprocess -> label -> train -> backtest.

Every stage reads one JSON config and writes under
out_root/<config-hash>/<stage>/, so differently configured runs never
share files. Exit codes: 0 success, 1 usage, 2 data problem, 3 numeric
failure.
"""

import argparse
import json
import math
import os
import subprocess
import sys

import numpy as np

from .agent import load_policy
from .agent import train as train_agent
from .backtest import (
    BacktestReport,
    MissingCheckpoint,
    aggregate_seeds,
    emit_report,
    run_backtest,
)
from .checkpoint import CheckpointError, file_sha256
from .config import (
    ConfigError,
    load_config,
    validate_split,
    write_effective_config,
)
from .data import (
    CsvFormat,
    DataError,
    build_windows,
    compute_features,
    compute_returns,
    parse_candles,
    window_end_indices,
)
from .kernels import backend_name
from .labeler import (
    AutoencoderConfig,
    DivergedLoss,
    LabelerError,
    kmeans_fit,
    label_dataset,
    read_labels_csv,
    save_autoencoder,
    save_kmeans,
    silhouette_score,
    train_autoencoder,
    write_labels_csv,
)
from .nn import NonFiniteValue

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SPLITS = ("train", "test")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read_text(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError as exc:
        raise ConfigError(f"input file not found: {path}") from exc


def _load_array(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"{what} missing at {path}; run the earlier stage first")
    return np.load(path)


def _split_dir(config, split):
    return config.run_dir("preprocess", split)


def cmd_preprocess(config, args):
    series = {}
    for split in SPLITS:
        path = config.train_csv if split == "train" else config.test_csv
        series[split] = parse_candles(_read_text(path), CsvFormat(), path)
    validate_split(series["train"], series["test"])

    manifest = {}
    for split in SPLITS:
        out_dir = _split_dir(config, split)
        os.makedirs(out_dir, exist_ok=True)
        features = compute_features(series[split])
        returns = compute_returns(series[split])
        windows = build_windows(features)
        files = {}
        for name, arr in (
            ("features", features),
            ("returns", returns),
            ("windows", windows),
        ):
            path = os.path.join(out_dir, f"{name}.npy")
            np.save(path, arr)
            files[name] = {"rows": int(arr.shape[0]), "sha256": file_sha256(path)}
        manifest[split] = {"candles": len(series[split]), "files": files}

    stage_dir = config.run_dir("preprocess")
    with open(os.path.join(stage_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_effective_config(config, stage_dir)
    print(f"preprocess: wrote artifacts under {stage_dir}")
    return EXIT_OK


def cmd_label(config, args):
    train_windows = _load_array(
        os.path.join(_split_dir(config, "train"), "windows.npy"), "training windows"
    )
    test_windows = _load_array(
        os.path.join(_split_dir(config, "test"), "windows.npy"), "test windows"
    )
    out_dir = config.run_dir("label")
    os.makedirs(out_dir, exist_ok=True)

    ae, history = train_autoencoder(train_windows, config.labeler, config.axt_seed)
    codes = ae.encode(train_windows)
    km = kmeans_fit(
        codes,
        k=config.kmeans.k,
        seed=config.axt_seed,
        max_iters=config.kmeans.max_iters,
        tol=config.kmeans.tol,
    )
    save_autoencoder(os.path.join(out_dir, "ae.bin"), ae)
    save_kmeans(os.path.join(out_dir, "kmeans.bin"), km)
    for split, windows in (("train", train_windows), ("test", test_windows)):
        labels = label_dataset(ae, km, windows)
        write_labels_csv(
            os.path.join(out_dir, f"labels_{split}.csv"),
            window_end_indices(windows.shape[0]),
            labels,
        )
    write_effective_config(config, out_dir)
    print(
        f"label: ae epochs={len(history)} kmeans iters={km.n_iter} "
        f"inertia={km.inertia:.6g}; wrote {out_dir}"
    )
    return EXIT_OK


def _load_labels_for(config, split, n_windows):
    path = os.path.join(config.run_dir("label"), f"labels_{split}.csv")
    if not os.path.exists(path):
        raise ConfigError(f"labels missing at {path}; run the label stage first")
    _, labels = read_labels_csv(path)
    if labels.shape[0] != n_windows:
        raise ConfigError(
            f"label file {path} covers {labels.shape[0]} windows, "
            f"expected {n_windows}"
        )
    return labels


def _spawn_per_seed(args, seeds, command):
    procs = []
    for seed in seeds:
        argv = [
            sys.executable, "-m", "fxppo.cli", command,
            "--config", args.config, "--seed", str(seed),
        ]
        if getattr(args, "force", False):
            argv.append("--force")
        procs.append((seed, subprocess.Popen(argv)))
    failed = [seed for seed, p in procs if p.wait() != 0]
    if failed:
        raise ConfigError(f"{command} failed for seeds {failed}")


def cmd_train(config, args):
    seeds = [args.seed] if args.seed is not None else list(config.seeds)
    if args.parallel_seeds and len(seeds) > 1:
        _spawn_per_seed(args, seeds, "train")
        return EXIT_OK

    split_dir = _split_dir(config, "train")
    windows = _load_array(os.path.join(split_dir, "windows.npy"), "training windows")
    returns = _load_array(os.path.join(split_dir, "returns.npy"), "training returns")
    labels = _load_labels_for(config, "train", windows.shape[0])

    for seed in seeds:
        out_dir = config.run_dir("train", seed)
        final = os.path.join(out_dir, "final.bin")
        if os.path.exists(final) and not args.force:
            raise ConfigError(
                f"{final} already exists; pass --force to overwrite"
            )
        os.makedirs(out_dir, exist_ok=True)
        write_effective_config(config, out_dir)
        _, log_rows = train_agent(
            windows, returns, labels, config.env, config.ppo, seed,
            checkpoint_dir=out_dir,
            log_path=os.path.join(out_dir, "train_log.csv"),
        )
        print(f"train: seed {seed} finished {len(log_rows)} updates -> {out_dir}")
    return EXIT_OK


def _write_rewards(path, rewards):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,reward\n")
        for i, r in enumerate(rewards):
            fh.write(f"{i},{float(r)!r}\n")


def _read_rewards(path):
    with open(path, encoding="utf-8") as fh:
        rows = fh.read().strip().split("\n")
    return np.array([float(r.split(",")[1]) for r in rows[1:]], dtype=np.float64)


def _backtest_one_seed(config, seed):
    checkpoint = os.path.join(config.run_dir("train", seed), "final.bin")
    if not os.path.exists(checkpoint):
        raise MissingCheckpoint(seed)
    split_dir = _split_dir(config, "test")
    windows = _load_array(os.path.join(split_dir, "windows.npy"), "test windows")
    returns = _load_array(os.path.join(split_dir, "returns.npy"), "test returns")
    net, _ = load_policy(checkpoint)
    report = run_backtest(
        net, windows, returns, config.env, seed=seed,
        checkpoint_hash=file_sha256(checkpoint),
    )
    seed_dir = config.run_dir("backtest", seed)
    os.makedirs(seed_dir, exist_ok=True)
    _write_rewards(os.path.join(seed_dir, "rewards.csv"), report.rewards)
    with open(os.path.join(seed_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "seed": seed,
                "checkpoint_hash": report.checkpoint_hash,
                "data_range": list(report.data_range),
            },
            fh,
        )
        fh.write("\n")
    return report


def _collect_reports(config, seeds):
    reports = []
    for seed in seeds:
        seed_dir = config.run_dir("backtest", seed)
        rewards_path = os.path.join(seed_dir, "rewards.csv")
        if not os.path.exists(rewards_path):
            raise MissingCheckpoint(seed)
        with open(os.path.join(seed_dir, "meta.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        reports.append(
            BacktestReport(
                _read_rewards(rewards_path), seed,
                tuple(meta["data_range"]), meta["checkpoint_hash"],
            )
        )
    return reports


def cmd_backtest(config, args):
    if args.seed is not None:
        _backtest_one_seed(config, args.seed)
        print(f"backtest: seed {args.seed} done")
        return EXIT_OK

    seeds = list(config.seeds)
    if args.parallel_seeds and len(seeds) > 1:
        _spawn_per_seed(args, seeds, "backtest")
        reports = _collect_reports(config, seeds)
    else:
        reports = [_backtest_one_seed(config, seed) for seed in seeds]

    aggregate = aggregate_seeds(reports)
    out_dir = config.run_dir("backtest")
    equity_path, summary_path = emit_report(
        aggregate, out_dir, baseline_summary=args.baseline
    )
    write_effective_config(config, out_dir)
    print(open(summary_path, encoding="utf-8").read(), end="")
    print(f"backtest: wrote {equity_path} and {summary_path}")
    return EXIT_OK


def _read_actions(path):
    text = _read_text(path).strip().split("\n")
    if not text or text[0] != "action":
        raise DataError(f"{path}: expected a single 'action' header column")
    actions = []
    for i, row in enumerate(text[1:], start=2):
        try:
            a = int(row)
        except ValueError as exc:
            raise DataError(f"{path} line {i}: not an integer action") from exc
        if a not in (-1, 0, 1):
            raise DataError(f"{path} line {i}: action must be -1, 0, or 1")
        actions.append(a)
    return actions


def cmd_simulate(config, args):
    """Direct arithmetic replay of an action file, independent of the
    stepping simulator, for cross-checking reward streams."""
    split_dir = _split_dir(config, args.split)
    returns = _load_array(os.path.join(split_dir, "returns.npy"), "returns")
    actions = _read_actions(args.actions)
    window_len = config.env.window_len
    offset = window_len if config.env.reward_timing == "next_return" else window_len - 1
    spread = config.env.spread_cost

    rewards = []
    position = 0
    for i, action in enumerate(actions):
        zi = args.start + offset + i
        if zi >= returns.shape[0]:
            raise DataError(
                f"action {i} needs return index {zi}, beyond {returns.shape[0]}"
            )
        z = float(returns[zi])
        rewards.append(action * z - spread * abs(action - position))
        position = action
    out = args.out or os.path.join(config.run_dir("simulate"), "rewards.csv")
    out_parent = os.path.dirname(out)
    if out_parent:
        os.makedirs(out_parent, exist_ok=True)
    _write_rewards(out, rewards)
    print(f"simulate: wrote {len(rewards)} rewards to {out}")
    return EXIT_OK


def cmd_tune(config, args):
    spec = config.tune
    split_dir = _split_dir(config, "train")
    windows = _load_array(os.path.join(split_dir, "windows.npy"), "training windows")
    out_dir = config.run_dir("tune")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    rows = ["trial,batch_size,learning_rate,latent_size,k,objective"]
    best = None
    minimize = spec.objective == "ae_reconstruction_mse"
    for trial in range(spec.trials):
        batch = int(rng.integers(spec.batch_size[0], spec.batch_size[1] + 1))
        lr = math.exp(
            rng.uniform(
                math.log(spec.learning_rate[0]), math.log(spec.learning_rate[1])
            )
        )
        latent = int(rng.integers(spec.latent_size[0], spec.latent_size[1] + 1))
        k = int(rng.integers(spec.k[0], spec.k[1] + 1))

        ae_cfg = AutoencoderConfig(
            learning_rate=lr, batch_size=batch, latent_size=latent,
            max_epochs=spec.ae_epochs, patience=spec.ae_epochs,
        )
        ae, _ = train_autoencoder(windows, ae_cfg, config.axt_seed)
        save_autoencoder(os.path.join(out_dir, f"trial_{trial}_ae.bin"), ae)
        if minimize:
            objective = ae.reconstruction_mse(windows)
        else:
            sample = windows[: min(windows.shape[0], 400)]
            codes = ae.encode(sample)
            km = kmeans_fit(codes, k=k, seed=config.axt_seed)
            save_kmeans(os.path.join(out_dir, f"trial_{trial}_kmeans.bin"), km)
            objective = silhouette_score(codes, label_dataset(ae, km, sample))
        rows.append(f"{trial},{batch},{lr!r},{latent},{k},{objective!r}")
        better = (
            best is None
            or (minimize and objective < best["objective"])
            or (not minimize and objective > best["objective"])
        )
        if better:
            best = {
                "trial": trial, "batch_size": batch, "learning_rate": lr,
                "latent_size": latent, "k": k, "objective": objective,
            }

    with open(os.path.join(out_dir, "trials.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    with open(os.path.join(out_dir, "best.json"), "w", encoding="utf-8") as fh:
        json.dump(best, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_effective_config(config, out_dir)
    print(
        f"tune: {spec.trials} trials, best objective {best['objective']!r} "
        f"(trial {best['trial']}) -> {out_dir}"
    )
    return EXIT_OK


def cmd_report(config, args):
    reports = _collect_reports(config, list(config.seeds))
    aggregate = aggregate_seeds(reports)
    out_dir = config.run_dir("backtest")
    _, summary_path = emit_report(
        aggregate, out_dir, baseline_summary=args.baseline
    )
    print(open(summary_path, encoding="utf-8").read(), end="")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="fxppo", description=__doc__)
    parser.add_argument(
        "--version", action="store_true", help="print version and backend"
    )
    sub = parser.add_subparsers(dest="command")

    def add(name, func, **extra_flags):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override a config entry (repeatable)",
        )
        p.set_defaults(func=func)
        for flag, kwargs in extra_flags.items():
            p.add_argument(flag, **kwargs)
        return p

    add("preprocess", cmd_preprocess)
    add("label", cmd_label)
    add(
        "train", cmd_train,
        **{
            "--seed": {"type": int, "default": None},
            "--force": {"action": "store_true"},
            "--parallel-seeds": {"action": "store_true", "dest": "parallel_seeds"},
        },
    )
    add(
        "backtest", cmd_backtest,
        **{
            "--seed": {"type": int, "default": None},
            "--baseline": {"default": None},
            "--parallel-seeds": {"action": "store_true", "dest": "parallel_seeds"},
        },
    )
    add(
        "simulate", cmd_simulate,
        **{
            "--actions": {"required": True},
            "--split": {"choices": SPLITS, "default": "test"},
            "--start": {"type": int, "default": 0},
            "--out": {"default": None},
        },
    )
    add("tune", cmd_tune)
    add("report", cmd_report, **{"--baseline": {"default": None}})
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "version", False) and args.command is None:
        from . import __version__

        print(f"fxppo {__version__} (backend: {backend_name()})")
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        config = load_config(args.config, args.set)
        return args.func(config, args)
    except (NonFiniteValue, DivergedLoss) as exc:
        print(f"fxppo: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        ConfigError,
        DataError,
        CheckpointError,
        LabelerError,
        MissingCheckpoint,
        OSError,
    ) as exc:
        print(f"fxppo: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
