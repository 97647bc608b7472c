"""Policy evaluation on held-out data plus the reported metrics.

A backtest walks the evaluation range in sequential, non-overlapping
episodes, always taking the greedy action, and never updates the
network. Metrics follow the reporting conventions used throughout:
total return is the plain sum of per-step rewards, the Sharpe ratio is
mean over population standard deviation of those rewards, and relative
improvement is (new - original) / |original| * 100.
"""

import numpy as np

from .env import ACTION_VALUES, TradingEnv


class BacktestError(Exception):
    pass


class DegenerateReturns(BacktestError):
    pass


class TooFewSamples(BacktestError):
    pass


class ZeroBaseline(BacktestError):
    pass


class EmptyInput(BacktestError):
    pass


class MissingCheckpoint(BacktestError):
    def __init__(self, seed):
        super().__init__(f"no checkpoint found for seed {seed}")
        self.seed = seed


class BacktestReport:
    """Reward stream plus identifying info for one (seed, checkpoint)."""

    def __init__(self, rewards, seed, data_range=None, checkpoint_hash=""):
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.seed = seed
        self.data_range = data_range or (0, len(self.rewards))
        self.checkpoint_hash = checkpoint_hash
        # cumulative left-to-right so the terminal value IS the total
        self.equity_curve = np.cumsum(self.rewards)
        self.total_return = (
            float(self.equity_curve[-1]) if self.rewards.size else 0.0
        )

    @property
    def steps(self):
        return int(self.rewards.size)

    @property
    def sharpe(self):
        """Sharpe of the reward stream; NaN when undefined (constant or
        too-short streams) so reports can still be written."""
        try:
            return sharpe_ratio(self.rewards)
        except (DegenerateReturns, TooFewSamples):
            return float("nan")


def run_backtest(net, windows, returns, env_config, seed=0, checkpoint_hash=""):
    """Greedy episode-by-episode replay over the whole range."""
    env = TradingEnv(windows, returns, env_config)
    rewards = []
    start = 0
    while start <= env.max_start_index():
        obs = env.reset(start)
        h, c = net.initial_state()
        reset = 1
        done = False
        while not done:
            action, _, _, _, h, c = net.act(obs, h, c, reset, mode="greedy")
            reset = 0
            result = env.step(ACTION_VALUES[action])
            rewards.append(result.reward)
            obs = result.observation
            done = result.done
        start = env.cursor
    return BacktestReport(
        rewards, seed, (0, env.n_windows), checkpoint_hash
    )


def sharpe_ratio(rewards):
    """Mean divided by population standard deviation (divisor n)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise TooFewSamples(f"need at least 2 rewards, got {r.size}")
    std = r.std(ddof=0)
    if std == 0.0:
        raise DegenerateReturns("constant reward stream has no Sharpe ratio")
    return float(r.mean() / std)


def ppi(value_new, value_original):
    """Percentage improvement of value_new over value_original."""
    if value_original == 0:
        raise ZeroBaseline("cannot compute improvement over a zero baseline")
    return (value_new - value_original) / abs(value_original) * 100.0


class SeedAggregate:
    def __init__(self, reports):
        if not reports:
            raise EmptyInput("no backtest reports to aggregate")
        self.per_seed = list(reports)
        n = len(self.per_seed)
        self.mean_total_return = sum(r.total_return for r in self.per_seed) / n
        self.mean_sharpe = sum(r.sharpe for r in self.per_seed) / n


def aggregate_seeds(reports):
    return SeedAggregate(reports)


def emit_report(aggregate, out_dir, baseline_summary=None):
    """Writes equity.csv and summary.txt under out_dir.

    baseline_summary, when given, is a previously written summary file;
    its mean metrics become the denominators of an improvement block.
    Returns (equity_path, summary_path).
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    equity_path = os.path.join(out_dir, "equity.csv")
    summary_path = os.path.join(out_dir, "summary.txt")

    lines = ["step,seed,cumulative_return"]
    for report in aggregate.per_seed:
        for i, value in enumerate(report.equity_curve):
            lines.append(f"{i},{report.seed},{float(value)!r}")
    with open(equity_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    out = []
    for report in aggregate.per_seed:
        out.append(f"seed: {report.seed}")
        out.append(f"total_return_pct: {report.total_return * 100.0!r}")
        out.append(f"sharpe: {report.sharpe!r}")
        out.append(f"steps: {report.steps}")
        out.append(f"data_range: {report.data_range[0]}..{report.data_range[1]}")
        out.append(f"checkpoint_hash: {report.checkpoint_hash}")
        out.append("")
    out.append(f"mean_total_return_pct: {aggregate.mean_total_return * 100.0!r}")
    out.append(f"mean_sharpe: {aggregate.mean_sharpe!r}")

    if baseline_summary is not None:
        base = parse_summary(baseline_summary)
        out.append("")
        out.append("[ppi]")
        out.append("metric,baseline,model,ppi_pct")
        pairs = [
            ("total_return_pct", base["mean_total_return_pct"],
             aggregate.mean_total_return * 100.0),
            ("sharpe", base["mean_sharpe"], aggregate.mean_sharpe),
        ]
        for name, b, m in pairs:
            try:
                improvement = repr(ppi(m, b))
            except ZeroBaseline:
                improvement = "undefined"
            out.append(f"{name},{b!r},{m!r},{improvement}")
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
    return equity_path, summary_path


def parse_summary(path):
    """Reads a summary file back into {mean metrics, per_seed list}."""
    per_seed = []
    result = {"per_seed": per_seed}
    current = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("[") or "," in line:
                continue
            key, _, value = line.partition(": ")
            if key == "seed":
                current = {"seed": int(value)}
                per_seed.append(current)
            elif key in ("total_return_pct", "sharpe") and current is not None:
                current[key] = float(value)
            elif key == "steps" and current is not None:
                current[key] = int(value)
            elif key in ("data_range", "checkpoint_hash") and current is not None:
                current[key] = value
            elif key in ("mean_total_return_pct", "mean_sharpe"):
                result[key] = float(value)
    return result
