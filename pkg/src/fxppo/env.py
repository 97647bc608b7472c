"""Episodic trading simulator over precomputed feature windows.

The agent sees the window ending at the cursor, picks a position in
{-1, 0, +1} (sell, stay out, buy), and earns position times the close
return of the following step, minus an optional spread charge on
position changes. Episodes are fixed-length unless the data runs out
first. The simulator itself is deterministic; all randomness lives in
the caller's start-index schedule.
"""

from collections import namedtuple

import numpy as np

ACTION_VALUES = (-1, 0, 1)
ACTION_NAMES = ("sell", "hold", "buy")


class EnvError(Exception):
    pass


class OutOfData(EnvError):
    pass


class EpisodeFinished(EnvError):
    pass


class EnvConfig:
    """Simulator knobs.

    reward_timing "next_return" pays the return realized after the
    action; "same_step" pays the newest return already inside the
    observed window (look-ahead, kept only for comparison runs).
    """

    def __init__(
        self,
        episode_length=600,
        window_len=16,
        spread_cost=0.0,
        reward_timing="next_return",
    ):
        if episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if spread_cost < 0:
            raise ValueError("spread_cost must be >= 0")
        if reward_timing not in ("next_return", "same_step"):
            raise ValueError(f"unknown reward_timing {reward_timing!r}")
        self.episode_length = episode_length
        self.window_len = window_len
        self.spread_cost = spread_cost
        self.reward_timing = reward_timing

    def to_dict(self):
        return {
            "episode_length": self.episode_length,
            "window_len": self.window_len,
            "spread_cost": self.spread_cost,
            "reward_timing": self.reward_timing,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


StepResult = namedtuple("StepResult", ["observation", "reward", "done", "z"])


class TradingEnv:
    """Steps through aligned (windows, returns) arrays.

    `windows[i]` is the flattened feature window whose newest feature
    row is `i + window_len - 1`; `returns` is the full close-return
    stream those windows were built from, so
    `len(returns) == len(windows) + window_len - 1`.
    """

    def __init__(self, windows, returns, config=None):
        self.config = config or EnvConfig()
        self.windows = np.asarray(windows, dtype=np.float64)
        self.returns = np.asarray(returns, dtype=np.float64)
        if self.windows.ndim != 2:
            raise ValueError("windows must be 2-D")
        expected = self.windows.shape[0] + self.config.window_len - 1
        if self.returns.shape[0] != expected:
            raise ValueError(
                f"returns length {self.returns.shape[0]} does not align with "
                f"{self.windows.shape[0]} windows (expected {expected})"
            )
        self.n_windows = self.windows.shape[0]
        self.cursor = None
        self.steps_in_episode = 0
        self.episode_start = None
        self.position = 0
        self.done = True

    def _z_index(self, cursor):
        if self.config.reward_timing == "next_return":
            return cursor + self.config.window_len
        return cursor + self.config.window_len - 1

    def max_start_index(self):
        """Largest start index that still allows one step."""
        return self.n_windows - 1 - (
            1 if self.config.reward_timing == "next_return" else 0
        )

    def reset(self, start_index=0):
        start_index = int(start_index)
        if start_index < 0 or start_index > self.max_start_index():
            raise OutOfData(
                f"start index {start_index} outside [0, {self.max_start_index()}]"
            )
        self.cursor = start_index
        self.episode_start = start_index
        self.steps_in_episode = 0
        self.position = 0
        self.done = False
        return self.windows[start_index]

    def step(self, action):
        if self.done or self.cursor is None:
            raise EpisodeFinished("reset the environment before stepping")
        action = int(action)
        if action not in ACTION_VALUES:
            raise ValueError(f"action must be one of {ACTION_VALUES}, got {action}")
        zi = self._z_index(self.cursor)
        if zi >= self.returns.shape[0]:
            raise OutOfData(f"no return available at stream index {zi}")
        z = float(self.returns[zi])
        reward = action * z - self.config.spread_cost * abs(action - self.position)
        self.position = action
        self.steps_in_episode += 1
        self.cursor += 1

        exhausted = (
            self.cursor >= self.n_windows
            or self._z_index(self.cursor) >= self.returns.shape[0]
        )
        self.done = exhausted or self.steps_in_episode >= self.config.episode_length
        obs = self.windows[self.cursor] if self.cursor < self.n_windows else None
        return StepResult(obs, reward, self.done, z)


def episode_return(rewards):
    """Left-to-right sum so replays and equity curves agree bit for bit."""
    total = 0.0
    for r in rewards:
        total += float(r)
    return total
