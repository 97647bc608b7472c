"""Run configuration: one JSON file drives the whole pipeline.

Defaults merged with the file, then with `--set key=value` overrides
(flags win). The sha256 hash of the effective config keys every output
directory, so runs with different settings can never collide.
"""

import hashlib
import json
import os

from .agent import PPOConfig
from .env import EnvConfig
from .labeler import AutoencoderConfig

OUT_ROOT_ENV = "FXPPO_OUT"
DEFAULT_SEEDS = (30, 50, 70, 99)


class ConfigError(Exception):
    pass


class KMeansConfig:
    def __init__(self, k=12, max_iters=300, tol=1e-8):
        self.k = k
        self.max_iters = max_iters
        self.tol = tol

    def to_dict(self):
        return {"k": self.k, "max_iters": self.max_iters, "tol": self.tol}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class TuneSpec:
    """Random-search space; learning rate is sampled log-uniformly."""

    def __init__(
        self,
        trials=10,
        objective="ae_reconstruction_mse",
        seed=0,
        ae_epochs=5,
        batch_size=(16, 64),
        learning_rate=(1e-5, 1e-2),
        latent_size=(4, 16),
        k=(4, 16),
    ):
        if trials < 1:
            raise ConfigError("tune.trials must be >= 1")
        if objective not in ("ae_reconstruction_mse", "kmeans_silhouette"):
            raise ConfigError(f"unknown tune objective {objective!r}")
        for name, rng in (
            ("batch_size", batch_size),
            ("learning_rate", learning_rate),
            ("latent_size", latent_size),
            ("k", k),
        ):
            lo, hi = rng
            if not lo < hi:
                raise ConfigError(f"tune.{name} range must be non-degenerate")
        self.trials = trials
        self.objective = objective
        self.seed = seed
        self.ae_epochs = ae_epochs
        self.batch_size = tuple(batch_size)
        self.learning_rate = tuple(learning_rate)
        self.latent_size = tuple(latent_size)
        self.k = tuple(k)

    def to_dict(self):
        return {
            "trials": self.trials,
            "objective": self.objective,
            "seed": self.seed,
            "ae_epochs": self.ae_epochs,
            "batch_size": list(self.batch_size),
            "learning_rate": list(self.learning_rate),
            "latent_size": list(self.latent_size),
            "k": list(self.k),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class RunConfig:
    def __init__(
        self,
        train_csv,
        test_csv,
        seeds=None,
        axt_seed=30,
        out_root=None,
        labeler=None,
        kmeans=None,
        env=None,
        ppo=None,
        tune=None,
    ):
        self.train_csv = train_csv
        self.test_csv = test_csv
        self.seeds = list(seeds) if seeds is not None else list(DEFAULT_SEEDS)
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seed list entries must be unique")
        self.axt_seed = axt_seed
        self.out_root = out_root or os.environ.get(OUT_ROOT_ENV, "out")
        self.labeler = AutoencoderConfig.from_dict(labeler or {})
        self.kmeans = KMeansConfig.from_dict(kmeans or {})
        self.env = EnvConfig.from_dict(env or {})
        self.ppo = PPOConfig.from_dict(ppo or {})
        self.tune = TuneSpec.from_dict(tune or {})

    def to_dict(self):
        return {
            "train_csv": self.train_csv,
            "test_csv": self.test_csv,
            "seeds": list(self.seeds),
            "axt_seed": self.axt_seed,
            "out_root": self.out_root,
            "labeler": self.labeler.to_dict(),
            "kmeans": self.kmeans.to_dict(),
            "env": self.env.to_dict(),
            "ppo": self.ppo.to_dict(),
            "tune": self.tune.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    def config_hash(self):
        """Stable digest of everything that affects results (the output
        root itself is excluded so moving outputs does not rekey them)."""
        d = self.to_dict()
        d.pop("out_root")
        canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def run_dir(self, *parts):
        return os.path.join(self.out_root, self.config_hash(), *map(str, parts))


def load_config(path, overrides=()):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        key, _, value = item.partition("=")
        if not _:
            raise ConfigError(f"override {item!r} is not key=value")
        apply_override(data, key, value)
    return RunConfig.from_dict(data)


def apply_override(data, dotted_key, raw_value):
    """Sets a possibly nested key; values parse as JSON, else strings."""
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node = data
    keys = dotted_key.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {dotted_key!r}")
    node[keys[-1]] = value


def write_effective_config(config, directory):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "effective_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def validate_split(train_series, test_series):
    """The evaluation range must strictly follow the training range."""
    if train_series.timestamps[-1] >= test_series.timestamps[0]:
        raise ConfigError(
            "training data must end before evaluation data begins: "
            f"train ends {train_series.timestamps[-1]}, "
            f"test starts {test_series.timestamps[0]}"
        )
