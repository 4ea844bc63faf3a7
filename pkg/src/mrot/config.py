"""Training configuration and its YAML file form.

A config file groups the fields into sections::

    seed: 0
    mode: uda
    model: {hidden: [16], feature_dim: 8}
    optim: {batch_size: 32, learning_rate: 0.05, epochs: 20}
    loss: {alpha: 1.0, beta: 0.1, mu0: 0.1}
    transport: {lambda1: 0.1, lambda2: 0.01}
    ground_cost: {epsilon: 1.0, kappa: 0.2, zeta: 0.001}
    clustering: {n_clusters: 4}

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from mrot.ground_cost import MODES, JsCostParams
from mrot.transport import OtParams


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    mode: str = "uda"
    # model
    hidden: list = field(default_factory=lambda: [16])
    feature_dim: int = 8
    # optim
    batch_size: int = 32
    learning_rate: float = 0.05
    epochs: int = 20
    # loss
    alpha: float = 1.0
    beta: float = 0.1
    mu0: float = 0.1
    max_triplets: int = 20_000
    # transport
    lambda1: float = 0.1
    lambda2: float = 0.01
    # looser than the standalone solver defaults: the envelope gradient only
    # needs the plan to SGD-noise accuracy
    sinkhorn_tol: float = 1e-7
    sinkhorn_max_iter: int = 1_000
    gcg_max_iter: int = 20
    gcg_tol: float = 1e-5
    # ground cost
    epsilon: float = 1.0
    kappa: float = 0.2
    zeta: float = 1e-3
    # clustering
    n_clusters: int = 4
    kmeans_max_iter: int = 100
    reinit_clusters_each_epoch: bool = False
    # data
    labeled_target_fraction: float = 0.25

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        for name in ("alpha", "beta", "mu0", "lambda2", "epsilon", "kappa", "learning_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.lambda1 > 0:
            raise ConfigError("lambda1 must be > 0")
        if not self.zeta > 0:
            raise ConfigError("zeta must be > 0")
        if self.n_clusters < 1 or self.epochs < 1 or self.feature_dim < 1:
            raise ConfigError("n_clusters, epochs and feature_dim must be positive")
        if not 0 < self.labeled_target_fraction <= 1:
            raise ConfigError("labeled_target_fraction must be in (0, 1]")
        self.hidden = [int(h) for h in self.hidden]

    @property
    def ot_params(self) -> OtParams:
        return OtParams(self.lambda1, self.lambda2, self.sinkhorn_tol, self.sinkhorn_max_iter,
                        self.gcg_max_iter, self.gcg_tol)

    @property
    def js_params(self) -> JsCostParams:
        return JsCostParams(self.epsilon, self.kappa, self.zeta)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        """Sectioned dict, the inverse of :func:`config_from_dict`."""
        flat = dataclasses.asdict(self)
        out = {k: flat[k] for k in TOP_LEVEL}
        for section, keys in SECTIONS.items():
            out[section] = {k: flat[k] for k in keys}
        return out


TOP_LEVEL = ("seed", "mode")
SECTIONS = {
    "model": ("hidden", "feature_dim"),
    "optim": ("batch_size", "learning_rate", "epochs"),
    "loss": ("alpha", "beta", "mu0", "max_triplets"),
    "transport": ("lambda1", "lambda2", "sinkhorn_tol", "sinkhorn_max_iter", "gcg_max_iter", "gcg_tol"),
    "ground_cost": ("epsilon", "kappa", "zeta"),
    "clustering": ("n_clusters", "kmeans_max_iter", "reinit_clusters_each_epoch"),
    "data": ("labeled_target_fraction",),
}


def config_from_dict(data: dict, base: TrainConfig | None = None) -> TrainConfig:
    flat = {}
    for key, value in (data or {}).items():
        if key in TOP_LEVEL:
            flat[key] = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            for sub, v in value.items():
                if sub not in SECTIONS[key]:
                    raise ConfigError(f"unknown key {key}.{sub}; allowed: {', '.join(SECTIONS[key])}")
                flat[sub] = v
        else:
            raise ConfigError(
                f"unknown config key {key!r}; allowed: {', '.join(TOP_LEVEL + tuple(SECTIONS))}"
            )
    base = base or TrainConfig()
    return base.replace(**{k: _coerce(k, v, getattr(base, k)) for k, v in flat.items()})


def _coerce(key, value, default):
    # YAML 1.1 reads "1e-5" (no dot) as a string
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(value, bool):
        try:
            num = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a number, got {value!r}") from None
        if isinstance(default, int):
            if num != int(num):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            return int(num)
        return num
    return value


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def dump_config(config: TrainConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
