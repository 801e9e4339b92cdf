"""Flat, JSON-serializable experiment description with per-figure presets.

Learning rates are in the units of this package's loss, the Riemann sum
sum_k (out_k - o_k)**2 * dt. A loss averaged over steps would need rates
``2T / dt`` times larger for the same trajectory.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

from .. import toy

KINDS = ("fig2a", "fig2bcd", "fig3", "fig4", "figS1", "figS2", "custom")

# toy learning-rate grid, roughly log-spaced over [1e-11, 2e-9] and dense
# around the critical rate
TOY_ALPHAS = [1e-11, 2e-11, 5e-11, 1e-10, 2e-10, 5e-10, 8e-10, 9e-10, 9.2e-10,
              1e-09, 1.5e-09, 2e-09]
S2_RANKS = [1, 2, 3, 4, 5, 10, 30, 50, 100]


@dataclass
class ExperimentConfig:
    kind: str = "custom"
    master_seed: int = 0
    seeds: list = field(default_factory=lambda: list(range(10)))
    out: str = "runs"
    workers: int = 1

    # toy model
    T: float = 100.0
    toy_dt: float = 0.1
    x_star: float = 10.0
    toy_c: float = 25.0
    toy_c_values: list = field(default_factory=lambda: [1.0, 5.0, 25.0])
    x_cap: Optional[float] = None
    profile_points: int = 200
    profile_lo: float = 1.0 / 16.0     # multiples of r*
    profile_hi: float = 100.0
    r0_mean: float = 10.0              # multiples of r*
    r0_std: float = 0.1
    toy_alphas: list = field(default_factory=lambda: list(TOY_ALPHAS))
    trace_alphas: list = field(default_factory=lambda: [1e-10, 9e-10, 1e-9])
    toy_epochs: int = 3000
    toy_learned_loss: float = 5.0

    # network and task
    N: int = 100
    rank: int = 1
    tau: float = 10.0
    dt: float = 5.0
    x0: float = -0.3
    readout: str = "latent"
    kappa_star: float = 1.0
    c: float = 10.0
    c_trainable: bool = False
    sigmoid_out: bool = True
    init_scale: float = 1.0

    # training
    alpha: float = 1e-4
    alpha_high: float = 1e-3
    epochs: int = 20000
    epochs_high: int = 3000
    analysis_stride: int = 50
    eps_ghost: float = 0.05
    snapshot_epochs: list = field(default_factory=lambda: [0, 5000, 10000, 15000])
    save_checkpoints: bool = True

    # stuck criterion and confidence intervention
    stuck_window: int = 50
    stuck_threshold: float = 0.5
    new_c: float = 1.0
    phase1_epochs: int = 6000
    phase2_epochs: int = 4000

    # sweep grids
    alphas: list = field(default_factory=lambda: [1e-4, 3e-4, 1e-3, 3e-3])
    ranks: list = field(default_factory=lambda: [1])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if not self.seeds:
            raise ValueError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seed list has duplicates")
        if any(int(s) != s or s < 0 for s in self.seeds):
            raise ValueError("seeds must be non-negative integers")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.T <= 0 or self.toy_dt <= 0 or self.dt <= 0 or self.tau <= 0:
            raise ValueError("T, dt, toy_dt and tau must be positive")
        if not self.alphas or not self.ranks or not self.toy_alphas:
            raise ValueError("sweep grids must be non-empty")
        if any(not 1 <= k <= self.N for k in self.ranks) or not 1 <= self.rank <= self.N:
            raise ValueError(f"ranks must lie in [1, N={self.N}]")
        if self.readout not in ("latent", "linear"):
            raise ValueError(f"unknown readout {self.readout!r}")
        for name in ("epochs", "epochs_high", "toy_epochs", "phase1_epochs", "phase2_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.analysis_stride < 0:
            raise ValueError("analysis_stride must be >= 0")

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names - {"derived"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in names})

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_override(self, item: str) -> "ExperimentConfig":
        """Apply one ``key=value`` override, coercing to the field's type."""
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        return self.replace(**{key: _coerce(getattr(self, key), raw.strip(), key)})

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _coerce(current, raw: str, key: str):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{key} expects a boolean, got {raw!r}")
    if isinstance(current, list):
        if raw.startswith("["):
            return list(json.loads(raw))
        items = [s for s in raw.split(",") if s.strip()]
        conv = int if key in ("seeds", "ranks", "snapshot_epochs") else float
        return [conv(s) for s in items]
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None and key == "x_cap":
        return None if raw.lower() in ("none", "null") else float(raw)
    return raw


def parse_seeds(text: str) -> list:
    """``"10"`` means seed indices 0..9; ``"0,3,7"`` lists them explicitly."""
    text = text.strip()
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    n = int(text)
    if n < 1:
        raise ValueError("seed count must be >= 1")
    return list(range(n))


def derive_seed(master: int, kind: str, cell: int, index: int) -> int:
    """Run seed from (master seed, experiment kind, cell index, seed index).

    First eight bytes of SHA-256 over ``"master:kind:cell:index"``, read
    big-endian and masked to 63 bits. Stable across platforms and versions.
    """
    key = f"{int(master)}:{kind}:{int(cell)}:{int(index)}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") & (2**63 - 1)


# -- presets -----------------------------------------------------------------

_DESK = {
    "fig2a": {},
    "fig2bcd": {"seeds": list(range(10))},
    "fig3": {"seeds": list(range(10)), "alpha": 1e-4, "alpha_high": 1e-3,
             "epochs": 20000, "epochs_high": 3000, "analysis_stride": 50},
    "fig4": {"seeds": list(range(20)), "alpha": 1e-3, "c": 10.0, "new_c": 1.0,
             "phase1_epochs": 6000, "phase2_epochs": 4000, "analysis_stride": 0},
    "figS1": {"seeds": list(range(5)), "alphas": [1e-4, 3e-4, 1e-3, 3e-3],
              "epochs": 15000, "analysis_stride": 0},
    "figS2": {"seeds": list(range(5)), "readout": "linear", "ranks": list(S2_RANKS),
              "alphas": [1e-4, 5e-4, 1e-3], "epochs": 6000, "analysis_stride": 0},
    "custom": {},
}

_PAPER = {
    "fig4": {"seeds": list(range(100))},
    "figS1": {"seeds": list(range(10))},
    "figS2": {"seeds": list(range(10))},
}


def preset(kind: str, paper_scale: bool = False) -> ExperimentConfig:
    if kind not in KINDS:
        raise ValueError(f"unknown experiment kind {kind!r}")
    changes = dict(_DESK[kind])
    if paper_scale:
        changes.update(_PAPER.get(kind, {}))
    return ExperimentConfig(kind=kind, **changes)


def resolved_config(cfg: ExperimentConfig) -> dict:
    """Config fields plus every derived number a run uses."""
    out = cfg.to_dict()
    r_star = toy.optimal_r(cfg.T)
    steps = 2 * cfg.T / cfg.dt
    out["derived"] = {
        "r_star": r_star,
        "alpha_star": toy.critical_learning_rate(cfg.T),
        "x_cap": 100.0 * cfg.x_star if cfg.x_cap is None else float(cfg.x_cap),
        "toy_steps": int(round(2 * cfg.T / cfg.toy_dt)),
        "rnn_steps": int(round(steps)),
        "delta": cfg.dt / cfg.tau,
        "init_std": cfg.init_scale / math.sqrt(cfg.N),
        "seed_rule": "sha256('master:kind:cell:index')[:8] big-endian & (2**63-1)",
        "config_hash": cfg.digest(),
    }
    return out
