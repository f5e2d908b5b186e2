"""Engine configuration: loop constants, paths, and client endpoints.

Configuration lives in a single TOML file (``--config`` flag, or the
``FPE_CONFIG`` environment variable as a fallback path) with CLI flag
overrides applied on top. All randomness in the engine flows from the
one ``seed`` here; artifacts never embed wall-clock values.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

try:
    import tomllib  # type: ignore[import-not-found]
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib  # type: ignore[no-redef]


class ConfigError(ValueError):
    """A configuration value is outside its documented range."""


_PATH_KEYS = ("store", "artifacts")
_CLIENT_KEYS = ("model", "oracle", "trainer", "embedder", "scorer", "reviewer")
_CONSTANT_KEYS = (
    "runs",
    "gamma",
    "tau_sim",
    "budget",
    "alpha",
    "tau_h_quantile",
    "tau_ann",
    "dedup_hamming",
    "tfidf_cos",
    "plateau_eps",
    "patience",
    "fusion_lambda",
)


@dataclass
class EngineConfig:
    """All knobs for one engine instance.

    The loop constants keep their stock defaults (R=5, gamma=0.6,
    tau_sim=0.75, B=2000, alpha=1.0, tau_H quantile 0.8, tau_ann=0.5,
    Hamming 5, TF-IDF cosine 0.90, plateau eps 0.005 with patience 1,
    k range [2, 20], fusion lambda 1.0); everything else is engine
    plumbing or an ablation switch.
    """

    # paths (resolved relative to the workspace root)
    store: str = "store"
    artifacts: str = "artifacts"

    # loop constants
    runs: int = 5
    gamma: float = 0.6
    tau_sim: float = 0.75
    budget: int = 2000
    alpha: float = 1.0
    tau_h_quantile: float = 0.8
    tau_ann: float = 0.5
    dedup_hamming: int = 5
    tfidf_cos: float = 0.90
    plateau_eps: float = 0.005
    patience: int = 1
    k_min: int = 2
    k_max: int = 20
    fusion_lambda: float = 1.0

    # client endpoints: "mock:<seed>" (or bare "mock" to follow `seed`),
    # an http(s) base URL, or "none"
    model: str = "mock"
    oracle: str = "mock"
    trainer: str = "mock"
    embedder: str = "mock"
    scorer: str = "mock"
    reviewer: str = "mock"

    # engine behavior
    seed: int = 0
    global_budget: int = 10000
    gamma_inclusive: bool = False
    quality_gate: bool = True
    route_override: str = ""  # "", "adopt_oracle", "escalate", "adopt_self"
    escalate_accept_adopts: str = "oracle"  # or "self"
    sampling_strategy: str = "failure_driven"  # or "random"
    annotation_tasks: str = "mixed"  # mixed | perception | description
    review_wait_s: float = 0.0  # how long an iteration waits on humans
    tau_h_fixed: float = -1.0  # >= 0 pins tau_H instead of the dev quantile
    desc_pass_threshold: float = 0.5
    metrics_runs: int = 1
    eval_parallelism: int = 1
    text_dim: int = 64
    cluster_linkage: str = "average"
    cluster_metric: str = "cosine"
    tau_floor: float = 0.5
    tau_step: float = 0.05

    def validate(self) -> "EngineConfig":
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if not 0.0 <= self.tau_sim < 1.0:
            raise ConfigError("tau_sim must be in [0, 1)")
        if self.budget < 0 or self.global_budget < 0:
            raise ConfigError("budgets must be non-negative")
        if self.alpha < 0.0:
            raise ConfigError("alpha must be >= 0")
        if not 0.0 < self.tau_h_quantile <= 1.0:
            raise ConfigError("tau_h_quantile must be in (0, 1]")
        if not 0.0 <= self.tau_ann <= 1.0:
            raise ConfigError("tau_ann must be in [0, 1]")
        if not 0 <= self.dedup_hamming <= 64:
            raise ConfigError("dedup_hamming must be in [0, 64]")
        if not 0.0 <= self.tfidf_cos <= 1.0:
            raise ConfigError("tfidf_cos must be in [0, 1]")
        if self.plateau_eps < 0.0 or self.patience < 1:
            raise ConfigError("plateau_eps must be >= 0 and patience >= 1")
        if not 2 <= self.k_min <= self.k_max:
            raise ConfigError("k range must satisfy 2 <= k_min <= k_max")
        if self.fusion_lambda < 0.0:
            raise ConfigError("fusion_lambda must be >= 0")
        if self.route_override not in ("", "adopt_oracle", "escalate", "adopt_self"):
            raise ConfigError(f"unknown route_override {self.route_override!r}")
        if self.escalate_accept_adopts not in ("oracle", "self"):
            raise ConfigError("escalate_accept_adopts must be 'oracle' or 'self'")
        if self.sampling_strategy not in ("failure_driven", "random"):
            raise ConfigError(f"unknown sampling_strategy {self.sampling_strategy!r}")
        if self.annotation_tasks not in ("mixed", "perception", "description"):
            raise ConfigError(f"unknown annotation_tasks {self.annotation_tasks!r}")
        if self.review_wait_s < 0.0:
            raise ConfigError("review_wait_s must be >= 0")
        if not 0.0 <= self.tau_floor <= self.tau_sim or self.tau_step <= 0.0:
            raise ConfigError("tau relaxation requires 0 <= tau_floor <= tau_sim and tau_step > 0")
        return self

    # -- TOML round trip ---------------------------------------------------

    @classmethod
    def loads(cls, text: str) -> "EngineConfig":
        raw = tomllib.loads(text)
        known = {f.name: f.type for f in fields(cls)}
        flat: dict[str, Any] = {}
        for section in ("paths", "constants", "clients", "engine"):
            part = raw.get(section, {})
            if not isinstance(part, dict):
                raise ConfigError(f"[{section}] must be a table")
            for key, value in part.items():
                if key == "k_range":
                    if not (isinstance(value, list) and len(value) == 2):
                        raise ConfigError("k_range must be a two-element array")
                    flat["k_min"], flat["k_max"] = int(value[0]), int(value[1])
                    continue
                if key not in known:
                    raise ConfigError(f"unknown config key {section}.{key}")
                flat[key] = value
        if "seed" in raw:
            flat["seed"] = raw["seed"]
        cfg = cls(**flat)
        # ints arriving as TOML floats and vice versa
        for f in fields(cls):
            v = getattr(cfg, f.name)
            if f.type in ("int",) and isinstance(v, float) and v.is_integer():
                setattr(cfg, f.name, int(v))
            elif f.type in ("float",) and isinstance(v, int):
                setattr(cfg, f.name, float(v))
        return cfg.validate()

    @classmethod
    def load(cls, path: str | os.PathLike[str] | None = None) -> "EngineConfig":
        """Read config from ``path``, the FPE_CONFIG env var, or defaults."""
        if path is None:
            path = os.environ.get("FPE_CONFIG") or None
        if path is None:
            return cls().validate()
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        def fmt(value: Any) -> str:
            if isinstance(value, bool):
                return "true" if value else "false"
            if isinstance(value, str):
                return '"%s"' % value.replace("\\", "\\\\").replace('"', '\\"')
            if isinstance(value, float):
                return repr(value)
            return str(value)

        engine_keys = [
            f.name
            for f in fields(self)
            if f.name not in _PATH_KEYS + _CLIENT_KEYS + _CONSTANT_KEYS + ("seed", "k_min", "k_max")
        ]
        lines = [f"seed = {self.seed}", "", "[paths]"]
        lines += [f"{k} = {fmt(getattr(self, k))}" for k in _PATH_KEYS]
        lines += ["", "[constants]"]
        lines += [f"{k} = {fmt(getattr(self, k))}" for k in _CONSTANT_KEYS]
        lines.append(f"k_range = [{self.k_min}, {self.k_max}]")
        lines += ["", "[clients]"]
        lines += [f"{k} = {fmt(getattr(self, k))}" for k in _CLIENT_KEYS]
        lines += ["", "[engine]"]
        lines += [f"{k} = {fmt(getattr(self, k))}" for k in engine_keys]
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike[str]) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def with_overrides(self, **overrides: Any) -> "EngineConfig":
        """Copy with non-None overrides applied (CLI flags)."""
        known = {f.name for f in fields(self)}
        changed = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(changed) - known
        if unknown:
            raise ConfigError(f"unknown config overrides: {sorted(unknown)}")
        out = EngineConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **changed})
        return out.validate()
