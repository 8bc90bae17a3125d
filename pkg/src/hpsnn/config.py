"""Line-based run configuration: ``[section]`` headers and ``key = value``
pairs. Unknown sections or keys are hard errors; a duplicated key wins
last with a logged warning. Defaults mirror the MNIST hyper-parameter
column (dt = 1 ms, k_u = 0.6, v_th = 0.3, tau_w = 40 ms, a = 0.5).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

from .core import SimConstants
from .errors import ConfigError

log = logging.getLogger(__name__)

__all__ = ["RunConfig", "parse_config", "config_text"]

EXPERIMENTS = ("train", "eval", "gradcheck", "robustness", "fewshot",
               "continual", "costmodel", "rankstats")


@dataclass
class RunConfig:
    """Everything one experiment run needs, resolved and validated."""

    experiment: str = "train"
    seed: int | None = None
    out: str = "runs/out"

    # [sim]
    dt: float = 1.0
    T: int = 8
    k_u: float = 0.6
    v_th: float = 0.3
    tau_w: float = 40.0
    a: float = 0.5
    no_decay: bool = False

    # [model]
    layers: list[int] = field(default_factory=lambda: [784, 256, 10])
    plastic: list[bool] | None = None
    coding: str = "rate"
    encoding: str = "bernoulli"
    w_init_scale: list[float] | None = None
    alpha0: float = 0.01
    eta0: float = 0.01
    beta0: float = 0.0

    # [train]
    epochs: int = 10
    batch: int = 100
    lr: float = 1e-3
    meta_lr: float = 1e-3
    xi: float = 0.05
    meta_every: int = 10
    task_batch: int = 5
    meta_batch: int = 32
    val_fraction: float = 0.1
    limit_train: int = 0
    limit_test: int = 0

    # [data]
    data_dir: str = "data/mnist"
    checkpoint: str = ""

    # [robustness]
    ci_levels: list[int] = field(default_factory=lambda: list(range(0, 15, 2)))
    nl_levels: list[int] = field(default_factory=lambda: list(range(0, 15, 2)))
    distance_samples: int = 1000

    # [fewshot]
    way: int = 5
    shot: int = 1
    query: int = 5
    feature_dim: int = 32
    fs_classes: int = 20
    spread: float = 0.1
    episodes: int = 300

    # [continual]
    tasks: int = 5
    density: float = 0.03
    task_epochs: int = 2
    theta_tasks: int = 3
    samples_per_task: int = 10000

    # [cost]
    max_fan_in: int = 196
    max_neurons: int = 128
    clock_hz: float = 300e6
    cost_T: int = 3
    cost_dims: list[int] = field(default_factory=lambda: [784, 512, 10])

    def sim_constants(self) -> SimConstants:
        try:
            return SimConstants(dt=self.dt, T=self.T, k_u=self.k_u,
                                v_th=self.v_th, tau_w=self.tau_w, a=self.a,
                                no_decay=self.no_decay)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.seed is None:
            raise ConfigError("seed is mandatory (set [run] seed or --seed)")
        self.sim_constants()
        if self.coding not in ("rate", "rank"):
            raise ConfigError(f"coding must be rate or rank, got {self.coding!r}")
        if self.encoding not in ("bernoulli", "rows", "analog"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if len(self.layers) < 2:
            raise ConfigError("layers needs at least [in, out]")
        if self.plastic is not None and len(self.plastic) != len(self.layers) - 1:
            raise ConfigError("plastic flags must cover every connection layer")
        if (self.w_init_scale is not None
                and len(self.w_init_scale) != len(self.layers) - 1):
            raise ConfigError("w_init_scale must cover every connection layer")
        if not 0.0 <= self.density <= 1.0:
            raise ConfigError(f"density must be in [0, 1], got {self.density}")
        return self


def _to_bool(raw: str, where: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {raw!r}")


def _to_int(raw: str, where: str) -> int:
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{where}: expected an integer, got {raw!r}") from e


def _to_float(raw: str, where: str) -> float:
    try:
        return float(raw)
    except ValueError as e:
        raise ConfigError(f"{where}: expected a number, got {raw!r}") from e


def _to_int_list(raw: str, where: str) -> list[int]:
    return [_to_int(x.strip(), where) for x in raw.split(",") if x.strip()]


def _to_bool_list(raw: str, where: str) -> list[bool]:
    return [_to_bool(x.strip(), where) for x in raw.split(",") if x.strip()]


def _to_float_list(raw: str, where: str) -> list[float]:
    return [_to_float(x.strip(), where) for x in raw.split(",") if x.strip()]


# (section, key) -> (attribute, converter); converters get (raw, where).
_SCHEMA = {
    ("run", "experiment"): ("experiment", lambda raw, w: raw),
    ("run", "seed"): ("seed", _to_int),
    ("run", "out"): ("out", lambda raw, w: raw),
    ("sim", "dt"): ("dt", _to_float),
    ("sim", "t"): ("T", _to_int),
    ("sim", "k_u"): ("k_u", _to_float),
    ("sim", "v_th"): ("v_th", _to_float),
    ("sim", "tau_w"): ("tau_w", _to_float),
    ("sim", "a"): ("a", _to_float),
    ("sim", "no_decay"): ("no_decay", _to_bool),
    ("model", "layers"): ("layers", _to_int_list),
    ("model", "plastic"): ("plastic", _to_bool_list),
    ("model", "coding"): ("coding", lambda raw, w: raw),
    ("model", "encoding"): ("encoding", lambda raw, w: raw),
    ("model", "w_init_scale"): ("w_init_scale", _to_float_list),
    ("model", "alpha0"): ("alpha0", _to_float),
    ("model", "eta0"): ("eta0", _to_float),
    ("model", "beta0"): ("beta0", _to_float),
    ("train", "epochs"): ("epochs", _to_int),
    ("train", "batch"): ("batch", _to_int),
    ("train", "lr"): ("lr", _to_float),
    ("train", "meta_lr"): ("meta_lr", _to_float),
    ("train", "xi"): ("xi", _to_float),
    ("train", "meta_every"): ("meta_every", _to_int),
    ("train", "task_batch"): ("task_batch", _to_int),
    ("train", "meta_batch"): ("meta_batch", _to_int),
    ("train", "val_fraction"): ("val_fraction", _to_float),
    ("train", "limit_train"): ("limit_train", _to_int),
    ("train", "limit_test"): ("limit_test", _to_int),
    ("data", "dir"): ("data_dir", lambda raw, w: raw),
    ("data", "checkpoint"): ("checkpoint", lambda raw, w: raw),
    ("robustness", "ci_levels"): ("ci_levels", _to_int_list),
    ("robustness", "nl_levels"): ("nl_levels", _to_int_list),
    ("robustness", "distance_samples"): ("distance_samples", _to_int),
    ("fewshot", "way"): ("way", _to_int),
    ("fewshot", "shot"): ("shot", _to_int),
    ("fewshot", "query"): ("query", _to_int),
    ("fewshot", "feature_dim"): ("feature_dim", _to_int),
    ("fewshot", "classes"): ("fs_classes", _to_int),
    ("fewshot", "spread"): ("spread", _to_float),
    ("fewshot", "episodes"): ("episodes", _to_int),
    ("continual", "tasks"): ("tasks", _to_int),
    ("continual", "density"): ("density", _to_float),
    ("continual", "task_epochs"): ("task_epochs", _to_int),
    ("continual", "theta_tasks"): ("theta_tasks", _to_int),
    ("continual", "samples_per_task"): ("samples_per_task", _to_int),
    ("cost", "max_fan_in"): ("max_fan_in", _to_int),
    ("cost", "max_neurons"): ("max_neurons", _to_int),
    ("cost", "clock_hz"): ("clock_hz", _to_float),
    ("cost", "t"): ("cost_T", _to_int),
    ("cost", "dims"): ("cost_dims", _to_int_list),
}

_SECTIONS = {s for s, _ in _SCHEMA}


def parse_config(path) -> RunConfig:
    """Parse and validate a config file into a RunConfig."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    cfg = RunConfig()
    section = None
    seen: set[tuple[str, str]] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or stripped.startswith(";"):
            continue
        where = f"{path}:{lineno}"
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip().lower()
        raw = raw.strip()
        entry = _SCHEMA.get((section, key))
        if entry is None:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        if (section, key) in seen:
            log.warning("%s: duplicate key %s.%s, last value wins", where,
                        section, key)
        seen.add((section, key))
        attr, conv = entry
        setattr(cfg, attr, conv(raw, where))
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Canonical text snapshot of a config (for run manifests)."""
    lines = []
    by_section: dict[str, list[tuple[str, str]]] = {}
    for (section, key), (attr, _) in _SCHEMA.items():
        val = getattr(cfg, attr)
        if val is None:
            continue
        if isinstance(val, list):
            rendered = ",".join(str(int(v)) if isinstance(v, bool) else str(v)
                                for v in val)
        elif isinstance(val, bool):
            rendered = "true" if val else "false"
        else:
            rendered = str(val)
        by_section.setdefault(section, []).append((key, rendered))
    for section in sorted(by_section):
        lines.append(f"[{section}]")
        for key, rendered in sorted(by_section[section]):
            lines.append(f"{key} = {rendered}")
        lines.append("")
    return "\n".join(lines)
