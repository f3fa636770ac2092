"""INI config files for training runs and ablation grids.

Schema (every section and key optional; defaults come from the dataclasses)::

    [model]            ; any ModelConfig field
    vision = tiny
    text = tiny
    align = T_to_I     ; or I_to_T
    pool = Attn-pool   ; or BERT
    head = classification

    [train]            ; any TrainConfig field
    learning_rate = 0.001
    epochs = 30

    [data]
    split_seed = 0

    [grid]             ; ablation files only; comma-separated value lists
    align = T_to_I, I_to_T
    pool = BERT, Attn-pool
    head = classification, matching
"""

from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import HeadKind, ModelConfig
from .train import TrainConfig

GRID_KEYS = ("vision", "text", "align", "pool", "head")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split_seed: int = 0


def _read(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - {"model", "train", "data", "grid"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return parser


def _section(parser, name) -> dict[str, str]:
    return dict(parser[name]) if parser.has_section(name) else {}


def _run_from_parser(parser) -> RunConfig:
    data = _section(parser, "data")
    unknown = set(data) - {"split_seed"}
    if unknown:
        raise ConfigError(f"unknown data keys: {sorted(unknown)}")
    try:
        split_seed = int(data.get("split_seed", 0))
    except ValueError:
        raise ConfigError(f"split_seed must be an integer, got {data['split_seed']!r}") from None
    return RunConfig(
        ModelConfig.from_dict(_section(parser, "model")),
        TrainConfig.from_dict(_section(parser, "train")),
        split_seed,
    )


def load_run_config(path) -> RunConfig:
    return _run_from_parser(_read(path))


def save_run_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["model"] = cfg.model.to_dict()
    parser["train"] = cfg.train.to_dict()
    parser["data"] = {"split_seed": str(cfg.split_seed)}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def expand_grid(base: ModelConfig, axes: dict[str, list[str]]) -> list[ModelConfig]:
    """Cartesian product of the axis values over ``base``.

    Align and pool do not apply to the matching head, so each matching
    combination is emitted once rather than once per (align, pool) pair.
    """
    unknown = set(axes) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid axes: {sorted(unknown)}")
    names = list(axes)
    out: list[ModelConfig] = []
    seen = set()
    for values in itertools.product(*(axes[n] for n in names)):
        cfg = base.with_(**dict(zip(names, values)))
        key = cfg.variant_names + (cfg.head,)
        if cfg.head is HeadKind.Matching:
            key = cfg.variant_names[:2] + (cfg.head,)
        if key in seen:
            continue
        seen.add(key)
        out.append(cfg)
    return out


def load_grid(path) -> tuple[list[ModelConfig], RunConfig]:
    parser = _read(path)
    run = _run_from_parser(parser)
    axes = {k: [v.strip() for v in raw.split(",") if v.strip()] for k, raw in _section(parser, "grid").items()}
    if any(not v for v in axes.values()):
        raise ConfigError(f"{path}: empty grid axis")
    grid = expand_grid(run.model, axes)
    if not grid:
        raise ConfigError(f"{path}: grid is empty")
    return grid, run
