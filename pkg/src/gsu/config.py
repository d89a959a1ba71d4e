"""Flat dotted-key run configuration.

Config files are UTF-8 `key = value` lines with `#` comments. Unknown keys
are rejected. Every command writes the fully resolved configuration next to
its outputs so a run can be reproduced from that file alone.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .errors import UsageError
from .heads import FinetuneConfig, HeadConfig
from .pretrain import PretrainConfig
from .safety_field import FieldParams
from .scenario_gen import GenConfig
from .scene_model import FeatureConfig

_BOOL = {"true": True, "false": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise UsageError(f"expected true/false, got {text!r}")


# key -> (default, parser)
KNOWN_KEYS = {
    "run.seed": (0, int),
    "run.workers": (1, int),
    "features.n_agents": (20, int),
    "features.n_lanes": (32, int),
    "features.lane_segments": (10, int),
    "features.t_hist": (20, int),
    "field.g": (1.0, float),
    "field.vehicle_mass": (1500.0, float),
    "field.a_coef": (1.0, float),
    "field.b_coef": (1.0, float),
    "field.c_coef": (1.0, float),
    "field.k1": (1.0, float),
    "field.k2": (0.05, float),
    "field.r_min": (0.5, float),
    "field.grid_res": (0.2, float),
    "field.negate_exponent": (False, _parse_bool),
    "field.pedestrian_mass_scale": (0.05, float),
    "field.cyclist_mass_scale": (0.1, float),
    "backbone.token_dim": (64, int),
    "backbone.n_interleave": (2, int),
    "backbone.m_alltoken": (3, int),
    "backbone.subgraph_layers": (3, int),
    "backbone.dropout": (0.1, float),
    "backbone.layer_norm": (False, _parse_bool),
    "heads.k_modes": (6, int),
    "heads.t_fut": (30, int),
    "pretrain.w_vif": (10.0, float),
    "pretrain.w_mrm": (1.0, float),
    "pretrain.mask_ratio": (0.5, float),
    "pretrain.epochs": (60, int),
    "pretrain.batch_size": (64, int),
    "pretrain.base_lr": (1e-3, float),
    "finetune.epochs": (30, int),
    "finetune.batch_size": (0, int),      # 0 = task default (trajectory 64, intention 256)
    "finetune.base_lr": (1e-3, float),
    "finetune.val_fraction": (0.2, float),
    "finetune.freeze_backbone": (False, _parse_bool),
    "gen.family": ("highway", str),
    "gen.count": (1000, int),
    "gen.agents_min": (3, int),
    "gen.agents_max": (8, int),
    "gen.speed_min": (8.0, float),
    "gen.speed_max": (14.0, float),
    "gen.lane_width": (3.5, float),
    "gen.lane_count": (4, int),
    "gen.noise_std": (0.1, float),
    "gen.left_frac": (0.25, float),
    "gen.right_frac": (0.25, float),
}


def default_values() -> dict:
    return {key: default for key, (default, _) in KNOWN_KEYS.items()}


def parse_value(key: str, text: str):
    if key not in KNOWN_KEYS:
        raise UsageError(f"unknown config key {key!r}")
    _, parser = KNOWN_KEYS[key]
    try:
        return parser(text)
    except (ValueError, TypeError):
        raise UsageError(f"bad value for {key}: {text!r}")


def load_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
        key, _, text = line.partition("=")
        values[key.strip()] = parse_value(key.strip(), text.strip())
    return values


def serialize(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict) -> str:
    return hashlib.sha256(serialize(values).encode("utf-8")).hexdigest()[:16]


@dataclass
class RunConfig:
    """Resolved configuration for one command invocation."""
    values: dict

    @classmethod
    def resolve(cls, config_file=None, overrides: dict | None = None) -> "RunConfig":
        values = default_values()
        if config_file is not None:
            values.update(load_config_file(config_file))
        for key, text in (overrides or {}).items():
            values[key] = parse_value(key, text) if isinstance(text, str) else text
        return cls(values=values)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    def features(self) -> FeatureConfig:
        v = self.values
        return FeatureConfig(n_agents=v["features.n_agents"], n_lanes=v["features.n_lanes"],
                             lane_segments=v["features.lane_segments"], t_hist=v["features.t_hist"])

    def field(self) -> FieldParams:
        v = self.values
        return FieldParams(g=v["field.g"], vehicle_mass=v["field.vehicle_mass"],
                           a_coef=v["field.a_coef"], b_coef=v["field.b_coef"],
                           c_coef=v["field.c_coef"], k1=v["field.k1"], k2=v["field.k2"],
                           r_min=v["field.r_min"], grid_res=v["field.grid_res"],
                           negate_exponent=v["field.negate_exponent"],
                           pedestrian_mass_scale=v["field.pedestrian_mass_scale"],
                           cyclist_mass_scale=v["field.cyclist_mass_scale"])

    def backbone(self) -> BackboneConfig:
        v = self.values
        return BackboneConfig(token_dim=v["backbone.token_dim"],
                              n_interleave=v["backbone.n_interleave"],
                              m_alltoken=v["backbone.m_alltoken"],
                              subgraph_layers=v["backbone.subgraph_layers"],
                              dropout=v["backbone.dropout"],
                              layer_norm=v["backbone.layer_norm"])

    def heads(self) -> HeadConfig:
        return HeadConfig(k_modes=self.values["heads.k_modes"], t_fut=self.values["heads.t_fut"])

    def pretrain(self) -> PretrainConfig:
        v = self.values
        return PretrainConfig(w_vif=v["pretrain.w_vif"], w_mrm=v["pretrain.w_mrm"],
                              mask_ratio=v["pretrain.mask_ratio"], epochs=v["pretrain.epochs"],
                              batch_size=v["pretrain.batch_size"], base_lr=v["pretrain.base_lr"],
                              seed=v["run.seed"])

    def finetune(self) -> FinetuneConfig:
        v = self.values
        return FinetuneConfig(epochs=v["finetune.epochs"], batch_size=v["finetune.batch_size"],
                              base_lr=v["finetune.base_lr"],
                              val_fraction=v["finetune.val_fraction"],
                              freeze_backbone=v["finetune.freeze_backbone"], seed=v["run.seed"])

    def gen(self) -> GenConfig:
        v = self.values
        left, right = v["gen.left_frac"], v["gen.right_frac"]
        return GenConfig(family=v["gen.family"], scene_count=v["gen.count"],
                         agent_count=(v["gen.agents_min"], v["gen.agents_max"]),
                         speed=(v["gen.speed_min"], v["gen.speed_max"]),
                         lane_width=v["gen.lane_width"], lane_count=v["gen.lane_count"],
                         seed=v["run.seed"], noise_std=v["gen.noise_std"],
                         t_hist=v["features.t_hist"], t_fut=v["heads.t_fut"],
                         intent_weights=(left, 1.0 - left - right, right))

    def serialized(self) -> str:
        return serialize(self.values)

    def hash(self) -> str:
        return config_hash(self.values)

    def write(self, out_dir) -> None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "resolved.cfg").write_text(self.serialized(), encoding="utf-8")
