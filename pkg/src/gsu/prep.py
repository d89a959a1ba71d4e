"""Per-scene preparation shared by pre-training and fine-tuning.

Features, interaction-force targets, local-frame futures, and label indices
are deterministic functions of the scene, so they're computed once per
dataset and cached in plain numpy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .safety_field import AgentSnapshot, FieldParams, vif_vector
from .scenario_gen import INTENTIONS, LabeledScene
from .scene_model import (FeatureConfig, FrameTransform, Scene,
                          build_agent_features, build_map_features, make_frame, to_local)


@dataclass
class PreparedScene:
    agent_data: np.ndarray          # (N_a, T, d_a)
    agent_valid: np.ndarray         # (N_a,) bool
    map_data: np.ndarray            # (N_m, L, d_m)
    map_valid: np.ndarray           # (N_m,) bool
    transform: FrameTransform
    vif_forces: np.ndarray | None = None     # (N_a,) in [0, 1]
    vif_valid: np.ndarray | None = None      # (N_a,) bool, ego slot False
    future_local: np.ndarray | None = None   # (T_fut, 2)
    intention_index: int | None = None


def vif_target_for_slots(scene: Scene, slot_indices: np.ndarray,
                         params: FieldParams):
    """Interaction-force target aligned with the agent tensor slots."""
    snapshots = [AgentSnapshot.from_track(scene.agents[i]) if i >= 0 else None
                 for i in slot_indices]
    return vif_vector(snapshots, ego_index=0, params=params)


def prepare_scene(item: LabeledScene | Scene, feat_cfg: FeatureConfig,
                  field_params: FieldParams | None = None) -> PreparedScene:
    labeled = item if isinstance(item, LabeledScene) else None
    scene = labeled.scene if labeled is not None else item
    transform = make_frame(scene)
    agents = build_agent_features(scene, transform, feat_cfg)
    lanes = build_map_features(scene, transform, feat_cfg)
    prepared = PreparedScene(
        agent_data=agents.data, agent_valid=agents.valid_mask,
        map_data=lanes.data, map_valid=lanes.valid_mask,
        transform=transform)
    if field_params is not None:
        target = vif_target_for_slots(scene, agents.slot_indices, field_params)
        prepared.vif_forces = target.forces
        prepared.vif_valid = target.valid_mask
    if labeled is not None:
        prepared.future_local = to_local(transform, labeled.future)
        prepared.intention_index = INTENTIONS.index(labeled.intention)
    return prepared


def prepare_dataset(scenes, feat_cfg: FeatureConfig,
                    field_params: FieldParams | None = None) -> list[PreparedScene]:
    return [prepare_scene(s, feat_cfg, field_params) for s in scenes]
