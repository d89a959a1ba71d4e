"""Self-supervised pre-training: interaction-force regression plus masked
roadmap reconstruction, combined by a weighted sum.

Masked lanes get their feature rows zeroed before the subgraph encoder and a
learned mask embedding added to the resulting token (their valid flag stays
set so attention can still reach them). The force head reads the ego token;
the roadmap head reads the tokens at the masked lane slots.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, SceneEncoder, TokenSet
from .errors import DataError, NumericsError
from .prep import PreparedScene, prepare_dataset
from .safety_field import FieldParams
from .scene_model import FeatureConfig
from .seeding import sub_rng
from .tensor_engine import core as T
from .tensor_engine.checkpoint import load_checkpoint, save_checkpoint
from .tensor_engine.nn import MLP
from .tensor_engine.optim import AdamState, adam_step


@dataclass
class PretrainConfig:
    w_vif: float = 10.0
    w_mrm: float = 1.0
    mask_ratio: float = 0.5
    epochs: int = 60
    batch_size: int = 64
    base_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.w_vif < 0 or self.w_mrm < 0 or (self.w_vif == 0 and self.w_mrm == 0):
            raise DataError("loss weights must be >= 0 and not both zero")
        if not 0.0 < self.mask_ratio < 1.0:
            raise DataError("mask_ratio must be in (0, 1)")


@dataclass
class MaskedBatch:
    original: np.ndarray            # (N_m, L, d_m) unmasked map features
    masked: np.ndarray              # same, with masked lane rows zeroed
    masked_lane_indices: np.ndarray
    vif_forces: np.ndarray | None
    vif_valid: np.ndarray | None


def mask_lanes(map_data: np.ndarray, valid_mask: np.ndarray, ratio: float,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero out a uniform random subset of valid lane rows.

    The count is round(ratio * valid lanes), at least 1. Returns the masked
    copy and the sorted masked slot indices.
    """
    valid_idx = np.flatnonzero(valid_mask)
    if valid_idx.size == 0:
        raise DataError("mask_lanes needs at least one valid lane")
    n_mask = max(1, int(round(ratio * valid_idx.size)))
    chosen = np.sort(rng.choice(valid_idx, size=n_mask, replace=False))
    masked = map_data.copy()
    masked[chosen] = 0.0
    return masked, chosen


def build_masked_batch(prep: PreparedScene, ratio: float,
                       rng: np.random.Generator) -> MaskedBatch:
    masked, chosen = mask_lanes(prep.map_data, prep.map_valid, ratio, rng)
    return MaskedBatch(original=prep.map_data, masked=masked,
                       masked_lane_indices=chosen,
                       vif_forces=prep.vif_forces, vif_valid=prep.vif_valid)


def vif_loss(pred: T.DiffTensor, target: np.ndarray, valid_mask: np.ndarray) -> T.DiffTensor:
    """Mean squared force error over valid non-ego slots; 0 if none are valid."""
    count = int(valid_mask.sum())
    if count == 0:
        return T.constant(0.0)
    d = T.sub(pred, T.constant(target))
    sq = T.mul(d, d)
    return T.scale(T.sum(T.mul(sq, T.constant(valid_mask.astype(np.float64)))), 1.0 / count)


# Keeps the L2-norm derivative finite when a distance is exactly zero; shifts
# the loss by at most ~1e-12 per term.
_NORM_EPS = 1e-24


def mrm_loss(pred_coords: T.DiffTensor, true_coords: np.ndarray) -> T.DiffTensor:
    """Mean summed endpoint distance over masked lanes and their segments.

    Inputs are (n_masked, L, 4): per segment [start_x, start_y, end_x, end_y].
    Each segment contributes |start - start_hat| + |end - end_hat|; the sum is
    divided by n_masked * L so the value is a per-segment mean.
    """
    n_ml, n_seg, _ = pred_coords.shape
    if n_ml == 0:
        raise DataError("mrm_loss needs a nonempty masked set")
    d = T.sub(pred_coords, T.constant(true_coords))
    start_sq = T.sum(T.mul(T.slice_axis(d, 2, 0, 2), T.slice_axis(d, 2, 0, 2)), axis=2)
    end_sq = T.sum(T.mul(T.slice_axis(d, 2, 2, 2), T.slice_axis(d, 2, 2, 2)), axis=2)
    dist = T.add(T.sqrt(start_sq, eps=_NORM_EPS), T.sqrt(end_sq, eps=_NORM_EPS))
    return T.scale(T.sum(dist), 1.0 / (n_ml * n_seg))


def combine_losses(w_vif: float, w_mrm: float, l_vif: float, l_mrm: float) -> float:
    """The weighted pre-train objective, on plain floats (used for logging)."""
    return w_vif * l_vif + w_mrm * l_mrm


# Regression targets are meter-scale local coordinates while tokens are
# unit-scale; emitting scale * raw keeps the needed head weights small enough
# to reach within desk-scale step budgets.
COORD_OUTPUT_SCALE = 20.0


class PretrainModel:
    """Backbone plus the two self-supervised decoders and the mask embedding."""

    def __init__(self, feat_cfg: FeatureConfig, bb_cfg: BackboneConfig,
                 rng: np.random.Generator, output_scale: float = COORD_OUTPUT_SCALE):
        self.feat_cfg = feat_cfg
        self.bb_cfg = bb_cfg
        self.output_scale = output_scale
        self.encoder = SceneEncoder(feat_cfg, bb_cfg, rng)
        self.params = self.encoder.params
        d = bb_cfg.token_dim
        self.mask_embed = self.params.zeros("mrm_head.mask_embed", (d,))
        self.vif_head = MLP(self.params, "vif_head", [d, d, feat_cfg.n_agents], rng)
        self.mrm_head = MLP(self.params, "mrm_head.decode",
                            [d, d, feat_cfg.lane_segments * 4], rng)

    def predict_vif(self, ego_token: T.DiffTensor, train=False, rng=None) -> T.DiffTensor:
        """Force vector in (0, 1): two-layer head with a terminal sigmoid."""
        out = self.vif_head(ego_token, train=train, rng=rng, drop=self.bb_cfg.dropout)
        return T.reshape(T.sigmoid(out), (self.feat_cfg.n_agents,))

    def predict_mrm(self, masked_tokens: T.DiffTensor, train=False, rng=None) -> T.DiffTensor:
        """Per-lane segment coordinates, (n_masked, L, 4)."""
        out = self.mrm_head(masked_tokens, train=train, rng=rng, drop=self.bb_cfg.dropout)
        out = T.scale(out, self.output_scale)
        return T.reshape(out, (masked_tokens.shape[0], self.feat_cfg.lane_segments, 4))

    def encode_masked(self, prep: PreparedScene, masked_map: np.ndarray,
                      masked_idx: np.ndarray, train=False, rng=None) -> TokenSet:
        agent_tokens = self.encoder.sub_agent(T.constant(prep.agent_data), prep.agent_valid)
        map_tokens = self.encoder.sub_map(T.constant(masked_map), prep.map_valid)
        if masked_idx.size:
            indicator = np.zeros((self.feat_cfg.n_lanes, 1))
            indicator[masked_idx] = 1.0
            d = self.bb_cfg.token_dim
            offset = T.mul(T.constant(indicator), T.reshape(self.mask_embed, (1, d)))
            map_tokens = T.add(map_tokens, offset)
        return self.encoder.interact(agent_tokens, map_tokens,
                                     prep.agent_valid, prep.map_valid,
                                     train=train, rng=rng)

    def scene_losses(self, prep: PreparedScene, batch: MaskedBatch | None,
                     need_vif: bool, train=False, rng=None):
        """(l_vif, l_mrm) DiffTensors for one scene; either may be constant 0."""
        masked_map = batch.masked if batch is not None else prep.map_data
        masked_idx = batch.masked_lane_indices if batch is not None else np.empty(0, dtype=int)
        tokens = self.encode_masked(prep, masked_map, masked_idx, train=train, rng=rng)
        n_a = self.feat_cfg.n_agents
        if need_vif:
            ego = T.slice_axis(tokens.combined, 0, 0, 1)
            pred = self.predict_vif(ego, train=train, rng=rng)
            l_vif = vif_loss(pred, prep.vif_forces, prep.vif_valid)
        else:
            l_vif = T.constant(0.0)
        if batch is not None:
            lane_tokens = T.gather_rows(tokens.combined, n_a + masked_idx)
            pred_coords = self.predict_mrm(lane_tokens, train=train, rng=rng)
            l_mrm = mrm_loss(pred_coords, batch.original[masked_idx][:, :, :4])
        else:
            l_mrm = T.constant(0.0)
        return l_vif, l_mrm


def pretrain_step(preps: list[PreparedScene], batches: list[MaskedBatch | None],
                  model: PretrainModel, cfg: PretrainConfig, opt: AdamState,
                  lr: float, drop_rng) -> tuple[float, float, float]:
    """One optimizer step over a batch of scenes; returns (l_vif, l_mrm, l_pre)."""
    vif_terms, mrm_terms = [], []
    for prep, batch in zip(preps, batches):
        l_v, l_m = model.scene_losses(prep, batch, need_vif=cfg.w_vif > 0,
                                      train=True, rng=drop_rng)
        vif_terms.append(l_v)
        mrm_terms.append(l_m)
    inv = 1.0 / len(preps)
    l_vif = T.scale(_sum_tensors(vif_terms), inv)
    l_mrm = T.scale(_sum_tensors(mrm_terms), inv)
    l_pre = T.add(T.scale(l_vif, cfg.w_vif), T.scale(l_mrm, cfg.w_mrm))
    if not np.isfinite(l_pre.values):
        raise NumericsError("pre-train loss is not finite")
    T.backward(l_pre)
    adam_step(model.params, opt, lr)
    return float(l_vif.values), float(l_mrm.values), float(l_pre.values)


def _sum_tensors(terms):
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


LOG_HEADER = ("epoch", "l_vif", "l_mrm", "l_pre", "lr")


def run_pretrain(scenes, feat_cfg: FeatureConfig, bb_cfg: BackboneConfig,
                 field_params: FieldParams, cfg: PretrainConfig,
                 out_dir=None, resume_from=None, config_hash: str = "",
                 preps: list[PreparedScene] | None = None,
                 stop_after_epoch: int | None = None):
    """Train on the combined objective; returns (model, per-epoch log rows).

    Resuming from a checkpoint written by this function reproduces the
    uninterrupted run bit for bit: all per-step randomness is derived from
    (seed, stream name, step index), and optimizer moments ride in the
    checkpoint. `stop_after_epoch` interrupts the run early without touching
    the schedule (for resumption tests and staged runs).
    """
    if preps is None:
        if not scenes:
            raise DataError("pre-training needs a nonempty dataset")
        preps = prepare_dataset(scenes, feat_cfg,
                                field_params if cfg.w_vif > 0 else None)
    model = PretrainModel(feat_cfg, bb_cfg, sub_rng(cfg.seed, "init"))
    steps_per_epoch = max(1, (len(preps) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    opt = AdamState(cfg.base_lr, total_steps)
    start_epoch = 0
    if resume_from is not None:
        arrays, step, _ = load_checkpoint(resume_from)
        model.params.load_arrays(arrays)
        opt.load_arrays(arrays)
        opt.step = step
        start_epoch = step // steps_per_epoch

    rows = []
    last_epoch = cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.epochs)
    for epoch in range(start_epoch, last_epoch):
        order = sub_rng(cfg.seed, "shuffle", epoch).permutation(len(preps))
        sums = np.zeros(3)
        lr_epoch = None
        for b in range(steps_per_epoch):
            gstep = epoch * steps_per_epoch + b
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            batch_preps = [preps[i] for i in idx]
            if cfg.w_mrm > 0:
                mask_rng = sub_rng(cfg.seed, "masking", gstep)
                batches = [build_masked_batch(p, cfg.mask_ratio, mask_rng)
                           for p in batch_preps]
            else:
                batches = [None] * len(batch_preps)
            drop_rng = sub_rng(cfg.seed, "dropout", gstep)
            lr = opt.lr_at(gstep)
            if lr_epoch is None:
                lr_epoch = lr
            sums += pretrain_step(batch_preps, batches, model, cfg, opt, lr, drop_rng)
        count = steps_per_epoch
        rows.append((epoch, sums[0] / count, sums[1] / count, sums[2] / count, lr_epoch))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_log(out_dir / "loss_log.csv", rows)
        arrays = dict(model.params.state_arrays())
        arrays.update(opt.state_arrays())
        save_checkpoint(out_dir / "checkpoint.ckpt", arrays, step=opt.step,
                        config_hash=config_hash)
    return model, rows


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for epoch, l_vif, l_mrm, l_pre, lr in rows:
            writer.writerow([epoch, repr(float(l_vif)), repr(float(l_mrm)),
                             repr(float(l_pre)), repr(float(lr))])


def evaluate_mrm(model: PretrainModel, preps: list[PreparedScene],
                 mask_ratio: float, seed: int) -> float:
    """Mean masked-endpoint L2 error (meters) under a fixed masking seed."""
    errors = []
    for i, prep in enumerate(preps):
        if not prep.map_valid.any():
            continue
        rng = sub_rng(seed, "eval-mask", i)
        batch = build_masked_batch(prep, mask_ratio, rng)
        tokens = model.encode_masked(prep, batch.masked, batch.masked_lane_indices)
        lane_tokens = T.gather_rows(tokens.combined,
                                    model.feat_cfg.n_agents + batch.masked_lane_indices)
        pred = model.predict_mrm(lane_tokens).values
        true = batch.original[batch.masked_lane_indices][:, :, :4]
        d = pred - true
        errors.append(np.linalg.norm(d[:, :, :2], axis=-1).ravel())
        errors.append(np.linalg.norm(d[:, :, 2:], axis=-1).ravel())
    return float(np.mean(np.concatenate(errors)))
