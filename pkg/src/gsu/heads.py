"""Fine-tuning heads, losses, metrics, and the fine-tune loop.

Trajectory prediction: a four-layer MLP regresses K candidate futures from
the ego token and a three-layer MLP scores them; training is winner-takes-all
on the mode with the closest endpoint. Intention recognition: a four-layer
MLP over three classes. Both heads read the ego token (slot 0) only.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, SceneEncoder
from .errors import DataError, NumericsError
from .prep import PreparedScene, prepare_dataset
from .scenario_gen import INTENTIONS
from .scene_model import FeatureConfig
from .seeding import sub_rng
from .tensor_engine import core as T
from .tensor_engine.checkpoint import load_checkpoint, save_checkpoint
from .tensor_engine.nn import MLP, cross_entropy, smooth_l1
from .tensor_engine.optim import AdamState, adam_step

BACKBONE_PREFIXES = ("subgraph.", "interleave.", "alltoken.")

TASKS = ("trajectory", "intention")
DEFAULT_BATCH = {"trajectory": 64, "intention": 256}


@dataclass
class HeadConfig:
    k_modes: int = 6
    t_fut: int = 30
    # trajectory coordinates are meter-scale while tokens are unit-scale; the
    # regression head emits output_scale * raw
    output_scale: float = 20.0


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 0          # 0 -> task default (trajectory 64, intention 256)
    base_lr: float = 1e-3
    val_fraction: float = 0.2
    freeze_backbone: bool = False
    seed: int = 0

    def effective_batch(self, task: str) -> int:
        return self.batch_size if self.batch_size > 0 else DEFAULT_BATCH[task]


@dataclass
class TrajectoryPrediction:
    trajectories: T.DiffTensor     # (K, T_fut, 2) local frame
    mode_probs: T.DiffTensor       # (K,) nonnegative, sums to 1


@dataclass
class IntentionPrediction:
    probs: T.DiffTensor            # (p_left, p_straight, p_right)

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.probs.values))   # ties -> lowest index


class TrajectoryModel:
    def __init__(self, feat_cfg: FeatureConfig, bb_cfg: BackboneConfig,
                 head_cfg: HeadConfig, rng: np.random.Generator):
        self.encoder = SceneEncoder(feat_cfg, bb_cfg, rng)
        self.params = self.encoder.params
        self.head_cfg = head_cfg
        self.dropout = bb_cfg.dropout
        d = bb_cfg.token_dim
        out = head_cfg.k_modes * head_cfg.t_fut * 2
        self.reg_head = MLP(self.params, "traj_head", [d, d, d, d, out], rng)
        self.prob_head = MLP(self.params, "traj_prob", [d, d, d, head_cfg.k_modes], rng)

    def forward(self, prep: PreparedScene, train=False, rng=None) -> TrajectoryPrediction:
        tokens = self.encoder.encode_scene(
            _as_agent_tensor(prep), _as_map_tensor(prep), train=train, rng=rng)
        ego = T.slice_axis(tokens.combined, 0, 0, 1)
        k, t_fut = self.head_cfg.k_modes, self.head_cfg.t_fut
        raw = self.reg_head(ego, train=train, rng=rng, drop=self.dropout)
        traj = T.reshape(T.scale(raw, self.head_cfg.output_scale), (k, t_fut, 2))
        logits = T.reshape(self.prob_head(ego, train=train, rng=rng, drop=self.dropout), (k,))
        return TrajectoryPrediction(trajectories=traj, mode_probs=T.softmax(logits))


class IntentionModel:
    def __init__(self, feat_cfg: FeatureConfig, bb_cfg: BackboneConfig,
                 rng: np.random.Generator):
        self.encoder = SceneEncoder(feat_cfg, bb_cfg, rng)
        self.params = self.encoder.params
        self.dropout = bb_cfg.dropout
        d = bb_cfg.token_dim
        self.head = MLP(self.params, "intent_head", [d, d, d, d, len(INTENTIONS)], rng)

    def forward(self, prep: PreparedScene, train=False, rng=None) -> IntentionPrediction:
        tokens = self.encoder.encode_scene(
            _as_agent_tensor(prep), _as_map_tensor(prep), train=train, rng=rng)
        ego = T.slice_axis(tokens.combined, 0, 0, 1)
        logits = T.reshape(self.head(ego, train=train, rng=rng, drop=self.dropout), (3,))
        return IntentionPrediction(probs=T.softmax(logits))


def _as_agent_tensor(prep: PreparedScene):
    from .scene_model import AgentFeatureTensor
    return AgentFeatureTensor(data=prep.agent_data, valid_mask=prep.agent_valid)


def _as_map_tensor(prep: PreparedScene):
    from .scene_model import MapFeatureTensor
    return MapFeatureTensor(data=prep.map_data, valid_mask=prep.map_valid)


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------

def best_mode(prediction: TrajectoryPrediction, ground_truth: np.ndarray) -> int:
    """Index of the mode with the smallest endpoint distance; ties -> lowest."""
    ends = prediction.trajectories.values[:, -1, :]
    dists = np.linalg.norm(ends - ground_truth[-1], axis=1)
    return int(np.argmin(dists))


def prediction_loss(prediction: TrajectoryPrediction, ground_truth: np.ndarray) -> T.DiffTensor:
    """Winner-takes-all regression plus mode classification.

    The selected-mode index is a hard argmin (not differentiated); the
    regression term touches only that mode, the classification term couples
    all mode probabilities through the softmax.
    """
    i_star = best_mode(prediction, ground_truth)
    chosen = T.slice_axis(prediction.trajectories, 0, i_star, 1)
    reg = smooth_l1(T.reshape(chosen, ground_truth.shape), T.constant(ground_truth))
    cls = cross_entropy(prediction.mode_probs, i_star)
    return T.add(reg, cls)


def min_ade(trajectories: np.ndarray, ground_truth: np.ndarray) -> float:
    """Minimum over modes of the time-averaged displacement."""
    d = np.linalg.norm(trajectories - ground_truth[None], axis=-1)
    return float(d.mean(axis=1).min())


def min_fde(trajectories: np.ndarray, ground_truth: np.ndarray) -> float:
    """Minimum over modes of the final-point displacement."""
    d = np.linalg.norm(trajectories[:, -1, :] - ground_truth[-1], axis=-1)
    return float(d.min())


def intention_loss(prediction: IntentionPrediction, label_index: int) -> T.DiffTensor:
    """Cross-entropy against a one-hot label, with the log clamped at 1e-12."""
    return cross_entropy(prediction.probs, label_index)


@dataclass
class ClassificationReport:
    per_class: dict[str, float]     # classes with no examples are absent
    counts: dict[str, int]
    overall: float
    total: int


def classification_report(preds: list[int], labels: list[int]) -> ClassificationReport:
    if not labels:
        raise DataError("classification_report needs a nonempty label list")
    per_class: dict[str, float] = {}
    counts: dict[str, int] = {}
    correct_total = 0
    for ci, name in enumerate(INTENTIONS):
        idx = [i for i, lab in enumerate(labels) if lab == ci]
        if not idx:
            continue
        correct = sum(1 for i in idx if preds[i] == ci)
        per_class[name] = correct / len(idx)
        counts[name] = len(idx)
        correct_total += correct
    return ClassificationReport(per_class=per_class, counts=counts,
                                overall=correct_total / len(labels), total=len(labels))


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def build_model(task: str, feat_cfg: FeatureConfig, bb_cfg: BackboneConfig,
                head_cfg: HeadConfig, rng: np.random.Generator):
    if task == "trajectory":
        return TrajectoryModel(feat_cfg, bb_cfg, head_cfg, rng)
    if task == "intention":
        return IntentionModel(feat_cfg, bb_cfg, rng)
    raise DataError(f"unknown task {task!r}; expected one of {TASKS}")


def load_backbone(model, checkpoint_path) -> None:
    """Copy backbone parameters from a checkpoint; heads stay fresh.

    Raises listing every missing/mismatched name if shapes disagree.
    """
    arrays, _, _ = load_checkpoint(checkpoint_path)
    model.params.load_arrays(arrays, prefixes=BACKBONE_PREFIXES)


def evaluate_trajectory(model: TrajectoryModel, preps: list[PreparedScene]) -> dict[str, float]:
    ades, fdes = [], []
    for prep in preps:
        pred = model.forward(prep)
        ades.append(min_ade(pred.trajectories.values, prep.future_local))
        fdes.append(min_fde(pred.trajectories.values, prep.future_local))
    return {"min_ade": float(np.mean(ades)), "min_fde": float(np.mean(fdes))}


def evaluate_intention(model: IntentionModel, preps: list[PreparedScene]) -> ClassificationReport:
    preds = [model.forward(p).predicted_class for p in preps]
    labels = [p.intention_index for p in preps]
    return classification_report(preds, labels)


def split_dataset(preps: list[PreparedScene], val_fraction: float,
                  seed: int) -> tuple[list[PreparedScene], list[PreparedScene]]:
    order = sub_rng(seed, "split").permutation(len(preps))
    n_val = int(round(val_fraction * len(preps)))
    val_idx = set(order[:n_val].tolist())
    train = [preps[i] for i in range(len(preps)) if i not in val_idx]
    val = [preps[i] for i in range(len(preps)) if i in val_idx]
    return train, val


METRIC_HEADER = ("epoch", "split", "metric", "value")


@dataclass
class FinetuneResult:
    model: object
    rows: list[tuple]
    final_metrics: dict[str, float] = field(default_factory=dict)


def finetune(scenes, task: str, feat_cfg: FeatureConfig, bb_cfg: BackboneConfig,
             head_cfg: HeadConfig, cfg: FinetuneConfig, checkpoint=None,
             out_dir=None, config_hash: str = "",
             preps: list[PreparedScene] | None = None) -> FinetuneResult:
    """Train a task head (plus, by default, the backbone) on labeled scenes.

    `checkpoint` gives a pre-trained backbone; None trains from scratch.
    Per-epoch metrics are computed on a held-out split and logged as
    (epoch, split, metric, value) rows.
    """
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}; expected one of {TASKS}")
    if preps is None:
        if not scenes:
            raise DataError("fine-tuning needs a nonempty dataset")
        preps = prepare_dataset(scenes, feat_cfg)
    model = build_model(task, feat_cfg, bb_cfg, head_cfg, sub_rng(cfg.seed, "init"))
    if checkpoint is not None:
        load_backbone(model, checkpoint)
    if cfg.freeze_backbone:
        model.params.set_trainable(BACKBONE_PREFIXES, False)

    train, val = split_dataset(preps, cfg.val_fraction, cfg.seed)
    if not train:
        raise DataError("held-out split left no training scenes")
    batch_size = cfg.effective_batch(task)
    steps_per_epoch = max(1, (len(train) + batch_size - 1) // batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    opt = AdamState(cfg.base_lr, total_steps)

    rows: list[tuple] = []
    for epoch in range(cfg.epochs):
        order = sub_rng(cfg.seed, "shuffle", epoch).permutation(len(train))
        loss_sum = 0.0
        for b in range(steps_per_epoch):
            gstep = epoch * steps_per_epoch + b
            idx = order[b * batch_size:(b + 1) * batch_size]
            if idx.size == 0:
                continue
            drop_rng = sub_rng(cfg.seed, "dropout", gstep)
            lr = opt.lr_at(gstep)
            terms = []
            for i in idx:
                prep = train[i]
                if task == "trajectory":
                    pred = model.forward(prep, train=True, rng=drop_rng)
                    terms.append(prediction_loss(pred, prep.future_local))
                else:
                    pred = model.forward(prep, train=True, rng=drop_rng)
                    terms.append(intention_loss(pred, prep.intention_index))
            loss = T.scale(_sum_tensors(terms), 1.0 / len(terms))
            if not np.isfinite(loss.values):
                raise NumericsError("fine-tune loss is not finite")
            T.backward(loss)
            adam_step(model.params, opt, lr)
            loss_sum += float(loss.values)
        rows.append((epoch, "train", "loss", loss_sum / steps_per_epoch))
        eval_split = val if val else train
        split_name = "val" if val else "train"
        if task == "trajectory":
            metrics = evaluate_trajectory(model, eval_split)
            for name, value in metrics.items():
                rows.append((epoch, split_name, name, value))
        else:
            report = evaluate_intention(model, eval_split)
            for name, acc in report.per_class.items():
                rows.append((epoch, split_name, f"acc_{name}", acc))
            rows.append((epoch, split_name, "acc_overall", report.overall))

    last_epoch = cfg.epochs - 1
    final = {m: v for (e, s, m, v) in rows if e == last_epoch and s != "train"}

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metric_log(out_dir / "metrics.csv", rows)
        save_checkpoint(out_dir / "checkpoint.ckpt", model.params.state_arrays(),
                        step=opt.step, config_hash=config_hash)
    return FinetuneResult(model=model, rows=rows, final_metrics=final)


def write_metric_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_HEADER)
        for epoch, split, metric, value in rows:
            writer.writerow([epoch, split, metric, repr(float(value))])


def _sum_tensors(terms):
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total
