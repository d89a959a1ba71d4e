"""Batch command-line front end.

Commands: gen-data, pretrain, finetune, eval, vif-render, inspect.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
import os

# Small-matrix GEMMs dominate; multithreaded BLAS only adds sync overhead.
# Must be set before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse   # noqa: E402
import csv        # noqa: E402
import sys        # noqa: E402
from concurrent.futures import ProcessPoolExecutor   # noqa: E402
from pathlib import Path                              # noqa: E402

import numpy as np    # noqa: E402

from . import scenario_gen                           # noqa: E402
from .config import RunConfig                        # noqa: E402
from .errors import DataError, NumericsError, UsageError   # noqa: E402
from .heads import (TASKS, build_model, evaluate_intention,  # noqa: E402
                    evaluate_trajectory, finetune)
from .prep import prepare_dataset, vif_target_for_slots      # noqa: E402
from .pretrain import run_pretrain                   # noqa: E402
from .safety_field import render_field, write_grid_image, write_grid_text  # noqa: E402
from .scenario_gen import INTENTIONS, LabeledScene, generate, read_dataset, write_dataset  # noqa: E402
from .scene_model import build_agent_features, make_frame   # noqa: E402
from .seeding import sub_rng                         # noqa: E402
from .tensor_engine.checkpoint import inspect_checkpoint, load_checkpoint   # noqa: E402


def _add_common(parser):
    parser.add_argument("--config", help="config file of `key = value` lines")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    parser.add_argument("--seed", type=int, help="run seed (run.seed)")


def _resolve(args, extra_overrides=None) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    overrides.update(extra_overrides or {})
    return RunConfig.resolve(config_file=args.config, overrides=overrides)


def _parse_weight_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise UsageError(f"expected a comma-separated float list, got {text!r}")


def _gen_one(payload):
    cfg, index = payload
    try:
        return scenario_gen.build_scene(cfg, index)
    except scenario_gen._Infeasible:
        return None


def cmd_gen_data(args) -> int:
    extra = {}
    if args.family:
        extra["gen.family"] = args.family
    if args.count is not None:
        extra["gen.count"] = args.count
    run = _resolve(args, extra)
    gen_cfg = run.gen()
    workers = run["run.workers"] if args.workers is None else args.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_gen_one, ((gen_cfg, i) for i in range(gen_cfg.scene_count)),
                                    chunksize=64))
        scenes = [s for s in results if s is not None]
        skipped = sum(1 for s in results if s is None)
    else:
        scenes, skipped = generate(gen_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out)
    write_dataset(out / "dataset.jsonl", scenes)
    counts = {k: 0 for k in INTENTIONS}
    for s in scenes:
        counts[s.intention] += 1
    for name in INTENTIONS:
        print(f"intention {name}: {counts[name]}")
    print(f"scenes written: {len(scenes)}  skipped: {skipped}")
    print(f"dataset: {out / 'dataset.jsonl'}")
    return 0


def _flag_overrides(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    return overrides


def cmd_pretrain(args) -> int:
    base = _flag_overrides(args)
    if args.epochs is not None:
        base["pretrain.epochs"] = args.epochs
    run = RunConfig.resolve(config_file=args.config, overrides=base)
    scenes = read_dataset(args.data)
    if not scenes:
        raise DataError(f"dataset {args.data} holds no scenes")
    w_vifs = _parse_weight_list(args.w_vif) if args.w_vif else [run["pretrain.w_vif"]]
    w_mrms = _parse_weight_list(args.w_mrm) if args.w_mrm else [run["pretrain.w_mrm"]]
    combos = [(wv, wm) for wv in w_vifs for wm in w_mrms]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for wv, wm in combos:
        sub = RunConfig.resolve(config_file=args.config, overrides={
            **base, "pretrain.w_vif": wv, "pretrain.w_mrm": wm})
        run_dir = out if len(combos) == 1 else out / f"wv{wv:g}_wm{wm:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        sub.write(run_dir)
        _, rows = run_pretrain(scenes, sub.features(), sub.backbone(), sub.field(),
                               sub.pretrain(), out_dir=run_dir, config_hash=sub.hash())
        final = rows[-1]
        summary.append((wv, wm, final[1], final[2], final[3]))
        print(f"w_vif={wv:g} w_mrm={wm:g}: l_vif={final[1]:.4f} l_mrm={final[2]:.4f} "
              f"l_pre={final[3]:.4f}")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["w_vif", "w_mrm", "l_vif", "l_mrm", "l_pre"])
        for row in summary:
            writer.writerow([repr(float(x)) for x in row])
    return 0


def cmd_finetune(args) -> int:
    if args.task not in TASKS:
        raise UsageError(f"--task must be one of {TASKS}")
    if args.pretrain_mode != "none" and not args.checkpoint:
        raise UsageError(f"--pretrain-mode {args.pretrain_mode} requires --checkpoint")
    if args.pretrain_mode == "none" and args.checkpoint:
        raise UsageError("--pretrain-mode none contradicts --checkpoint")
    extra = {}
    if args.epochs is not None:
        extra["finetune.epochs"] = args.epochs
    run = _resolve(args, extra)
    if run["finetune.batch_size"] == 0:
        run.values["finetune.batch_size"] = run.finetune().effective_batch(args.task)
    scenes = read_dataset(args.data)
    labeled = [s for s in scenes if isinstance(s, LabeledScene)]
    if not labeled:
        raise DataError(f"dataset {args.data} holds no labeled scenes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out)
    result = finetune(labeled, args.task, run.features(), run.backbone(), run.heads(),
                      run.finetune(), checkpoint=args.checkpoint, out_dir=out,
                      config_hash=run.hash())
    metrics = sorted(result.final_metrics.items())
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "pretrain_mode"] + [m for m, _ in metrics])
        writer.writerow([args.task, args.pretrain_mode] + [repr(float(v)) for _, v in metrics])
    print(f"task={args.task} pretrain={args.pretrain_mode} " +
          " ".join(f"{m}={v:.4f}" for m, v in metrics))
    return 0


def cmd_eval(args) -> int:
    if args.task not in TASKS:
        raise UsageError(f"--task must be one of {TASKS}")
    run = _resolve(args)
    scenes = read_dataset(args.data)
    labeled = [s for s in scenes if isinstance(s, LabeledScene)]
    if not labeled:
        raise DataError(f"dataset {args.data} holds no labeled scenes")
    model = build_model(args.task, run.features(), run.backbone(), run.heads(),
                        sub_rng(run.seed, "init"))
    arrays, _, _ = load_checkpoint(args.checkpoint)
    model.params.load_arrays(arrays)
    preps = prepare_dataset(labeled, run.features())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out)
    rows = []
    if args.task == "trajectory":
        metrics = evaluate_trajectory(model, preps)
        print(f"{'minADE':>10} {'minFDE':>10}")
        print(f"{metrics['min_ade']:>10.4f} {metrics['min_fde']:>10.4f}")
        rows = sorted(metrics.items())
    else:
        report = evaluate_intention(model, preps)
        cols = ["Straight", "Left", "Right", "Overall"]
        vals = [report.per_class.get("straight"), report.per_class.get("left"),
                report.per_class.get("right"), report.overall]
        print(" ".join(f"{c:>10}" for c in cols))
        print(" ".join(f"{100 * v:>9.2f}%" if v is not None else f"{'-':>10}" for v in vals))
        rows = [(f"acc_{k}", v) for k, v in sorted(report.per_class.items())]
        rows.append(("acc_overall", report.overall))
    with open(out / "eval.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in rows:
            writer.writerow([name, repr(float(value))])
    return 0


def cmd_vif_render(args) -> int:
    run = _resolve(args)
    scenes = read_dataset(args.scene_file)
    if not 0 <= args.index < len(scenes):
        raise DataError(f"scene index {args.index} out of range (file has {len(scenes)})")
    item = scenes[args.index]
    scene = item.scene if isinstance(item, LabeledScene) else item
    pts = [t.positions[-1] for t in scene.agents]
    for lane in scene.lanes:
        pts.extend([lane.points.min(axis=0), lane.points.max(axis=0)])
    pts = np.asarray(pts)
    lo = pts.min(axis=0) - 10.0
    hi = pts.max(axis=0) + 10.0
    grid = render_field(scene, (lo, hi), args.res, params=run.field())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out)
    write_grid_text(out / "grid.txt", grid, args.res, lo)
    write_grid_image(out / "grid.pgm", grid)
    features = build_agent_features(scene, make_frame(scene), run.features())
    target = vif_target_for_slots(scene, features.slot_indices, run.field())
    valid = target.valid_mask
    print("raw forces:", " ".join(repr(float(f)) for f in _raw_forces(scene, features, run)))
    print("normalized:", " ".join(repr(float(f)) for f in target.forces[valid]))
    print(f"grid: {grid.shape[1]} x {grid.shape[0]} cells at {args.res} m -> {out / 'grid.txt'}")
    return 0


def _raw_forces(scene, features, run):
    from .safety_field import AgentSnapshot, ego_pose_from_snapshot, virtual_force
    params = run.field()
    slots = features.slot_indices
    ego = AgentSnapshot.from_track(scene.agents[slots[0]])
    pose = ego_pose_from_snapshot(ego)
    out = []
    for i in slots[1:]:
        if i < 0:
            continue
        out.append(virtual_force(AgentSnapshot.from_track(scene.agents[i]), pose, params))
    return out


def cmd_inspect(args) -> int:
    info = inspect_checkpoint(args.checkpoint)
    total = 0
    for name, shape in info.model_entries:
        count = int(np.prod(shape)) if shape else 1
        total += count
        print(f"{name:50s} {str(shape):>18s} {count:>10d}")
    print(f"model parameters: {total}")
    if info.optimizer_entries:
        opt_total = sum(int(np.prod(s)) if s else 1 for _, s in info.optimizer_entries)
        print(f"optimizer state entries: {len(info.optimizer_entries)} ({opt_total} values)")
    print(f"step: {info.step}  config hash: {info.config_hash or '(none)'}  "
          f"format version: {info.version}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsu", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    _add_common(p)
    p.add_argument("--family", choices=["highway", "urban"])
    p.add_argument("--count", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--w-vif", help="comma-separated weight grid")
    p.add_argument("--w-mrm", help="comma-separated weight grid")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a task head")
    _add_common(p)
    p.add_argument("--task", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--pretrain-mode", choices=["none", "vif", "mrm", "both"], default="none")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint, no training")
    _add_common(p)
    p.add_argument("--task", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("vif-render", help="export the energy field around a scene")
    _add_common(p)
    p.add_argument("--scene-file", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--res", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vif_render)

    p = sub.add_parser("inspect", help="list checkpoint contents and validate the format")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
