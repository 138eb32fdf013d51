"""Command-line entry point: data generation, training, evaluation, inference,
ablations, and gradient checking.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 gradient-check
failure. Every command is reproducible from (config, seed); primary outputs
are byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import report as rpt
from .autodiff import Tape, grad_check
from .config import (ConfigError, RunConfig, config_echo, config_from_dict,
                     config_hash, load_config)
from .dataio import DatasetFormatError, read_dataset, write_dataset
from .model import REPS, Pipeline
from .presets import tiny_gradcheck_config
from .scenegen import generate_dataset
from .vocab import Vocabulary
from .train import (CheckpointError, TrainingError, load_checkpoint,
                    read_manifest, save_checkpoint, train, write_loss_curve)

log = logging.getLogger("promptscene.cli")

USAGE_ERROR, RUNTIME_ERROR, GRADCHECK_FAIL = 1, 2, 3


class UsageError(ValueError):
    pass


def _load_cfg(path):
    if path is None:
        return RunConfig().validate()
    return load_config(path)


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = _load_cfg(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scenes is not None and args.scenes <= 0:
        raise UsageError("--scenes must be a positive integer")
    n_scenes = args.scenes if args.scenes is not None else 8
    scenes, tasks = generate_dataset(cfg.seed, n_scenes, cfg.scene)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, scenes, tasks)
    Vocabulary().save(str(out) + ".vocab.txt")

    # segment statistics for the summary (grouping only, no model weights)
    from .encode import fh_segments, knn_graph
    seg_counts = []
    for scene in scenes:
        edges = knn_graph(scene.points, cfg.model.knn_k, scene.colors, cfg.model.color_weight)
        seg = fh_segments(scene.n_points, edges, cfg.model.fh_tau, cfg.model.fh_min_size)
        seg_counts.append(int(seg.max()) + 1)
    task_counts = {}
    for t in tasks:
        task_counts[t.kind] = task_counts.get(t.kind, 0) + 1
    summary = {
        "scenes": len(scenes),
        "tasks": len(tasks),
        "task_counts": task_counts,
        "mean_segments": float(np.mean(seg_counts)),
        "mean_points": float(np.mean([s.n_points for s in scenes])),
    }
    summary.update(config_echo(cfg))
    _write_json(str(out) + ".summary.json", summary)
    print(json.dumps({k: summary[k] for k in
                      ("scenes", "tasks", "task_counts", "mean_segments", "mean_points")},
                     sort_keys=True))
    return 0


def cmd_train(args):
    cfg = _load_cfg(args.config)
    scenes, tasks = read_dataset(args.data)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    pipeline = Pipeline(cfg)
    caches = pipeline.build_caches(scenes)
    result = train(pipeline, scenes, tasks, caches)
    save_checkpoint(pipeline, outdir / "checkpoint.bin", step=cfg.train.steps)
    write_loss_curve(outdir / "loss_curve.tsv", result.curve)
    rpt.plot_loss_curve(result.curve, outdir / "loss_curve.png")
    report = pipeline.evaluate(caches, tasks)
    report.config_echo = config_echo(cfg)
    report.save(outdir / "train_metrics.json")
    rpt.plot_metrics(report.to_dict(), outdir / "train_metrics.png")
    print(report.canonical())
    return 0


def _parse_reps(text):
    if text is None:
        return REPS
    names = [r.strip() for r in text.split(",") if r.strip()]
    if not names:
        raise UsageError("--reps must name at least one of V,P,I")
    bad = [r for r in names if r not in REPS]
    if bad:
        raise UsageError(f"unknown representation name(s): {bad}; choose from V,P,I")
    return tuple(r for r in REPS if r in names)


def _load_pipeline(args):
    pipeline, manifest = load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = load_config(args.config)
        if config_hash(cfg) != manifest["config_hash"] and not args.force:
            raise UsageError(
                "config hash mismatch between --config and checkpoint "
                "(pass --force to evaluate anyway)")
    return pipeline, manifest


def cmd_eval(args):
    reps = _parse_reps(args.reps)
    pipeline, manifest = _load_pipeline(args)
    scenes, tasks = read_dataset(args.data)
    caches = pipeline.build_caches(scenes)
    report = pipeline.evaluate(caches, tasks, rep_subset=reps,
                               gt_mask_attention=args.gt_mask_attention)
    report.config_echo = {"config": manifest["config"],
                          "config_hash": manifest["config_hash"],
                          "full_scale_reference": manifest["full_scale_reference"]}
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    tag = "".join(reps)
    report.save(outdir / f"metrics_{tag}.json")
    rpt.plot_metrics(report.to_dict(), outdir / f"metrics_{tag}.png")
    print(report.canonical())
    return 0


def cmd_infer(args):
    pipeline, _manifest = _load_pipeline(args)
    scenes, tasks = read_dataset(args.data)
    by_id = {s.scene_id: s for s in scenes}
    if args.scene_id not in by_id:
        raise UsageError(f"scene id {args.scene_id} not in dataset")
    cache = pipeline.build_cache(by_id[args.scene_id])
    vocab = pipeline.vocab
    visual = None
    from .scenegen import TaskSample
    if args.prompt_kind == "text":
        tokens = vocab.ids(args.prompt.split())
        task = TaskSample(kind="segment", prompt_kind="text", scene_id=args.scene_id,
                          prompt_tokens=tokens, target_ids=[], text=args.prompt)
    elif args.prompt_kind == "visual":
        visual = pipeline.visual_feature_for(args.prompt, args.noise_sigma, args.noise_seed)
        task = TaskSample(kind="segment", prompt_kind="text", scene_id=args.scene_id,
                          prompt_tokens=[vocab.id(args.prompt)], target_ids=[],
                          text=f"visual:{args.prompt}")
    elif args.prompt_kind == "numerical":
        payload = [float(v) for v in args.prompt.split(",")]
        if len(payload) not in (3, 6):
            raise UsageError("numerical prompt needs 3 or 6 comma-separated floats")
        task = TaskSample(kind="caption", prompt_kind="numerical", scene_id=args.scene_id,
                          prompt_payload=payload, target_ids=[],
                          answer_tokens=[vocab.eos_id], text="numerical")
    else:
        raise UsageError(f"unknown prompt kind {args.prompt_kind!r}")
    result = pipeline.infer_one(cache, task, top_k=args.top_k, visual_feature=visual)
    text = json.dumps(result, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _ablation_metric_row(report):
    row = {}
    m = report.metrics
    row["grounding_acc50"] = m.get("grounding", {}).get("acc_at_50", 0.0)
    row["seg_ap25"] = m.get("segmentation", {}).get("ap25", 0.0)
    row["qa_em"] = m.get("qa", {}).get("exact_match", 0.0)
    row["multi_f1_50"] = m.get("multiground", {}).get("f1_at_50", 0.0)
    return row


def cmd_ablate(args):
    cfg = _load_cfg(args.config)
    scenes, tasks = read_dataset(args.data)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    metric_keys = ["grounding_acc50", "seg_ap25", "qa_em", "multi_f1_50"]

    if args.axis == "reps":
        pipeline = Pipeline(cfg)
        caches = pipeline.build_caches(scenes)
        train(pipeline, scenes, tasks, caches)
        for reps in (("V",), ("V", "P"), ("V", "P", "I")):
            report = pipeline.evaluate(caches, tasks, rep_subset=reps)
            row = {"variant": "+".join(reps)}
            row.update(_ablation_metric_row(report))
            rows.append(row)
        variant_key = "variant"
    elif args.axis in ("depth", "structure"):
        variants = ([2, 4, 6] if args.axis == "depth"
                    else ["main", "parallel", "sequential"])
        for variant in variants:
            vcfg = config_from_dict(json.loads(json.dumps(_cfg_dict(cfg))))
            if args.axis == "depth":
                vcfg.model.decoder_layers = int(variant)
            else:
                vcfg.model.structure = str(variant)
            pipeline = Pipeline(vcfg)
            caches = pipeline.build_caches(scenes)
            train(pipeline, scenes, tasks, caches)
            report = pipeline.evaluate(caches, tasks)
            some_cache = caches[scenes[0].scene_id]
            row = {"variant": variant,
                   "queries_shape": f"{cfg.model.num_queries}x{cfg.model.hidden_dim}",
                   "segments": some_cache.n_segments}
            row.update(_ablation_metric_row(report))
            rows.append(row)
        variant_key = "variant"
    else:
        raise UsageError(f"unknown ablation axis {args.axis!r}")

    cols = [variant_key] + [c for c in rows[0] if c != variant_key]
    rpt.write_table(rows, cols, outdir / f"ablation_{args.axis}.tsv")
    rpt.plot_ablation(rows, variant_key, metric_keys, outdir / f"ablation_{args.axis}.png")
    _write_json(outdir / f"ablation_{args.axis}.json",
                {"axis": args.axis, "rows": rows, **config_echo(cfg)})
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def _cfg_dict(cfg):
    from .config import config_to_dict
    return config_to_dict(cfg)


def build_gradcheck_loss(cfg):
    """A deterministic scalar: summed task losses on one tiny scene.

    Matching and attention masks are discrete choices, so they are frozen at
    the base point; the checked gradient is exactly d(loss at fixed
    matching/masks)/d(theta), which equals the a.e. gradient.
    """
    from .scenegen import generate_scene, generate_tasks

    pipeline = Pipeline(cfg)
    scene = generate_scene(cfg.seed, cfg.scene, scene_id=0)
    tasks = generate_tasks(scene, cfg.seed, cfg.scene)
    cache = pipeline.build_cache(scene)
    picked = []
    for kind in ("segment", "qa", "caption"):
        picked.extend([t for t in tasks if t.kind == kind][:1])

    # freeze the discrete structure at the base point
    frozen = []
    for task in picked:
        with Tape():
            out = pipeline.forward_sample(cache, task, mode="infer")
            loss = pipeline.compute_loss(out, cache, task)
        schedule = out.info["attention_masks"]
        frozen.append((task, loss.assignment, schedule))

    def f():
        total = None
        for task, assignment, schedule in frozen:
            out = pipeline.forward_sample(cache, task, mode="infer",
                                          mask_schedule=schedule)
            loss = pipeline.compute_loss(out, cache, task,
                                         fixed_assignment=assignment or None)
            total = loss.total if total is None else ad.add(total, loss.total)
        return total

    return pipeline, f


def cmd_grad_check(args):
    base = _load_cfg(args.config)
    cfg = tiny_gradcheck_config(base)
    pipeline, f = build_gradcheck_loss(cfg)
    coords = None if args.coords_per_param == 0 else args.coords_per_param
    overall, per_param = grad_check(f, pipeline.trainable_params(),
                                    h=args.step, max_coords_per_param=coords,
                                    seed=cfg.seed)
    groups = {}
    for name, err in sorted(per_param.items()):
        group = name.split(".")[0]
        groups[group] = max(groups.get(group, 0.0), err)
    for group, err in sorted(groups.items()):
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{group:12s} max_rel_err {err:.3e}  {status}")
    print(f"{'overall':12s} max_rel_err {overall:.3e}")
    return 0 if overall < args.tolerance else GRADCHECK_FAIL


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="promptscene",
                                description="Promptable-query 3D scene understanding")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--scenes", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--reps", default=None, help="comma-separated subset of V,P,I")
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--force", action="store_true")
    e.add_argument("--gt-mask-attention", action="store_true")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="run one prompt against one scene")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--scene-id", type=int, required=True)
    i.add_argument("--prompt-kind", choices=["text", "visual", "numerical"], required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--noise-sigma", type=float, default=0.0)
    i.add_argument("--noise-seed", type=int, default=0)
    i.add_argument("--top-k", type=int, default=3)
    i.add_argument("--out", default=None)
    i.add_argument("--config", default=None)
    i.add_argument("--force", action="store_true")
    i.set_defaults(fn=cmd_infer)

    a = sub.add_parser("ablate", help="run an ablation sweep")
    a.add_argument("--config", default=None)
    a.add_argument("--data", required=True)
    a.add_argument("--axis", choices=["depth", "structure", "reps"], required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("grad-check", help="finite-difference gradient audit")
    c.add_argument("--config", default=None)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-3)
    c.add_argument("--coords-per-param", type=int, default=25,
                   help="sampled coordinates per tensor (0 = every coordinate)")
    c.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DatasetFormatError, TrainingError, CheckpointError, FileNotFoundError,
            ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
