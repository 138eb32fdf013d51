"""AdamW training loop over mixed-task batches, plus bit-exact checkpoints.

Stage 1 trains on segmentation prompts only; stage 2 mixes every task kind
uniformly. Per-sample representation dropout follows the decoder contract.
The whole run is a pure function of (seed, config, dataset): reruns produce
identical loss curves and byte-identical checkpoints.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .config import config_echo, config_from_dict, config_hash
from .model import Pipeline

log = logging.getLogger("promptscene.train")

CKPT_MAGIC = b"PSCKPT01"


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.98, eps=1e-8,
               weight_decay=0.01):
    """Standard AdamW: bias-corrected moments, decoupled weight decay."""
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)
    return state


def lr_at(step, total_steps, base_lr, warmup_fraction):
    """Linear warmup then cosine decay to zero."""
    warm = max(1, int(round(warmup_fraction * total_steps)))
    if step < warm:
        return base_lr * (step + 1) / warm
    if total_steps <= warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    pipeline: Pipeline
    curve: list  # rows: dict(step, stage, lr, total, mask, grd, gen)
    events: list


def train(pipeline, scenes, tasks, caches=None):
    """Run the two-stage recipe; returns the trained pipeline and its loss curve."""
    cfg = pipeline.cfg
    tr = cfg.train
    if not tasks:
        raise TrainingError("empty task list")
    caches = caches if caches is not None else pipeline.build_caches(scenes)
    rng = np.random.default_rng(np.random.PCG64([cfg.seed, 0x7121]))
    stage1_steps = int(math.ceil(tr.stage1_fraction * tr.steps))
    by_kind = {}
    for t in tasks:
        by_kind.setdefault(t.kind, []).append(t)
    seg_tasks = by_kind.get("segment", [])
    kinds = sorted(by_kind)
    curve = []
    events = []
    state = AdamWState()
    trainable = pipeline.trainable_params()

    for step in range(tr.steps):
        stage = 1 if step < stage1_steps and seg_tasks else 2
        if step == stage1_steps and stage1_steps > 0:
            events.append({"event": "stage2_start", "step": step})
        batch = []
        for _ in range(tr.batch_size):
            if stage == 1:
                pool = seg_tasks
            else:
                kind = kinds[int(rng.integers(0, len(kinds)))]
                pool = by_kind[kind]
            batch.append(pool[int(rng.integers(0, len(pool)))])

        pipeline.zero_grads()
        totals = []
        comp_sums = {}
        for task in batch:
            cache = caches[task.scene_id]
            gt_guidance = None
            if tr.gt_mask_guidance and stage == 1 and task.target_ids:
                gt_guidance = cache.gt_seg_masks[:, task.target_ids]
            with Tape() as tape:
                out = pipeline.forward_sample(cache, task, mode="train", rng=rng,
                                              gt_guidance_masks=gt_guidance)
                loss = pipeline.compute_loss(out, cache, task)
            tape.backward(loss.total)
            totals.append(float(loss.total.data))
            for k, vv in loss.components.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + vv

        grads = {}
        for name, p in trainable.items():
            grads[name] = None if p.grad is None else p.grad / tr.batch_size
        step_lr = lr_at(step, tr.steps, tr.lr, tr.warmup_fraction)
        adamw_step(trainable, grads, state, step_lr, tr.beta1, tr.beta2, tr.eps,
                   tr.weight_decay)

        mean_total = float(np.mean(totals))
        if not np.isfinite(mean_total) or mean_total > tr.divergence_threshold:
            raise TrainingError(
                f"divergence at step {step}: loss {mean_total:.3e} "
                f"(threshold {tr.divergence_threshold:.1e})")
        row = {"step": step, "stage": stage, "lr": step_lr, "total": mean_total}
        for k in ("mask", "grd", "gen"):
            row[k] = comp_sums.get(k, 0.0) / tr.batch_size
        curve.append(row)
        if tr.log_every and step % tr.log_every == 0:
            log.info("step %d stage %d loss %.4f", step, stage, mean_total)

    events.append({"event": "finished", "steps": tr.steps, "stage1_steps": stage1_steps})
    return TrainResult(pipeline=pipeline, curve=curve, events=events)


def write_loss_curve(path, curve):
    cols = ["step", "stage", "lr", "total", "mask", "grd", "gen"]
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in curve:
            fh.write("\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                               for c in cols) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(pipeline, path, step=0):
    """Single file: magic, manifest length, manifest JSON, float64 payload."""
    names = sorted(pipeline.params)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        t = pipeline.params[name]
        blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.data.shape), "offset": offset,
                        "count": t.data.size,
                        "trainable": name in set(pipeline.trainable)})
        blobs.append(blob)
        offset += t.data.size
    manifest = {
        "format": 1,
        "step": step,
        "payload_count": offset,
        "params": entries,
    }
    manifest.update(config_echo(pipeline.cfg))
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)


class CheckpointError(RuntimeError):
    pass


def read_manifest(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode())
        payload = fh.read()
    expected = manifest["payload_count"] * 8
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest expects {expected}")
    return manifest, payload


def load_checkpoint(path, pipeline=None):
    """Rebuild (or fill) a pipeline from a checkpoint, bit-exactly.

    Without `pipeline`, the embedded config echo reconstructs the model. With
    one, shapes must match; mismatches raise listing every conflict.
    """
    manifest, payload = read_manifest(path)
    if pipeline is None:
        cfg = config_from_dict(manifest["config"])
        pipeline = Pipeline(cfg)
    conflicts = []
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in pipeline.params:
            conflicts.append(f"{name}: missing in model")
            continue
        have = list(pipeline.params[name].data.shape)
        if have != entry["shape"]:
            conflicts.append(f"{name}: checkpoint {entry['shape']} vs model {have}")
    missing = sorted(set(pipeline.params) - {e["name"] for e in manifest["params"]})
    conflicts.extend(f"{name}: missing in checkpoint" for name in missing)
    if conflicts:
        raise CheckpointError("shape conflicts: " + "; ".join(conflicts))
    for entry in manifest["params"]:
        start = entry["offset"] * 8
        end = start + entry["count"] * 8
        flat = np.frombuffer(payload[start:end], dtype="<f8")
        if flat.size != entry["count"]:
            raise CheckpointError(f"truncated payload for parameter {entry['name']!r}")
        pipeline.params[entry["name"]].data[...] = flat.reshape(entry["shape"])
    return pipeline, manifest
