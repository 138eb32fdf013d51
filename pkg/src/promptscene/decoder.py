"""Prompt-guided query decoder with masked cross-attention over scene features.

Queries start at zero with farthest-point-sampled positions. Each layer
cross-attends to the surviving scene representations under an attention
mask thresholded from the previous layer's predicted masks, then to the
prompt tokens, then runs a distance-biased self-attention. Three layer
structures are supported: the main interleaved one plus the parallel and
sequential variants used by the ablation harness.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encode import fps

log = logging.getLogger("promptscene.decoder")

REP_ORDER = ("V", "I", "P")


@dataclass
class QueryState:
    features: ad.Tensor  # (Q, D)
    positions: np.ndarray  # (Q, 3)
    layer: int = 0
    pe: ad.Tensor | None = None  # (Q, D) positional encoding, set by the caller


def init_queries(scene_points, q, d):
    """Zero features at farthest-point-sampled positions."""
    scene_points = np.asarray(scene_points, dtype=np.float64)
    if q > scene_points.shape[0]:
        raise ValueError(f"cannot place {q} queries on {scene_points.shape[0]} points")
    idx = fps(scene_points, q, start=0)
    return QueryState(features=Tensor(np.zeros((q, d))), positions=scene_points[idx], layer=0)


def build_attention_mask(p_mask_prev, threshold=0.5):
    """Additive {0, -inf} mask from the previous layer's segment probabilities.

    p >= threshold stays visible. A query whose visible set would be empty is
    reset to fully visible (the safeguard); the reset count is returned and
    logged so callers can audit how often it fires.
    """
    p = np.asarray(p_mask_prev, dtype=np.float64)  # (M, Q)
    visible = p >= threshold
    empty = ~visible.any(axis=0)
    resets = int(empty.sum())
    if resets:
        log.debug("attention-mask safeguard: %d query(ies) reset to fully visible", resets)
        visible[:, empty] = True
    mask = np.where(visible, 0.0, -np.inf)
    return mask, resets


def masked_cross_attn(q_feats, q_pe, feats, pe_f, mask, wq, wk, wv):
    """Single-head attention of queries over segment features.

    Queries and keys are augmented with their location encodings; values are
    the raw features. `mask` is an (M, Q) additive {0, -inf} array (or None).
    Returns (output, attention) so tests can inspect the weights.
    """
    d = q_feats.data.shape[1]
    qt = ad.add(q_feats, q_pe) if q_pe is not None else q_feats
    ft = ad.add(feats, pe_f) if pe_f is not None else feats
    logits = ad.scale(ad.matmul(ad.matmul(qt, wq), ad.transpose(ad.matmul(ft, wk))),
                      1.0 / np.sqrt(d))
    addmask = None if mask is None else np.asarray(mask).T  # (Q, M)
    att = ad.softmax_masked(logits, addmask)
    return ad.matmul(att, ad.matmul(feats, wv)), att


def cross_attn(q_feats, tokens, wq, wk, wv):
    """Plain cross-attention (no mask, no positional terms); used for prompts."""
    out, _ = masked_cross_attn(q_feats, None, tokens, None, None, wq, wk, wv)
    return out


def distance_bias(positions, w1, b1, w2, b2):
    """Pairwise-distance MLP bias for spatial self-attention, (Q, Q).

    tanh keeps the map smooth at distance 0 (each query's distance to itself),
    which a relu kink would put exactly on the finite-difference probe.
    """
    q = positions.shape[0]
    dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    h = ad.tanh(ad.linear(Tensor(dist.reshape(-1, 1)), w1, b1))
    return ad.reshape(ad.linear(h, w2, b2), (q, q))


def spatial_self_attn(q_feats, positions, p):
    """Self-attention among queries with an additive pairwise-distance bias."""
    d = q_feats.data.shape[1]
    bias = distance_bias(positions, p["bias.w1"], p["bias.b1"], p["bias.w2"], p["bias.b2"])
    logits = ad.add(ad.scale(ad.matmul(ad.matmul(q_feats, p["self.wq"]),
                                       ad.transpose(ad.matmul(q_feats, p["self.wk"]))),
                             1.0 / np.sqrt(d)), bias)
    att = ad.softmax_masked(logits)
    return ad.matmul(att, ad.matmul(q_feats, p["self.wv"]))


def _ffn(x, p, tag):
    return ad.linear(ad.relu(ad.linear(x, p[f"{tag}.w1"], p[f"{tag}.b1"])),
                     p[f"{tag}.w2"], p[f"{tag}.b2"])


def _norm(x, p, tag, eps):
    return ad.layer_norm(x, p[f"{tag}.gamma"], p[f"{tag}.beta"], eps)


def sample_rep_subset(available, rate, rng):
    """Drop each representation independently; resample until one survives."""
    while True:
        kept = tuple(r for r in available if rng.random() >= rate)
        if kept:
            return kept


def decoder_forward(queries, scene_feats, seg_pe, prompt, params, cfg,
                    rep_subset, mask_fn, mode="infer", rng=None,
                    mask_schedule=None, fixed_visible=None, gt_masks=None):
    """Run N decoder layers; returns (QueryState, p_mask list, info dict).

    scene_feats: dict name -> (M, D) Tensor for the representations available
    this pass. seg_pe is the location encoding added to keys; queries carry
    their own positional encoding in `queries.pe` (set by the caller).

    mask_fn(q_feats) -> (M, Q) Tensor mask probabilities (the shared mask head).
    mask_schedule: optional list of precomputed (M, Q) additive masks, one per
    layer, overriding mask construction (used by the gradient checker).
    fixed_visible: optional (M,) binary array; when given, every layer uses
    that visible set for every query (ground-truth-mask evaluation mode).
    gt_masks: optional (M, G) binary array; when given, each layer's mask is
    rebuilt from the matched ground-truth columns (training-time guidance).
    """
    if not rep_subset:
        raise ValueError("rep_subset must name at least one representation")
    if mode == "train" and cfg.dropout_rate > 0:
        if rng is None:
            raise ValueError("train mode needs an rng for representation dropout")
        rep_subset = sample_rep_subset(tuple(rep_subset), cfg.dropout_rate, rng)
    reps = [r for r in REP_ORDER if r in rep_subset]
    if not reps:
        raise ValueError(f"no known representation in {rep_subset!r}")

    n_seg = next(iter(scene_feats.values())).data.shape[0]
    q_count = queries.features.data.shape[0]
    q_pe = queries.pe
    feats = queries.features
    eps = cfg.layer_norm_eps

    def make_mask(layer, prev_p_mask):
        if mask_schedule is not None:
            return np.asarray(mask_schedule[layer]), 0
        if fixed_visible is not None:
            vis = np.asarray(fixed_visible, dtype=bool)
            if not vis.any():
                vis = np.ones_like(vis)
            col = np.where(vis, 0.0, -np.inf)
            return np.repeat(col[:, None], q_count, axis=1), 0
        if layer == 0 or prev_p_mask is None:
            return np.zeros((n_seg, q_count)), 0
        if gt_masks is not None:
            return _gt_guided_mask(prev_p_mask, gt_masks, q_count)
        return build_attention_mask(prev_p_mask)

    p_mask_list = []
    att_masks = []
    attn_records = []
    resets_total = 0
    prev_p = None
    for layer in range(cfg.decoder_layers):
        lp = {k.split(".", 2)[2]: v for k, v in params.items()
              if k.startswith(f"dec.l{layer}.")}
        mask, resets = make_mask(layer, prev_p)
        resets_total += resets
        att_masks.append(mask)
        layer_atts = {}

        if cfg.structure == "main":
            att_sum = None
            for r in reps:
                out, att = masked_cross_attn(
                    feats, q_pe, scene_feats[r], seg_pe, mask,
                    lp[f"{r}.wq"], lp[f"{r}.wk"], lp[f"{r}.wv"])
                layer_atts[r] = att
                att_sum = out if att_sum is None else ad.add(att_sum, out)
            x = _norm(ad.add(feats, att_sum), lp, "norm1", eps)
            x = _ffn(x, lp, "ffn1")
            if cfg.extra_residuals:
                x = ad.add(x, feats)
            y = _norm(ad.add(x, cross_attn(x, prompt.tokens,
                                           lp["t.wq"], lp["t.wk"], lp["t.wv"])),
                      lp, "norm2", eps)
            y = _ffn(y, lp, "ffn2")
            if cfg.extra_residuals:
                y = ad.add(y, x)
            z = _norm(spatial_self_attn(y, queries.positions, lp), lp, "norm3", eps)
            z = _ffn(z, lp, "ffn3")
            if cfg.extra_residuals:
                z = ad.add(z, y)
            feats = z
        elif cfg.structure == "parallel":
            att_sum = None
            for r in reps:
                out, att = masked_cross_attn(
                    feats, q_pe, scene_feats[r], seg_pe, mask,
                    lp[f"{r}.wq"], lp[f"{r}.wk"], lp[f"{r}.wv"])
                layer_atts[r] = att
                att_sum = out if att_sum is None else ad.add(att_sum, out)
            att_sum = ad.add(att_sum, cross_attn(feats, prompt.tokens,
                                                 lp["t.wq"], lp["t.wk"], lp["t.wv"]))
            feats = spatial_self_attn(att_sum, queries.positions, lp)
        elif cfg.structure == "sequential":
            x = feats
            for r in reps:
                out, att = masked_cross_attn(
                    x, q_pe, scene_feats[r], seg_pe, mask,
                    lp[f"{r}.wq"], lp[f"{r}.wk"], lp[f"{r}.wv"])
                layer_atts[r] = att
                x = out
            x = cross_attn(x, prompt.tokens, lp["t.wq"], lp["t.wk"], lp["t.wv"])
            feats = spatial_self_attn(x, queries.positions, lp)
        else:
            raise ValueError(f"unknown decoder structure {cfg.structure!r}")

        p_mask = mask_fn(feats)
        p_mask_list.append(p_mask)
        attn_records.append(layer_atts)
        prev_p = p_mask.data

    final = QueryState(features=feats, positions=queries.positions,
                       layer=cfg.decoder_layers)
    final.pe = q_pe
    info = {"attention_masks": att_masks, "attentions": attn_records,
            "safeguard_resets": resets_total, "rep_subset": tuple(reps)}
    return final, p_mask_list, info


def _gt_guided_mask(p_mask_prev, gt_masks, q_count):
    """Per-query visible sets copied from the Hungarian-matched GT columns."""
    from .assignment import hungarian
    from .heads import matching_cost

    cost = matching_cost(p_mask_prev, gt_masks)
    pairs = hungarian(cost)
    visible = np.ones((gt_masks.shape[0], q_count), dtype=bool)  # unmatched: all visible
    for q, g in pairs:
        col = gt_masks[:, g] > 0.5
        if col.any():
            visible[:, q] = col
    return np.where(visible, 0.0, -np.inf), 0
