"""End-to-end pipeline: parameters, per-sample forward, losses, evaluation.

A Pipeline owns the named parameter tensors (trainable and frozen), builds
per-scene caches, and wires prompt encoding, the three scene streams, the
query decoder, and the output heads into one differentiable graph per sample.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encode
from . import heads
from . import metrics as met
from .autodiff import Tensor
from .prompts import PromptEncoder, PromptTokens, frozen_embedding_table
from .vocab import CLASS_NAMES, Vocabulary

REPS = ("V", "I", "P")


def _name_seed(seed, name):
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _rng_for(seed, name):
    return np.random.default_rng(np.random.PCG64(_name_seed(seed, name)))


def build_params(cfg, vocab_size, seed):
    """All named tensors; returns (params, trainable_names)."""
    d = cfg.hidden_dim
    params = {}
    trainable = []

    def weight(name, shape, std=None):
        rng = _rng_for(seed, name)
        std = std if std is not None else 1.0 / np.sqrt(shape[0])
        params[name] = Tensor(rng.normal(scale=std, size=shape), requires_grad=True)
        trainable.append(name)

    def bias(name, n, value=0.0):
        params[name] = Tensor(np.full(n, value), requires_grad=True)
        trainable.append(name)

    def norm_affine(prefix):
        bias(f"{prefix}.gamma", d, 1.0)
        bias(f"{prefix}.beta", d, 0.0)

    # prompt encoding
    weight("prompt.proj.w", (d, d))
    bias("prompt.proj.b", d)
    weight("prompt.loc.w", (3, d))
    bias("prompt.loc.b", d)
    weight("prompt.box.w", (6, d))
    bias("prompt.box.b", d)

    # location MLP for segment centroids
    weight("loc_mlp.w1", (3, d))
    bias("loc_mlp.b1", d)
    weight("loc_mlp.w2", (d, d))
    bias("loc_mlp.b2", d)

    # voxel stream
    desc_dim = 4 + 2 * cfg.fourier_freqs
    d_level = max(4, d // 4)
    for lvl in range(len(encode.VOXEL_STRIDES)):
        weight(f"vox.l{lvl}.w", (desc_dim, d_level))
        bias(f"vox.l{lvl}.b", d_level)
    weight("vox.proj.w", (len(encode.VOXEL_STRIDES) * d_level, d))
    bias("vox.proj.b", d)

    # image stream
    weight("img.w", (cfg.class_emb_dim + 3, d))
    bias("img.b", d)

    # point stream
    weight("pnt.w1", (6, cfg.point_hidden))
    bias("pnt.b1", cfg.point_hidden)
    weight("pnt.w2", (cfg.point_hidden, d))
    bias("pnt.b2", d)

    # query positional encoding projection, only when 2F != D
    if 2 * cfg.fourier_freqs != d:
        weight("qpe.w", (2 * cfg.fourier_freqs, d))
        bias("qpe.b", d)

    # decoder layers
    for layer in range(cfg.decoder_layers):
        pre = f"dec.l{layer}"
        for r in list(REPS) + ["t", "self"]:
            for m in ("wq", "wk", "wv"):
                weight(f"{pre}.{r}.{m}", (d, d))
        weight(f"{pre}.bias.w1", (1, 8), std=1.0)
        bias(f"{pre}.bias.b1", 8)
        weight(f"{pre}.bias.w2", (8, 1))
        bias(f"{pre}.bias.b2", 1)
        for i in (1, 2, 3):
            weight(f"{pre}.ffn{i}.w1", (d, 4 * d))
            bias(f"{pre}.ffn{i}.b1", 4 * d)
            weight(f"{pre}.ffn{i}.w2", (4 * d, d))
            bias(f"{pre}.ffn{i}.b2", d)
            norm_affine(f"{pre}.norm{i}")

    # heads; the mask projections start small so the M x Q logits of the
    # f_s . f_q^T product begin near zero instead of saturating the sigmoid
    weight("head.mask.fs.w", (d, d), std=1.0 / d)
    bias("head.mask.fs.b", d)
    weight("head.mask.fq.w", (d, d), std=1.0 / d)
    bias("head.mask.fq.b", d)
    weight("head.grd.w1", (d, max(1, d // 2)))
    bias("head.grd.b1", max(1, d // 2))
    weight("head.grd.w2", (max(1, d // 2), 1))
    bias("head.grd.b2", 1)

    # generation head
    weight("gen.emb", (vocab_size, d), std=1.0 / np.sqrt(d))
    weight("gen.pos", (cfg.gen_max_len + 1, d), std=1.0 / np.sqrt(d))
    for b in range(cfg.gen_blocks):
        for part in ("self", "cross"):
            for m in ("wq", "wk", "wv"):
                weight(f"gen.b{b}.{part}.{m}", (d, d))
        weight(f"gen.b{b}.ffn.w1", (d, 4 * d))
        bias(f"gen.b{b}.ffn.b1", 4 * d)
        weight(f"gen.b{b}.ffn.w2", (4 * d, d))
        bias(f"gen.b{b}.ffn.b2", d)
        norm_affine(f"gen.b{b}.n1")
        norm_affine(f"gen.b{b}.n2")
        norm_affine(f"gen.b{b}.n3")
    weight("gen.out.w", (d, vocab_size))
    bias("gen.out.b", vocab_size)

    # frozen tensors
    params["frozen.prompt_table"] = Tensor(frozen_embedding_table(vocab_size, d, seed))
    rng = _rng_for(seed, "frozen.fourier_freqs")
    params["frozen.fourier_freqs"] = Tensor(
        rng.normal(scale=cfg.fourier_sigma, size=(cfg.fourier_freqs, 3)))
    params["frozen.class_emb"] = Tensor(
        frozen_embedding_table(len(CLASS_NAMES), cfg.class_emb_dim, _name_seed(seed, "class_emb")))

    return params, trainable


class _FourierShim:
    def __init__(self, weights):
        self.weights = weights

    def __call__(self, coords):
        return encode.fourier_pe(coords, self.weights)


@dataclass
class ForwardOutput:
    p_mask: ad.Tensor  # (M, Q)
    p_grd: ad.Tensor  # (Q, 1)
    queries: dec.QueryState
    p_mask_layers: list
    info: dict
    rep_subset: tuple
    prompt: PromptTokens


@dataclass
class LossBreakdown:
    total: ad.Tensor
    components: dict = field(default_factory=dict)  # name -> float
    assignment: list = field(default_factory=list)


class Pipeline:
    def __init__(self, cfg):
        self.cfg = cfg
        self.vocab = Vocabulary()
        self.params, self.trainable = build_params(cfg.model, len(self.vocab), cfg.seed)
        self.prompt_encoder = PromptEncoder(self.vocab, self.params["frozen.prompt_table"].data)
        self.gen_head = heads.GenerationHead(self.vocab, self.params, cfg.model)
        self.weights = heads.LossWeights(
            mask=cfg.model.lambda_mask, grd=cfg.model.lambda_grd, gen=cfg.model.lambda_gen,
            bce=cfg.model.lambda_bce, dice=cfg.model.lambda_dice, noobj=cfg.model.noobj_weight)

    # -- plumbing ----------------------------------------------------------

    @property
    def fourier(self):
        return _FourierShim(self.params["frozen.fourier_freqs"].data)

    def trainable_params(self):
        return {name: self.params[name] for name in self.trainable}

    def zero_grads(self):
        for name in self.trainable:
            self.params[name].grad = None

    def build_cache(self, scene):
        frozen = {"fourier": self.fourier,
                  "class_embeddings": self.params["frozen.class_emb"].data}
        return encode.build_scene_cache(scene, self.cfg.model, frozen,
                                        encode_seed=self.cfg.seed)

    def build_caches(self, scenes):
        return {scene.scene_id: self.build_cache(scene) for scene in scenes}

    # -- prompt ------------------------------------------------------------

    def encode_prompt(self, task, visual_feature=None):
        p = self.params
        if visual_feature is not None:
            return self.prompt_encoder.encode_visual(
                visual_feature, p["prompt.proj.w"], p["prompt.proj.b"])
        if task.prompt_kind == "text":
            return self.prompt_encoder.encode_text(
                task.prompt_tokens, p["prompt.proj.w"], p["prompt.proj.b"])
        if task.prompt_kind == "numerical":
            return self.prompt_encoder.encode_numerical(
                task.prompt_payload, p["prompt.loc.w"], p["prompt.loc.b"],
                p["prompt.box.w"], p["prompt.box.b"])
        raise ValueError(f"cannot encode prompt kind {task.prompt_kind!r}")

    def visual_feature_for(self, word, sigma=0.0, seed=0):
        feat = self.prompt_encoder.class_feature(word)
        if sigma > 0:
            rng = np.random.default_rng(np.random.PCG64([seed, self.vocab.id(word)]))
            feat = feat + rng.normal(scale=sigma, size=feat.shape)
        return feat

    # -- scene streams -----------------------------------------------------

    def scene_features(self, cache, rep_subset):
        p = self.params
        feats = {}
        if "V" in rep_subset:
            feats["V"] = encode.voxel_stream(
                cache,
                [p[f"vox.l{i}.w"] for i in range(len(encode.VOXEL_STRIDES))],
                [p[f"vox.l{i}.b"] for i in range(len(encode.VOXEL_STRIDES))],
                p["vox.proj.w"], p["vox.proj.b"])
        if "I" in rep_subset:
            feats["I"] = encode.image_stream(cache, p["img.w"], p["img.b"])
        if "P" in rep_subset:
            feats["P"] = encode.point_stream(
                cache, p["pnt.w1"], p["pnt.b1"], p["pnt.w2"], p["pnt.b2"])
        return feats

    def query_pe(self, cache):
        pe = Tensor(cache.query_pe)
        if "qpe.w" in self.params:
            pe = ad.linear(pe, self.params["qpe.w"], self.params["qpe.b"])
        return pe

    # -- forward -----------------------------------------------------------

    def forward_sample(self, cache, task, rep_subset=REPS, mode="infer", rng=None,
                       visual_feature=None, mask_schedule=None, fixed_visible=None,
                       gt_guidance_masks=None):
        """One differentiable forward pass for one task sample."""
        p = self.params
        cfgm = self.cfg.model
        subset = tuple(r for r in REPS if r in rep_subset)
        if not subset:
            raise ValueError(f"unknown representation subset {rep_subset!r}")
        if mode == "train" and cfgm.dropout_rate > 0:
            if rng is None:
                raise ValueError("train mode needs an rng for representation dropout")
            subset = dec.sample_rep_subset(subset, cfgm.dropout_rate, rng)

        feats = self.scene_features(cache, subset)
        feat_sum = None
        for r in subset:
            feat_sum = feats[r] if feat_sum is None else ad.add(feat_sum, feats[r])
        seg_pe = encode.location_encoding(
            cache.centroids, p["loc_mlp.w1"], p["loc_mlp.b1"], p["loc_mlp.w2"], p["loc_mlp.b2"])
        prompt = self.encode_prompt(task, visual_feature)

        q = cache.query_positions.shape[0]
        queries = dec.QueryState(
            features=Tensor(np.zeros((q, cfgm.hidden_dim))),
            positions=cache.query_positions, layer=0, pe=self.query_pe(cache))

        def mask_fn(q_feats):
            return heads.mask_head(q_feats, feat_sum,
                                   p["head.mask.fs.w"], p["head.mask.fs.b"],
                                   p["head.mask.fq.w"], p["head.mask.fq.b"])

        final, p_mask_layers, info = dec.decoder_forward(
            queries, feats, seg_pe, prompt, p, cfgm, subset, mask_fn,
            mode="infer",  # dropout already applied above
            mask_schedule=mask_schedule, fixed_visible=fixed_visible,
            gt_masks=gt_guidance_masks)

        p_mask = mask_fn(final.features) if cfgm.decoder_layers == 0 else p_mask_layers[-1]
        p_grd = heads.grounding_head(final.features,
                                     p["head.grd.w1"], p["head.grd.b1"],
                                     p["head.grd.w2"], p["head.grd.b2"])
        return ForwardOutput(p_mask=p_mask, p_grd=p_grd, queries=final,
                             p_mask_layers=p_mask_layers, info=info,
                             rep_subset=subset, prompt=prompt)

    # -- losses ------------------------------------------------------------

    def compute_loss(self, out, cache, task, fixed_assignment=None):
        """Per-task supervision: which heads contribute follows the task kind."""
        comps = {}
        parts = {}
        assignment = []
        relevant = list(task.target_ids)
        q_count = out.p_grd.data.shape[0]

        if relevant:
            gt = cache.gt_seg_masks[:, relevant]  # (M, G) columns of relevant instances
            assignment = (fixed_assignment if fixed_assignment is not None
                          else heads.match_queries(out.p_mask.data, gt, self.weights))
            if task.kind == "segment":
                # intermediate masks gate the attention, so supervising every
                # layer (same matching) keeps them meaningful
                if self.cfg.model.deep_mask_supervision and len(out.p_mask_layers) > 1:
                    layer_losses = [heads.mask_loss(pm, gt, assignment, self.weights)
                                    for pm in out.p_mask_layers]
                    total_mask = layer_losses[0]
                    for ll in layer_losses[1:]:
                        total_mask = ad.add(total_mask, ll)
                    parts["mask"] = ad.scale(total_mask, 1.0 / len(layer_losses))
                else:
                    parts["mask"] = heads.mask_loss(out.p_mask, gt, assignment, self.weights)
            labels = heads.grounding_labels(assignment, range(len(relevant)), q_count)
        else:
            labels = np.zeros(q_count)

        if task.kind in ("segment", "ground", "multiground", "qa"):
            parts["grd"] = heads.grounding_loss(out.p_grd, labels)
        if task.kind in ("qa", "caption"):
            parts["gen"] = self.gen_head.teacher_forcing_loss(
                out.queries.features, task.answer_tokens)

        total = heads.total_loss(parts, self.weights)
        for name, t in parts.items():
            comps[name] = float(t.data)
        return LossBreakdown(total=total, components=comps, assignment=assignment)

    # -- prediction & evaluation -------------------------------------------

    def point_masks(self, cache, p_mask_data, threshold=0.5):
        """Expand segment-level query masks to point-index sets."""
        masks = []
        for qcol in range(p_mask_data.shape[1]):
            segs = np.nonzero(p_mask_data[:, qcol] >= threshold)[0]
            if segs.size:
                masks.append(np.concatenate([cache.seg_point_lists[s] for s in segs]))
            else:
                masks.append(np.empty(0, dtype=np.int64))
        return masks

    def evaluate(self, caches, tasks, rep_subset=REPS, gt_mask_attention=False,
                 swap_visual=None):
        """MetricsReport over a task list; pure function of (params, data, reps).

        swap_visual: optional (sigma, seed); replaces every single-class text
        prompt with a noisy class-embedding visual prompt (zero-shot transfer).
        """
        grd_samples = []
        cls_grd_samples = []  # single-instance class prompts (zero-shot swap set)
        f1_samples = []
        ap_preds = []
        ap_gts = []
        qa_pairs = []
        cap_pairs = []
        counts = {}
        for t_idx, task in enumerate(sorted(tasks, key=lambda t: (t.scene_id, t.kind, t.text))):
            cache = caches[task.scene_id]
            counts[task.kind] = counts.get(task.kind, 0) + 1
            fixed_visible = None
            if gt_mask_attention and task.target_ids:
                cols = cache.gt_seg_masks[:, task.target_ids]
                fixed_visible = cols.max(axis=1) > 0.5
            visual = None
            if (swap_visual is not None and task.prompt_kind == "text"
                    and len(task.prompt_tokens) == 1):
                sigma, seed = swap_visual
                word = self.vocab.tokens[task.prompt_tokens[0]]
                visual = self.visual_feature_for(word, sigma, seed)
            out = self.forward_sample(cache, task, rep_subset, mode="infer",
                                      visual_feature=visual, fixed_visible=fixed_visible)
            scores = out.p_grd.data.reshape(-1)
            masks = self.point_masks(cache, out.p_mask.data)
            gt_sets = [cache.scene.instances[g].point_indices for g in task.target_ids]

            if task.kind == "segment":
                for qcol in range(len(masks)):
                    ap_preds.append((t_idx, masks[qcol], float(scores[qcol])))
                for g in gt_sets:
                    ap_gts.append((t_idx, g))
                if len(gt_sets) == 1:
                    top = met.top1_index(scores)
                    cls_grd_samples.append((masks[top], gt_sets[0]))
            elif task.kind == "ground":
                top = met.top1_index(scores)
                grd_samples.append((masks[top], gt_sets[0]))
            elif task.kind == "multiground":
                f1_samples.append({"masks": masks, "scores": scores.tolist(),
                                   "gts": gt_sets})
            elif task.kind == "qa":
                pred = self.gen_head.greedy_decode(out.queries.features)
                qa_pairs.append((pred, task.answer_tokens))
            elif task.kind == "caption":
                pred = self.gen_head.greedy_decode(out.queries.features)
                cap_pairs.append((pred, task.answer_tokens))

        report = {}
        if grd_samples:
            report["grounding"] = {
                "acc_at_25": met.grounding_accuracy(grd_samples, 0.25),
                "acc_at_50": met.grounding_accuracy(grd_samples, 0.5),
            }
        if cls_grd_samples:
            report["class_grounding"] = {
                "acc_at_25": met.grounding_accuracy(cls_grd_samples, 0.25),
                "acc_at_50": met.grounding_accuracy(cls_grd_samples, 0.5),
            }
        if f1_samples:
            report["multiground"] = {
                "f1_at_25": met.multi_f1(f1_samples, 0.25),
                "f1_at_50": met.multi_f1(f1_samples, 0.5),
            }
        if ap_preds or ap_gts:
            ap, ap50, ap25 = met.instance_ap(ap_preds, ap_gts)
            report["segmentation"] = {"ap": ap, "ap50": ap50, "ap25": ap25}
        if qa_pairs:
            report["qa"] = {"exact_match": met.em_at_1(qa_pairs, self.vocab.eos_id)}
        if cap_pairs:
            report["caption"] = {"exact_match": met.em_at_1(cap_pairs, self.vocab.eos_id)}
        return met.MetricsReport(metrics=report, counts=counts,
                                 rep_subset=tuple(r for r in REPS if r in rep_subset),
                                 seed=self.cfg.seed)

    def infer_one(self, cache, task, top_k=3, visual_feature=None):
        """Human-facing inference: top-k masks, scores, and decoded text."""
        out = self.forward_sample(cache, task, mode="infer", visual_feature=visual_feature)
        scores = out.p_grd.data.reshape(-1)
        masks = self.point_masks(cache, out.p_mask.data)
        order = np.argsort(-scores, kind="stable")[:top_k]
        result = {
            "top_queries": [
                {"query": int(q), "score": float(scores[q]),
                 "points": masks[q].tolist()}
                for q in order
            ],
        }
        if task.kind in ("qa", "caption") or task.prompt_kind == "numerical":
            pred = self.gen_head.greedy_decode(out.queries.features)
            result["text"] = " ".join(self.vocab.words(pred))
        return result
