"""Universal output heads (mask, grounding, generation) and the loss stack.

Supervision is anchored by minimum-cost matching between predicted segment
masks and ground-truth instances: the mask loss runs over matched pairs, and
grounding labels mark queries matched to task-relevant instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .assignment import hungarian

PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    mask: float = 1.0
    grd: float = 10.0
    gen: float = 1.0
    bce: float = 1.0
    dice: float = 1.0
    noobj: float = 0.1  # weight of the unmatched-query empty-mask term


# ---------------------------------------------------------------------------
# heads


def mask_head(q_feats, feat_sum, fs_w, fs_b, fq_w, fq_b):
    """sigma(f_s(V + I + P) . f_q(Q)^T): per-segment probabilities, (M, Q)."""
    fs = ad.linear(feat_sum, fs_w, fs_b)
    fq = ad.linear(q_feats, fq_w, fq_b)
    return ad.sigmoid(ad.matmul(fs, ad.transpose(fq)))


def grounding_head(q_feats, w1, b1, w2, b2):
    """Two-layer MLP to a per-query relevance probability, (Q, 1)."""
    hidden = ad.relu(ad.linear(q_feats, w1, b1))
    return ad.sigmoid(ad.linear(hidden, w2, b2))


class GenerationHead:
    """Small prefix decoder: causal self-attention plus cross-attention
    over the final instance queries, with a learned position table."""

    def __init__(self, vocab, params, cfg):
        self.vocab = vocab
        self.params = params
        self.n_blocks = cfg.gen_blocks
        self.max_len = cfg.gen_max_len
        self.eps = cfg.layer_norm_eps

    def _block(self, x, queries, i, causal_mask):
        p = self.params
        d = x.data.shape[1]
        logits = ad.scale(ad.matmul(ad.matmul(x, p[f"gen.b{i}.self.wq"]),
                                    ad.transpose(ad.matmul(x, p[f"gen.b{i}.self.wk"]))),
                          1.0 / np.sqrt(d))
        att = ad.softmax_masked(logits, causal_mask)
        x = ad.layer_norm(ad.add(x, ad.matmul(att, ad.matmul(x, p[f"gen.b{i}.self.wv"]))),
                          p[f"gen.b{i}.n1.gamma"], p[f"gen.b{i}.n1.beta"], self.eps)
        cross = ad.scale(ad.matmul(ad.matmul(x, p[f"gen.b{i}.cross.wq"]),
                                   ad.transpose(ad.matmul(queries, p[f"gen.b{i}.cross.wk"]))),
                         1.0 / np.sqrt(d))
        catt = ad.softmax_masked(cross)
        x = ad.layer_norm(ad.add(x, ad.matmul(catt, ad.matmul(queries, p[f"gen.b{i}.cross.wv"]))),
                          p[f"gen.b{i}.n2.gamma"], p[f"gen.b{i}.n2.beta"], self.eps)
        ffn = ad.linear(ad.relu(ad.linear(x, p[f"gen.b{i}.ffn.w1"], p[f"gen.b{i}.ffn.b1"])),
                        p[f"gen.b{i}.ffn.w2"], p[f"gen.b{i}.ffn.b2"])
        return ad.layer_norm(ad.add(x, ffn),
                             p[f"gen.b{i}.n3.gamma"], p[f"gen.b{i}.n3.beta"], self.eps)

    def logits(self, queries, input_ids):
        """Per-position vocabulary logits for a (teacher-forced) prefix."""
        p = self.params
        n = len(input_ids)
        if n > self.params["gen.pos"].data.shape[0]:
            raise ValueError(f"prefix longer than the position table ({n})")
        ids = np.asarray(input_ids, dtype=np.int64)
        x = ad.add(ad.gather_rows(p["gen.emb"], ids),
                   ad.gather_rows(p["gen.pos"], np.arange(n)))
        causal = np.where(np.triu(np.ones((n, n)), k=1) > 0, -np.inf, 0.0)
        for i in range(self.n_blocks):
            x = self._block(x, queries, i, causal)
        return ad.linear(x, p["gen.out.w"], p["gen.out.b"])

    def teacher_forcing_loss(self, queries, target_tokens):
        """Mean cross-entropy over positions of target_tokens + [EOS]."""
        for t in target_tokens:
            if not 0 <= t < len(self.vocab):
                raise KeyError(f"unknown target token id {t}")
        target = list(target_tokens) + [self.vocab.eos_id]
        inputs = [self.vocab.sos_id] + list(target_tokens)
        logits = self.logits(queries, inputs)
        logp = ad.log_softmax(logits)
        onehot = np.zeros((len(target), len(self.vocab)))
        onehot[np.arange(len(target)), target] = 1.0
        return ad.scale(ad.tsum(ad.mul(logp, Tensor(onehot))), -1.0 / len(target))

    def greedy_decode(self, queries):
        """Deterministic argmax rollout, stopping at [EOS] or max length."""
        ids = [self.vocab.sos_id]
        out = []
        for _ in range(self.max_len):
            logits = self.logits(queries, ids).data
            nxt = int(np.argmax(logits[-1]))  # ties pick the lowest id
            if nxt == self.vocab.eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
        return out


# ---------------------------------------------------------------------------
# matching and losses


def _bce_terms_np(p, g):
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(g * np.log(p) + (1.0 - g) * np.log(1.0 - p))


def matching_cost(p_mask, gt_masks, weights=None):
    """(Q, G) cost: the same BCE + Dice pair the mask loss optimizes.

    Runs on plain arrays; matching is a discrete choice, so no gradient
    flows through it.
    """
    w = weights or LossWeights()
    p = np.asarray(p_mask, dtype=np.float64)  # (M, Q)
    g = np.asarray(gt_masks, dtype=np.float64)  # (M, G)
    if g.shape[1] < 1:
        raise ValueError("matching needs at least one ground-truth instance")
    m = p.shape[0]
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -(np.log(pc).T @ g + np.log(1.0 - pc).T @ (1.0 - g)) / m  # (Q, G)
    inter = p.T @ g
    dice = 1.0 - (2.0 * inter + 1.0) / (p.sum(axis=0)[:, None] + g.sum(axis=0)[None, :] + 1.0)
    return w.bce * bce + w.dice * dice


def mask_loss(p_mask, gt_masks, assignment, weights=None):
    """Mean matched-pair (BCE + Dice) plus a small empty-mask term on
    unmatched queries; Dice uses +1 smoothing in numerator and denominator."""
    w = weights or LossWeights()
    g = np.asarray(gt_masks, dtype=np.float64)
    m, q_count = p_mask.data.shape
    pt = ad.transpose(p_mask)  # (Q, M)
    q_idx = [q for q, _ in assignment]
    g_idx = [gt for _, gt in assignment]
    psel = ad.gather_rows(pt, np.asarray(q_idx, dtype=np.int64))  # (k, M)
    gsel = g.T[np.asarray(g_idx, dtype=np.int64)]  # (k, M)
    k = len(assignment)

    pc = ad.clamp(psel, PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce_terms = ad.add(ad.mul(Tensor(gsel), ad.log(pc)),
                       ad.mul(Tensor(1.0 - gsel), ad.log(ad.add_const(ad.scale(pc, -1.0), 1.0))))
    bce = ad.scale(ad.tsum(bce_terms), -1.0 / (k * m))

    ones = Tensor(np.ones((m, 1)))
    inter = ad.matmul(ad.mul(psel, Tensor(gsel)), ones)  # (k, 1)
    psum = ad.matmul(psel, ones)
    gsum = gsel.sum(axis=1, keepdims=True)
    num = ad.add_const(ad.scale(inter, 2.0), 1.0)
    den = ad.add(psum, Tensor(gsum + 1.0))
    dice = ad.scale(ad.tsum(ad.add_const(ad.scale(ad.div(num, den), -1.0), 1.0)), 1.0 / k)

    total = ad.add(ad.scale(bce, w.bce), ad.scale(dice, w.dice))

    unmatched = [q for q in range(q_count) if q not in set(q_idx)]
    if unmatched and w.noobj > 0:
        pu = ad.clamp(ad.gather_rows(pt, np.asarray(unmatched, dtype=np.int64)),
                      PROB_CLAMP, 1.0 - PROB_CLAMP)
        noobj = ad.scale(ad.tsum(ad.log(ad.add_const(ad.scale(pu, -1.0), 1.0))),
                         -1.0 / (len(unmatched) * m))
        total = ad.add(total, ad.scale(noobj, w.noobj))
    return total


def grounding_labels(assignment, relevant_gt_ids, q_count):
    """Label 1 for queries matched to a relevant instance, else 0."""
    labels = np.zeros(q_count)
    rel = set(relevant_gt_ids)
    for q, g in assignment:
        if g in rel:
            labels[q] = 1.0
    return labels


def grounding_loss(p_grd, labels):
    """Per-query binary cross-entropy against matching-derived labels."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    q_count = labels.shape[0]
    pc = ad.clamp(p_grd, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = ad.add(ad.mul(Tensor(labels), ad.log(pc)),
                   ad.mul(Tensor(1.0 - labels), ad.log(ad.add_const(ad.scale(pc, -1.0), 1.0))))
    return ad.scale(ad.tsum(terms), -1.0 / q_count)


def total_loss(components, weights=None):
    """Weighted sum of the present head losses; absent heads contribute 0."""
    w = weights or LossWeights()
    lam = {"mask": w.mask, "grd": w.grd, "gen": w.gen}
    total = None
    for name in ("mask", "grd", "gen"):
        part = components.get(name)
        if part is None:
            continue
        term = ad.scale(part, lam[name])
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no loss component present")
    return total


def match_queries(p_mask_data, gt_masks, weights=None):
    """Hungarian assignment of queries to instances on the mask cost."""
    cost = matching_cost(p_mask_data, gt_masks, weights)
    return hungarian(cost)
