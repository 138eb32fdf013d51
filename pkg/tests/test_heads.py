"""Output heads and loss stack: formula re-evaluations and analytic cases."""

import numpy as np
import pytest

from promptscene import autodiff as ad
from promptscene import heads
from promptscene.autodiff import Tensor
from promptscene.config import ModelConfig
from promptscene.heads import (GenerationHead, LossWeights, grounding_head,
                               grounding_labels, grounding_loss, mask_head,
                               mask_loss, matching_cost, total_loss)
from promptscene.vocab import Vocabulary

D = 12
M = 8
Q = 3


def rngs(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# mask head


def test_mask_head_zero_params_give_half():
    rng = rngs(1)
    fsum = Tensor(rng.normal(size=(M, D)))
    q = Tensor(rng.normal(size=(Q, D)))
    zero = lambda *s: Tensor(np.zeros(s), requires_grad=True)
    out = mask_head(q, fsum, zero(D, D), zero(D), zero(D, D), zero(D))
    assert out.data.shape == (M, Q)
    assert np.allclose(out.data, 0.5)


def test_mask_head_formula_reevaluation():
    rng = rngs(2)
    fsum = Tensor(rng.normal(size=(M, D)))
    q = Tensor(rng.normal(size=(Q, D)))
    fs_w, fq_w = Tensor(rng.normal(size=(D, D))), Tensor(rng.normal(size=(D, D)))
    fs_b, fq_b = Tensor(rng.normal(size=D)), Tensor(rng.normal(size=D))
    out = mask_head(q, fsum, fs_w, fs_b, fq_w, fq_b).data
    ref = 1 / (1 + np.exp(-((fsum.data @ fs_w.data + fs_b.data)
                            @ (q.data @ fq_w.data + fq_b.data).T)))
    assert np.allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------------------
# grounding head


def test_grounding_zero_params_half_and_monotone():
    rng = rngs(3)
    q = Tensor(rng.normal(size=(Q, D)))
    zero = lambda *s: Tensor(np.zeros(s), requires_grad=True)
    out = grounding_head(q, zero(D, D // 2), zero(D // 2), zero(D // 2, 1), zero(1))
    assert np.allclose(out.data, 0.5)
    # monotone in the pre-sigmoid logit: raising the final bias raises scores
    w1, b1 = Tensor(rng.normal(size=(D, D // 2))), Tensor(np.zeros(D // 2))
    w2 = Tensor(rng.normal(size=(D // 2, 1)))
    low = grounding_head(q, w1, b1, w2, Tensor(np.array([-1.0]))).data
    high = grounding_head(q, w1, b1, w2, Tensor(np.array([1.0]))).data
    assert (high > low).all()


def test_grounding_gradient():
    rng = rngs(4)
    q = Tensor(rng.normal(size=(Q, D)))
    w1 = Tensor(rng.normal(size=(D, D // 2)), requires_grad=True)
    b1 = Tensor(np.zeros(D // 2), requires_grad=True)
    w2 = Tensor(rng.normal(size=(D // 2, 1)), requires_grad=True)
    b2 = Tensor(np.zeros(1), requires_grad=True)

    def f():
        return ad.tsum(grounding_head(q, w1, b1, w2, b2))

    err, _ = ad.grad_check(f, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})
    assert err < 1e-6


# ---------------------------------------------------------------------------
# generation head


def gen_setup(vocab_size=None, seed=5, zero_out=False):
    vocab = Vocabulary()
    cfg = ModelConfig(hidden_dim=D, gen_blocks=2, gen_max_len=8)
    rng = rngs(seed)
    params = {}
    params["gen.emb"] = Tensor(rng.normal(size=(len(vocab), D)), requires_grad=True)
    params["gen.pos"] = Tensor(rng.normal(size=(cfg.gen_max_len + 1, D)), requires_grad=True)
    for b in range(cfg.gen_blocks):
        for part in ("self", "cross"):
            for m in ("wq", "wk", "wv"):
                params[f"gen.b{b}.{part}.{m}"] = Tensor(
                    rng.normal(scale=1 / np.sqrt(D), size=(D, D)), requires_grad=True)
        params[f"gen.b{b}.ffn.w1"] = Tensor(
            rng.normal(scale=1 / np.sqrt(D), size=(D, 4 * D)), requires_grad=True)
        params[f"gen.b{b}.ffn.b1"] = Tensor(np.zeros(4 * D), requires_grad=True)
        params[f"gen.b{b}.ffn.w2"] = Tensor(
            rng.normal(scale=1 / np.sqrt(4 * D), size=(4 * D, D)), requires_grad=True)
        params[f"gen.b{b}.ffn.b2"] = Tensor(np.zeros(D), requires_grad=True)
        for n in ("n1", "n2", "n3"):
            params[f"gen.b{b}.{n}.gamma"] = Tensor(np.ones(D), requires_grad=True)
            params[f"gen.b{b}.{n}.beta"] = Tensor(np.zeros(D), requires_grad=True)
    out_w = np.zeros((D, len(vocab))) if zero_out else rng.normal(size=(D, len(vocab)))
    params["gen.out.w"] = Tensor(out_w, requires_grad=True)
    params["gen.out.b"] = Tensor(np.zeros(len(vocab)), requires_grad=True)
    head = GenerationHead(vocab, params, cfg)
    queries = Tensor(rngs(6).normal(size=(Q, D)))
    return head, queries, vocab


def test_uniform_logits_ce_is_log_vocab():
    head, queries, vocab = gen_setup(zero_out=True)
    loss = head.teacher_forcing_loss(queries, vocab.ids(["3"]))
    assert float(loss.data) == pytest.approx(np.log(len(vocab)), abs=1e-12)


def test_greedy_decode_deterministic():
    head, queries, _ = gen_setup()
    a = head.greedy_decode(queries)
    b = head.greedy_decode(queries)
    assert a == b
    assert len(a) <= head.max_len


def test_causal_property():
    head, queries, vocab = gen_setup()
    base = head.logits(queries, vocab.ids(["how", "many", "chair"])).data
    altered = head.logits(queries, vocab.ids(["how", "many", "lamp"])).data
    assert np.array_equal(base[:2], altered[:2])  # prefix logits untouched
    assert not np.allclose(base[2], altered[2])


def test_generation_rejects_unknown_target():
    head, queries, _ = gen_setup()
    with pytest.raises(KeyError):
        head.teacher_forcing_loss(queries, [10_000])


def test_generation_gradient():
    head, queries, vocab = gen_setup()

    def f():
        return head.teacher_forcing_loss(queries, vocab.ids(["2"]))

    picked = {k: head.params[k] for k in
              ("gen.emb", "gen.pos", "gen.b0.self.wq", "gen.b1.cross.wv",
               "gen.out.w", "gen.b0.n1.gamma")}
    err, _ = ad.grad_check(f, picked, max_coords_per_param=25)
    assert err < 1e-5


# ---------------------------------------------------------------------------
# matching cost


def test_matching_cost_perfect_column():
    gt = np.zeros((M, 2))
    gt[:3, 0] = 1.0
    gt[3:, 1] = 1.0
    p = np.clip(gt[:, [0]], 1e-4, 1 - 1e-4)  # one query, matches gt 0
    cost = matching_cost(p, gt)
    assert cost.shape == (1, 2)
    assert cost[0, 0] < 1e-3  # dice ~ 0, bce < eps
    assert cost[0, 1] > 1.0


def test_matching_cost_uniform_half_symmetric():
    gt = np.zeros((M, 3))
    gt[0, 0] = gt[1, 1] = gt[2, 2] = 1.0
    p = np.full((M, 2), 0.5)
    cost = matching_cost(p, gt)
    for qcol in range(2):
        assert np.allclose(cost[qcol], cost[qcol][0])


def test_matching_cost_formula_reevaluation():
    rng = rngs(7)
    p = rng.uniform(0.01, 0.99, size=(M, Q))
    gt = (rng.random((M, 2)) > 0.5).astype(float)
    w = LossWeights()
    cost = matching_cost(p, gt, w)
    for qcol in range(Q):
        for g in range(2):
            pc = np.clip(p[:, qcol], 1e-7, 1 - 1e-7)
            bce = -(gt[:, g] * np.log(pc) + (1 - gt[:, g]) * np.log(1 - pc)).mean()
            inter = float(p[:, qcol] @ gt[:, g])
            dice = 1 - (2 * inter + 1) / (p[:, qcol].sum() + gt[:, g].sum() + 1)
            assert cost[qcol, g] == pytest.approx(w.bce * bce + w.dice * dice, abs=1e-12)


# ---------------------------------------------------------------------------
# mask loss


def test_mask_loss_perfect_match_near_zero():
    n_seg = 120
    gt = np.zeros((n_seg, 1))
    gt[:40, 0] = 1.0
    p = Tensor(np.clip(gt, 1e-9, 1 - 1e-9))
    w = LossWeights(noobj=0.0)
    loss = mask_loss(p, gt, [(0, 0)], w)
    assert float(loss.data) < 1e-3


def test_mask_loss_half_prediction_dice_limit():
    n_seg = 400
    gt = np.ones((n_seg, 1))
    p = Tensor(np.full((n_seg, 1), 0.5))
    w = LossWeights(bce=0.0, noobj=0.0)  # isolate the dice term
    loss = float(mask_loss(p, gt, [(0, 0)], w).data)
    expected = 1 - (2 * 0.5 * n_seg + 1) / (0.5 * n_seg + n_seg + 1)
    assert loss == pytest.approx(expected, abs=1e-12)
    assert abs(loss - 1 / 3) < 2e-3  # analytic limit as M grows


def test_mask_loss_value_reevaluation():
    rng = rngs(8)
    p_data = rng.uniform(0.05, 0.95, size=(M, Q))
    gt = (rng.random((M, 2)) > 0.6).astype(float)
    assignment = [(0, 1), (2, 0)]
    w = LossWeights(noobj=0.1)
    loss = float(mask_loss(Tensor(p_data), gt, assignment, w).data)
    # independent re-evaluation
    pair_bce, pair_dice = [], []
    for q, g in assignment:
        pc = np.clip(p_data[:, q], 1e-7, 1 - 1e-7)
        pair_bce.append(-(gt[:, g] * np.log(pc) + (1 - gt[:, g]) * np.log(1 - pc)).mean())
        inter = p_data[:, q] @ gt[:, g]
        pair_dice.append(1 - (2 * inter + 1) / (p_data[:, q].sum() + gt[:, g].sum() + 1))
    ref = w.bce * np.mean(pair_bce) + w.dice * np.mean(pair_dice)
    pu = np.clip(p_data[:, 1], 1e-7, 1 - 1e-7)
    ref += w.noobj * (-np.log(1 - pu).mean())
    assert loss == pytest.approx(ref, abs=1e-12)


def test_mask_loss_gradient():
    rng = rngs(9)
    logits = Tensor(rng.normal(size=(M, Q)), requires_grad=True)
    gt = (rng.random((M, 2)) > 0.5).astype(float)

    def f():
        return mask_loss(ad.sigmoid(logits), gt, [(0, 0), (1, 1)], LossWeights())

    err, _ = ad.grad_check(f, {"logits": logits})
    assert err < 1e-6


# ---------------------------------------------------------------------------
# grounding loss


def test_grounding_loss_half_scores_zero_labels():
    p = Tensor(np.full((Q, 1), 0.5))
    loss = grounding_loss(p, np.zeros(Q))
    assert float(loss.data) == pytest.approx(np.log(2.0), abs=1e-12)


def test_grounding_loss_perfect_predictions():
    labels = np.array([1.0, 0.0, 1.0])
    p = Tensor(labels.reshape(-1, 1))  # exact: clamped internally
    loss = float(grounding_loss(p, labels).data)
    assert loss < 1e-6


def test_grounding_loss_reevaluation():
    rng = rngs(10)
    p_data = rng.uniform(0.05, 0.95, size=(Q, 1))
    labels = np.array([1.0, 0.0, 1.0])
    loss = float(grounding_loss(Tensor(p_data), labels).data)
    pc = np.clip(p_data.reshape(-1), 1e-7, 1 - 1e-7)
    ref = -(labels * np.log(pc) + (1 - labels) * np.log(1 - pc)).mean()
    assert loss == pytest.approx(ref, abs=1e-12)


def test_grounding_labels_from_assignment():
    labels = grounding_labels([(0, 0), (2, 1)], relevant_gt_ids=[0, 1], q_count=4)
    assert labels.tolist() == [1.0, 0.0, 1.0, 0.0]
    labels = grounding_labels([(1, 0)], relevant_gt_ids=[], q_count=2)
    assert labels.tolist() == [0.0, 0.0]


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_weighted_sum():
    comps = {"mask": Tensor(np.array(0.2)), "grd": Tensor(np.array(0.05)),
             "gen": Tensor(np.array(0.3))}
    out = total_loss(comps, LossWeights(mask=1, grd=10, gen=1))
    assert float(out.data) == pytest.approx(1.0, abs=1e-12)


def test_total_loss_caption_has_no_grounding_term():
    comps = {"gen": Tensor(np.array(0.3))}
    out = total_loss(comps, LossWeights())
    assert float(out.data) == pytest.approx(0.3, abs=1e-12)
    with pytest.raises(ValueError):
        total_loss({}, LossWeights())


def test_total_loss_linear_in_lambda():
    comps = {"mask": Tensor(np.array(0.7)), "grd": Tensor(np.array(0.11))}
    base = float(total_loss(comps, LossWeights(mask=1, grd=1)).data)
    doubled = float(total_loss(comps, LossWeights(mask=1, grd=2)).data)
    assert doubled - base == pytest.approx(0.11, abs=1e-12)
