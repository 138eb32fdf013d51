"""Unified prompt encoding: text, visual, and numerical prompts share one token space.

Text and visual prompts go through a frozen embedding table plus a trainable
projection, so a visual feature dropped into the [object] slot of an
"[SOS] [object] [EOS]" frame lands in exactly the space a one-word text
prompt would. Numerical prompts (3D location or box) get their own linear
maps and produce a single token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class PromptTokens:
    kind: str  # text | visual | numerical
    tokens: ad.Tensor  # (T, D)

    def __post_init__(self):
        if self.tokens.data.ndim != 2 or self.tokens.data.shape[0] < 1:
            raise ValueError("prompt must have at least one token")


def frozen_embedding_table(vocab_size, dim, seed):
    """Rows are orthonormal when vocab_size <= dim, unit-norm otherwise."""
    rng = np.random.default_rng(np.random.PCG64([seed, 0xE1B]))
    raw = rng.normal(size=(vocab_size, dim))
    if vocab_size <= dim:
        q, _ = np.linalg.qr(raw.T)  # (dim, vocab) with orthonormal columns
        return np.ascontiguousarray(q.T)
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


class PromptEncoder:
    """Holds the frozen table and applies the trainable projections.

    Parameters come in as tensors so gradients flow to the projection and
    the numerical linears; the table itself never trains.
    """

    def __init__(self, vocab, table):
        self.vocab = vocab
        self.table = np.asarray(table, dtype=np.float64)

    def _project(self, rows, proj_w, proj_b):
        return ad.linear(Tensor(rows), proj_w, proj_b)

    def encode_text(self, token_ids, proj_w, proj_b):
        for t in token_ids:
            if not 0 <= t < len(self.vocab):
                raise KeyError(f"unknown token id {t}")
        seq = [self.vocab.sos_id] + list(token_ids) + [self.vocab.eos_id]
        rows = self.table[np.asarray(seq, dtype=np.int64)]
        return PromptTokens(kind="text", tokens=self._project(rows, proj_w, proj_b))

    def encode_visual(self, visual_feature, proj_w, proj_b):
        feat = np.asarray(visual_feature, dtype=np.float64).reshape(-1)
        if feat.shape[0] != self.table.shape[1]:
            raise ValueError(f"visual feature must have dim {self.table.shape[1]}")
        if not np.all(np.isfinite(feat)):
            raise ValueError("visual feature must be finite")
        rows = np.stack([self.table[self.vocab.sos_id], feat, self.table[self.vocab.eos_id]])
        return PromptTokens(kind="visual", tokens=self._project(rows, proj_w, proj_b))

    def encode_numerical(self, payload, loc_w, loc_b, box_w, box_b):
        payload = np.asarray(payload, dtype=np.float64).reshape(-1)
        if payload.shape[0] == 3:
            w, b = loc_w, loc_b
        elif payload.shape[0] == 6:
            w, b = box_w, box_b
        else:
            raise ValueError(f"numerical prompt needs 3 or 6 floats, got {payload.shape[0]}")
        if not np.all(np.isfinite(payload)):
            raise ValueError("numerical prompt must be finite")
        token = ad.linear(Tensor(payload.reshape(1, -1)), w, b)
        return PromptTokens(kind="numerical", tokens=token)

    def class_feature(self, word):
        """The frozen embedding row for a vocabulary word (visual-prompt stand-in)."""
        return self.table[self.vocab.id(word)].copy()
