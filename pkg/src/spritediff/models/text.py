"""Caption tokens and the transformer text encoder.

The vocabulary is closed over the sprite caption grammar plus PAD/UNK/EOS.
An empty caption is exactly the zero-length id sequence; the encoder appends
EOS internally so the empty caption flows through the same code path as any
other (the "final token" is then the EOS at position 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .. import engine as eng
from ..engine import (
    Embedding, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, Tensor,
)

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPES = ("square", "circle", "triangle", "cross", "person")
RELATION_WORDS = ("above", "below", "left", "right", "of")

PAD, UNK, EOS = 0, 1, 2
VOCAB = ("<pad>", "<unk>", "<eos>", "a") + COLORS + SHAPES + RELATION_WORDS
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
K_MAX = 16


@dataclass(frozen=True)
class CaptionTokens:
    """Token ids for one caption; the empty tuple encodes the null caption."""

    ids: Tuple[int, ...]

    def __len__(self):
        return len(self.ids)

    @property
    def is_empty(self):
        return len(self.ids) == 0


EMPTY = CaptionTokens(())


def tokenize(caption):
    """Whitespace tokenization against the closed grammar vocabulary."""
    words = caption.lower().split()
    if len(words) > K_MAX:
        raise ValueError(f"caption has {len(words)} tokens, limit is {K_MAX}")
    return CaptionTokens(tuple(WORD_TO_ID.get(w, UNK) for w in words))


def detokenize(tokens):
    return " ".join(VOCAB[i] for i in tokens.ids)


def pack_tokens(tokens_list, k_max=K_MAX):
    """Pad a batch of CaptionTokens to (N, k_max+1) ids with EOS terminators.

    Returns (ids, valid, eos_pos); positions after EOS are PAD and are
    excluded from attention by `valid`.
    """
    n = len(tokens_list)
    ids = np.full((n, k_max + 1), PAD, dtype=np.int64)
    valid = np.zeros((n, k_max + 1), dtype=bool)
    eos_pos = np.zeros(n, dtype=np.int64)
    for i, tok in enumerate(tokens_list):
        if len(tok.ids) > k_max:
            raise ValueError(f"caption has {len(tok.ids)} tokens, limit is {k_max}")
        ids[i, : len(tok.ids)] = tok.ids
        ids[i, len(tok.ids)] = EOS
        valid[i, : len(tok.ids) + 1] = True
        eos_pos[i] = len(tok.ids)
    return ids, valid, eos_pos


class TransformerBlock(Module):
    def __init__(self, width, heads, rng, dtype=np.float32):
        self.ln1 = LayerNorm(width, dtype=dtype)
        self.attn = MultiHeadAttention(width, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(width, dtype=dtype)
        self.fc1 = Linear(width, 4 * width, rng, dtype=dtype)
        self.fc2 = Linear(4 * width, width, rng, dtype=dtype)

    def __call__(self, x, mask):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.fc2(eng.silu(self.fc1(self.ln2(x))))


class TextEncoder(Module):
    """Token transformer; exposes the final-token embedding and the full
    (masked) token sequence for attention-context conditioning."""

    def __init__(self, width, layers, heads, rng, vocab_size=len(VOCAB),
                 k_max=K_MAX, dtype=np.float32):
        self.width = width
        self.k_max = k_max
        self.tok = Embedding(vocab_size, width, rng, dtype=dtype)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(k_max + 1, width)), dtype=dtype)
        self.blocks = [TransformerBlock(width, heads, rng, dtype=dtype) for _ in range(layers)]
        self.ln_out = LayerNorm(width, dtype=dtype)

    def encode_ids(self, ids, valid, eos_pos):
        n = ids.shape[0]
        x = self.tok(ids) + self.pos
        bias = eng.key_padding_bias(valid, dtype=x.dtype)
        for block in self.blocks:
            x = block(x, bias)
        x = self.ln_out(x)
        idx = np.broadcast_to(eos_pos[:, None, None], (n, 1, self.width)).copy()
        final = eng.gather(x, idx, axis=1).reshape(n, self.width)
        return final, x

    def __call__(self, tokens_list):
        """Returns (final_embedding (N,D), token_sequence (N,K+1,D), valid (N,K+1))."""
        ids, valid, eos_pos = pack_tokens(tokens_list, self.k_max)
        final, seq = self.encode_ids(ids, valid, eos_pos)
        return final, seq, valid
