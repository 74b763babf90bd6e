"""Tokenizer, embedding tables with learnable slot rows, and the small
frozen text encoder.

The encoder is a 2-layer, 2-head self-attention stack over d=64 embeddings.
It is trained jointly with the diffusion model on scene captions and frozen
afterwards; component-noun slots live in a separate learnable table whose
rows are injected at their token positions before the encoder runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .prompts import PAD_WORD, vocabulary_words

MAX_CONTEXT = 32
EMBED_DIM = 64


class OutOfVocabularyError(ValueError):
    pass


class Vocabulary:
    def __init__(self, words: list[str] | None = None):
        self.words = list(words) if words is not None else vocabulary_words()
        if self.words[0] != PAD_WORD:
            raise ValueError("vocabulary must start with the pad word")
        self.word2id = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def save(self, path: str):
        with open(path, "w") as f:
            f.write("\n".join(self.words) + "\n")

    @staticmethod
    def load(path: str) -> "Vocabulary":
        with open(path) as f:
            return Vocabulary([line.rstrip("\n") for line in f if line.rstrip("\n")])


@dataclass
class TokenSeq:
    ids: list[int]
    slot_positions: list[int] = field(default_factory=list)
    # index into the slot table for each slot position
    slot_indices: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(
    prompt: str,
    vocab: Vocabulary,
    slot_nouns: tuple[str, ...] = (),
    max_context: int = MAX_CONTEXT,
) -> TokenSeq:
    """Whitespace tokenization over the closed vocabulary.

    Positions of registered slot nouns are marked so the embedding table can
    route them to its learnable rows.
    """
    words = prompt.split()
    if len(words) > max_context:
        raise ValueError(f"prompt has {len(words)} tokens, max is {max_context}")
    ids, slot_pos, slot_idx = [], [], []
    for i, w in enumerate(words):
        if w not in vocab.word2id:
            raise OutOfVocabularyError(f"word {w!r} not in vocabulary")
        ids.append(vocab.word2id[w])
        if w in slot_nouns:
            slot_pos.append(i)
            slot_idx.append(slot_nouns.index(w))
    return TokenSeq(ids, slot_pos, slot_idx)


def detokenize(ids: list[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.words[i] for i in ids)


class EmbeddingTable(nn.Module):
    """Frozen base embedding rows plus a small learnable slot table."""

    def __init__(self, vocab_size: int, dim: int = EMBED_DIM):
        super().__init__()
        self.base = nn.Parameter(torch.randn(vocab_size, dim) * 0.02)
        self.slot_nouns: tuple[str, ...] = ()
        self.slot_table = nn.Parameter(torch.zeros(0, dim))

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def init_learnable(self, nouns: list[str], init_words: list[str], vocab: Vocabulary):
        """Create one slot row per noun, copied from the init word's base row."""
        if len(nouns) != len(init_words):
            raise ValueError("need one init word per noun")
        rows = []
        for w in init_words:
            if w not in vocab.word2id:
                raise OutOfVocabularyError(f"init word {w!r} not in vocabulary")
            rows.append(self.base[vocab.word2id[w]].detach().clone())
        self.slot_nouns = tuple(nouns)
        self.slot_table = nn.Parameter(torch.stack(rows))

    def lookup(self, tokens: TokenSeq) -> torch.Tensor:
        """Per-token embeddings with slot rows injected at slot positions."""
        ids = torch.as_tensor(tokens.ids, dtype=torch.long, device=self.base.device)
        emb = self.base[ids]
        if tokens.slot_positions:
            pos = torch.as_tensor(tokens.slot_positions, dtype=torch.long, device=emb.device)
            sidx = torch.as_tensor(tokens.slot_indices, dtype=torch.long, device=emb.device)
            emb = emb.clone()
            emb[pos] = self.slot_table[sidx]
        return emb


class _SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        # x: (B, n, d); key_mask: (B, n) True where padded
        B, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q = q.view(B, n, h, d // h).transpose(1, 2)
        k = k.view(B, n, h, d // h).transpose(1, 2)
        v = v.view(B, n, h, d // h).transpose(1, 2)
        att = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_mask is not None:
            att = att.masked_fill(key_mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, n, d)
        x = x + self.proj(out)
        x = x + self.mlp(self.norm2(x))
        return x


class TextEncoder(nn.Module):
    """2-layer, 2-head self-attention encoder over token embeddings."""

    def __init__(self, dim: int = EMBED_DIM, heads: int = 2, layers: int = 2,
                 max_context: int = MAX_CONTEXT):
        super().__init__()
        self.pos = nn.Parameter(torch.randn(max_context, dim) * 0.02)
        self.blocks = nn.ModuleList(_SelfAttentionBlock(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, emb: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        # emb: (B, n, d)
        n = emb.shape[1]
        x = emb + self.pos[:n]
        for blk in self.blocks:
            x = blk(x, key_mask)
        return self.norm(x)


def encode(
    tokens: TokenSeq,
    table: EmbeddingTable,
    encoder: TextEncoder | None = None,
) -> torch.Tensor:
    """Conditioning embedding (n x d) for a single token sequence.

    `encoder=None` is lookup mode: raw (slot-injected) embeddings without
    contextualization.
    """
    emb = table.lookup(tokens)
    if encoder is None:
        return emb
    return encoder(emb[None])[0]


def encode_batch(
    token_seqs: list[TokenSeq],
    table: EmbeddingTable,
    encoder: TextEncoder,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad to batch max length and encode. Returns (B, n, d) and pad mask (B, n)."""
    n = max(len(t) for t in token_seqs)
    B = len(token_seqs)
    emb = torch.zeros(B, n, table.dim, dtype=table.base.dtype, device=table.base.device)
    mask = torch.ones(B, n, dtype=torch.bool, device=table.base.device)
    for i, t in enumerate(token_seqs):
        emb[i, : len(t)] = table.lookup(t)
        mask[i, : len(t)] = False
    return encoder(emb, mask), mask
