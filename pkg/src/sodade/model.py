"""Decoder-only transformer over (property, value) sequences."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LayerNorm, Linear, Module, Tensor, parameter
from .dataio import N_PROPS
from .seqgen import MaskedBatch


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 16
    layers: int = 5
    ffn_dim: int = 256
    n_properties: int = N_PROPS
    type_vocab: int = 1
    dropout: float = 0.1
    use_type_token: bool = True
    activation: str = "gelu"  # or "relu"
    norm: str = "pre"  # or "post"
    positional: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm not in ("pre", "post"):
            raise ValueError(f"unknown norm placement {self.norm!r}")

    @property
    def seq_len(self):
        return self.n_properties + (1 if self.use_type_token else 0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def attention_disallowed(missing, use_type_token=True):
    """[B, L, L] bool: True where query i may not look at key j.

    Keys after the query (causal) and missing keys are blocked; a query can
    always see itself.
    """
    missing = np.asarray(missing, dtype=bool)
    b = missing.shape[0]
    if use_type_token:
        missing = np.concatenate([np.zeros((b, 1), dtype=bool), missing], axis=1)
    L = missing.shape[1]
    future = np.triu(np.ones((L, L), dtype=bool), k=1)
    blocked = future[None, :, :] | missing[:, None, :]
    blocked[:, np.arange(L), np.arange(L)] = False
    return blocked


class SelfAttention(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype, out_std):
        d = cfg.d_model
        self.heads = cfg.heads
        self.qkv = Linear(d, 3 * d, rng, dtype=dtype)
        self.out = Linear(d, d, rng, std=out_std, dtype=dtype)

    def __call__(self, x, disallowed):
        B, L, d = x.shape
        h = self.heads
        dh = d // h

        qkv = self.qkv(x).reshape(B, L, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.mul(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
        scores = ad.masked_fill_additive(scores, disallowed[:, None, :, :])
        weights = ad.softmax(scores, axis=-1)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return self.out(ctx)


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        out_std = 0.02 / math.sqrt(2 * cfg.layers)
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.attn = SelfAttention(cfg, rng, dtype, out_std)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.fc1 = Linear(cfg.d_model, cfg.ffn_dim, rng, dtype=dtype)
        self.fc2 = Linear(cfg.ffn_dim, cfg.d_model, rng, std=out_std, dtype=dtype)
        self._act = ad.gelu if cfg.activation == "gelu" else ad.relu
        self._pre = cfg.norm == "pre"
        self._p = cfg.dropout

    def ffn(self, x):
        return self.fc2(self._act(self.fc1(x)))

    def __call__(self, x, disallowed, rng):
        drop = lambda t: ad.dropout(t, self._p, rng, self.training)  # noqa: E731
        if self._pre:
            x = x + drop(self.attn(self.ln1(x), disallowed))
            x = x + drop(self.ffn(self.ln2(x)))
        else:
            x = self.ln1(x + drop(self.attn(x, disallowed)))
            x = self.ln2(x + drop(self.ffn(x)))
        return x


class SodadeModel(Module):
    """Property-value transformer.

    Item embedding = property-ID embedding + (mask embedding if the value is
    hidden, else an affine projection of the value). Missing items are hidden
    the same way and are additionally removed from attention.
    """

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.config = cfg
        rng = np.random.default_rng(cfg.init_seed)
        d = cfg.d_model
        self.prop_embed = parameter(rng.normal(0, 0.02, (cfg.n_properties, d)).astype(dtype))
        self.type_embed = parameter(rng.normal(0, 0.02, (cfg.type_vocab, d)).astype(dtype))
        self.mask_embed = parameter(rng.normal(0, 0.02, (d,)).astype(dtype))
        self.value_proj = Linear(1, d, rng, std=0.02, dtype=dtype)
        if cfg.positional:
            self.pos_embed = parameter(rng.normal(0, 0.02, (cfg.seq_len, d)).astype(dtype))
        self.blocks = [Block(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d, dtype)
        self.head = Linear(d, cfg.n_properties, rng, dtype=dtype)
        self._dtype = dtype
        self._drop_rng = np.random.Generator(np.random.Philox(key=cfg.init_seed + 1))

    def reseed_dropout(self, seed):
        self._drop_rng = np.random.Generator(np.random.Philox(key=int(seed)))

    def embed(self, batch: MaskedBatch) -> Tensor:
        dt = self._dtype
        hidden = (batch.masked | batch.missing)
        vis = (~hidden).astype(dt)[..., None]
        vals = np.where(hidden, 0.0, batch.values).astype(dt)[..., None]
        items = ad.embedding(self.prop_embed, batch.prop_idx)
        items = items + self.value_proj(Tensor(vals)) * Tensor(vis) + ad.mul(self.mask_embed, Tensor(1.0 - vis))
        if self.config.use_type_token:
            tok = ad.embedding(self.type_embed, batch.type_token[:, None])
            x = ad.concat([tok, items], axis=1)
        else:
            x = items
        if self.config.positional:
            x = x + self.pos_embed
        return x

    def hidden(self, batch: MaskedBatch) -> Tensor:
        """Final-layer-norm output [B, L, d]."""
        disallowed = attention_disallowed(batch.missing, self.config.use_type_token)
        x = self.embed(batch)
        for blk in self.blocks:
            x = blk(x, disallowed, self._drop_rng)
        if self.config.norm == "pre":
            x = self.ln_f(x)
        return x

    def forward(self, batch: MaskedBatch) -> Tensor:
        """Per-position predictions of all properties, [B, L, n_properties]."""
        return self.head(self.hidden(batch))

    __call__ = forward

    def _offset(self):
        return 1 if self.config.use_type_token else 0

    def loss(self, batch: MaskedBatch) -> Tensor:
        return masked_loss(self.forward(batch), batch, self._offset())

    def predict_last(self, batch: MaskedBatch) -> np.ndarray:
        """Normalised prediction of the last item's own property, [B]."""
        with ad.no_grad():
            preds = self.forward(batch).data
        return preds[np.arange(len(batch)), -1, batch.prop_idx[:, -1]].astype(np.float64)

    def last_hidden(self, batch: MaskedBatch) -> Tensor:
        return self.hidden(batch)[:, -1, :]


def masked_loss(predictions: Tensor, batch: MaskedBatch, offset: int = 1) -> Tensor:
    """Mean squared error over masked items, reading each item's own property column."""
    B = len(batch)
    prop = np.concatenate([np.zeros((B, offset), dtype=np.int64), batch.prop_idx], axis=1)
    mask = np.concatenate([np.zeros((B, offset), dtype=bool), batch.masked], axis=1)
    target = np.concatenate([np.full((B, offset), np.nan), batch.target], axis=1)
    if not mask.any():
        raise ValueError("masked_loss: batch has no masked positions")
    selected = ad.take_last(predictions, prop)
    return ad.masked_mse(selected, target, mask)
