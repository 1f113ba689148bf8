"""Transformer building blocks written against explicit boolean masks.

The stock library layers hide their masking conventions (and nn.Transformer
flavors change them between releases); the pipeline needs exact guarantees:
attention weight exactly 0.0 on masked keys, no NaN through fully-masked
rows, and positional encodings evaluated at arbitrary integer positions.
Hence the from-scratch versions here. Masks are always boolean with True
meaning "real" (keep), matching the rest of the package.

Post-norm residual wiring: x = LayerNorm(x + Dropout(sublayer(x))), dropout
after each sublayer before the residual add, p = 0.1 by default.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .errors import NonMonotoneIndicesError, ShapeError


def sinusoidal_position_encoding(positions, d_model, dtype=torch.float32):
    """Rows of the classic sin/cos table evaluated at the given integer
    positions (any values, not just 0..M-1).

    pe[k, 2i] = sin(p_k / 10000^(2i/d)), pe[k, 2i+1] = cos(same argument).
    Computed in float64 and cast at the end, so a row for position p is
    bit-identical no matter which other positions accompany it.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = np.arange(0, d_model, 2, dtype=np.float64)
    inv_freq = np.exp(half * (-math.log(10000.0) / d_model))
    args = pos[:, None] * inv_freq[None, :]
    pe = np.zeros((pos.shape[0], d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(args)
    pe[:, 1::2] = np.cos(args[:, : d_model // 2])
    return torch.as_tensor(pe, dtype=dtype)


def sampling_aware_pe(indices, d_model, dtype=torch.float32):
    """Positional encoding at the original frame indices of a subsampled
    sequence (instead of the canonical 0..M-1 ramp).

    Indices must be non-negative and strictly increasing, which is what
    subsample_frames produces.
    """
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError(f"indices must be a non-empty 1-d sequence, got shape {idx.shape}")
    if np.any(idx < 0) or np.any(np.diff(idx) <= 0):
        raise NonMonotoneIndicesError(
            "frame indices must be non-negative and strictly increasing")
    return sinusoidal_position_encoding(idx, d_model, dtype=dtype)


def masked_mean(x, mask, dim):
    """Mean over `dim` counting only mask=True positions; fully masked
    slices come out as zeros rather than NaN."""
    mask_f = mask.to(x.dtype)
    while mask_f.dim() < x.dim():
        mask_f = mask_f.unsqueeze(-1)
    total = (x * mask_f).sum(dim=dim)
    count = mask_f.sum(dim=dim)
    return total / count.clamp(min=1.0)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-key boolean masking.

    key_mask is (B, Lk) with True = attend. Masked keys get score -inf, so
    their softmax weight is exactly zero; batch rows whose keys are all
    masked yield zero attention output instead of NaN (their scores are
    zeroed before softmax and their weights after).
    """

    def __init__(self, d_model, n_heads):
        super().__init__()
        if d_model % n_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query, key, value, key_mask=None, need_weights=False):
        if query.dim() != 3 or key.dim() != 3 or value.dim() != 3:
            raise ShapeError("attention inputs must be (B, L, d_model)")
        bsz, q_len, _ = query.shape
        k_len = key.shape[1]
        q = self.q_proj(query).view(bsz, q_len, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(bsz, k_len, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(bsz, k_len, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        dead = None
        if key_mask is not None:
            if key_mask.shape != (bsz, k_len):
                raise ShapeError(f"key_mask {tuple(key_mask.shape)} != {(bsz, k_len)}")
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
            dead = ~key_mask.any(dim=1)
            if bool(dead.any()):
                scores = torch.where(dead[:, None, None, None],
                                     torch.zeros_like(scores), scores)
            else:
                dead = None
        weights = torch.softmax(scores, dim=-1)
        if dead is not None:
            weights = torch.where(dead[:, None, None, None],
                                  torch.zeros_like(weights), weights)
        out = (weights @ v).transpose(1, 2).reshape(bsz, q_len, self.d_model)
        out = self.out_proj(out)
        return (out, weights) if need_weights else (out, None)


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout_p):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.linear1 = nn.Linear(d_model, d_ff)
        self.linear2 = nn.Linear(d_ff, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout_p)

    def forward(self, x, key_mask=None):
        attn_out, _ = self.self_attn(x, x, x, key_mask=key_mask)
        x = self.norm1(x + self.dropout(attn_out))
        ff = self.linear2(torch.relu(self.linear1(x)))
        x = self.norm2(x + self.dropout(ff))
        return x


class TransformerEncoder(nn.Module):
    """A stack of identical encoder layers sharing one key mask."""

    def __init__(self, n_blocks, d_model, n_heads, d_ff, dropout_p):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, n_heads, d_ff, dropout_p) for _ in range(n_blocks))

    def forward(self, x, key_mask=None):
        for layer in self.layers:
            x = layer(x, key_mask=key_mask)
        return x


class DecoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout_p):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.linear1 = nn.Linear(d_model, d_ff)
        self.linear2 = nn.Linear(d_ff, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout_p)

    def forward(self, tgt, memory, memory_mask=None):
        sa, _ = self.self_attn(tgt, tgt, tgt)
        tgt = self.norm1(tgt + self.dropout(sa))
        ca, _ = self.cross_attn(tgt, memory, memory, key_mask=memory_mask)
        tgt = self.norm2(tgt + self.dropout(ca))
        ff = self.linear2(torch.relu(self.linear1(tgt)))
        tgt = self.norm3(tgt + self.dropout(ff))
        return tgt


class TransformerDecoder(nn.Module):
    def __init__(self, n_blocks, d_model, n_heads, d_ff, dropout_p):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, n_heads, d_ff, dropout_p) for _ in range(n_blocks))

    def forward(self, tgt, memory, memory_mask=None):
        for layer in self.layers:
            tgt = layer(tgt, memory, memory_mask=memory_mask)
        return tgt


def init_parameters(module, seed):
    """Seeded re-initialization: uniform fan-in bounds for affine/conv
    weights and biases, unit/zero for LayerNorm, fan-in-style uniform for
    embedding tables. Iterates in registration order, so a given module
    structure and seed always produce the same parameters."""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                fan_in = m.weight.shape[1]
                if m.weight.dim() > 2:
                    fan_in *= int(np.prod(m.weight.shape[2:]))
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.Embedding):
                bound = 1.0 / math.sqrt(m.embedding_dim)
                m.weight.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


def parameter_arrays(module):
    """Ordered (name, float numpy array) pairs for checkpointing."""
    return [(name, p.detach().cpu().numpy().copy())
            for name, p in module.named_parameters()]


def load_parameter_arrays(module, arrays):
    """Inverse of parameter_arrays; shape-checked, bit-exact."""
    from .errors import CheckpointError

    named = dict(module.named_parameters())
    if set(named) != set(arrays):
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        raise CheckpointError(f"parameter mismatch: missing {missing}, extra {extra}")
    with torch.no_grad():
        for name, param in named.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(f"{name}: shape {arr.shape} != {tuple(param.shape)}")
            param.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(param.dtype))
