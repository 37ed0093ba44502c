"""Tiny causal transformer with frozen base weights and trainable
low-rank adapters on every projection.

The base model is deliberately small: data-format and scoring-protocol
conformance are the contract, not language quality. Adapter updates
follow the usual low-rank parameterization W + (alpha/r) * B @ A with A
Gaussian-initialized and B zero, so an untrained adapter leaves the base
function unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 1024
    rank: int = 8
    alpha: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank update."""

    def __init__(self, in_features: int, out_features: int, rank: int,
                 alpha: int):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.base.weight.requires_grad_(False)
        self.base.bias.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.empty(rank, in_features))
        self.lora_b = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.normal_(self.lora_a, std=1.0 / math.sqrt(in_features))
        self.scale = alpha / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * (x @ self.lora_a.T @ self.lora_b.T)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.n_heads = cfg.n_heads
        self.qkv = LoRALinear(cfg.d_model, 3 * cfg.d_model, cfg.rank, cfg.alpha)
        self.proj = LoRALinear(cfg.d_model, cfg.d_model, cfg.rank, cfg.alpha)
        self.mlp_up = LoRALinear(cfg.d_model, 4 * cfg.d_model, cfg.rank,
                                 cfg.alpha)
        self.mlp_down = LoRALinear(4 * cfg.d_model, cfg.d_model, cfg.rank,
                                   cfg.alpha)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=-1)
        shape = (b, t, self.n_heads, d // self.n_heads)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        attn = torch.nn.functional.scaled_dot_product_attention(
            q, k, v, is_causal=True)
        attn = attn.transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(attn)
        h = self.ln2(x)
        x = x + self.mlp_down(torch.nn.functional.gelu(self.mlp_up(h)))
        return x


class TinyCausalLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = LoRALinear(cfg.d_model, cfg.vocab_size, cfg.rank,
                               cfg.alpha)
        # embeddings, norms, and base projections stay frozen; only the
        # low-rank factors train
        for name, p in self.named_parameters():
            if "lora_" not in name:
                p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        b, t = ids.shape
        if t > self.cfg.max_len:
            raise ValueError(
                f"sequence of {t} tokens exceeds max length {self.cfg.max_len}")
        pos = torch.arange(t, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    @torch.no_grad()
    def token_logprobs(self, ids: list[int]) -> list[float]:
        """Log-probability of each token given its prefix; the first
        token, having no prefix distribution, is reported as nan."""
        self.eval()
        t = torch.tensor([ids], dtype=torch.long)
        logits = self.forward(t)[0]
        logps = torch.log_softmax(logits.float(), dim=-1)
        out = [float("nan")]
        for i in range(1, len(ids)):
            out.append(float(logps[i - 1, ids[i]]))
        return out

    @torch.no_grad()
    def greedy_next(self, ids: list[int]) -> int:
        self.eval()
        t = torch.tensor([ids], dtype=torch.long)
        logits = self.forward(t)[0, -1]
        return int(torch.argmax(logits))
