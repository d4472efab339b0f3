"""A tiny patch encoder with frozen random weights, used as the desk-scale backbone.

Each 8x8 patch is projected to D dimensions and refined by token-wise residual
MLP blocks, so a patch vector only ever sees its own pixels. A single
class-attention block then pools the patches into the CLS token (the CLS
query attends over CLS and patch keys; patches are not updated by it).
There is no positional embedding, so a constant-colour image yields identical
patch tokens everywhere.
"""
from __future__ import annotations

import math

import torch
from torch import nn


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(nn.functional.gelu(self.fc1(x)))


class LocalBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, 2 * dim)

    def forward(self, x):
        return x + self.mlp(self.norm(x))


class ClassAttention(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, cls, tokens):
        """``cls`` (B, 1, D) queries ``tokens`` (B, N, D)."""
        out = nn.functional.scaled_dot_product_attention(self.q(cls), self.k(tokens), self.v(tokens))
        return self.proj(out)


class ClassBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = ClassAttention(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, 2 * dim)

    def forward(self, cls, patches):
        z = self.norm1(torch.cat([cls, patches], dim=1))
        cls = cls + self.attn(z[:, :1], z)
        return cls + self.mlp(self.norm2(cls))


class ToyPatchEncoder(nn.Module):
    def __init__(self, input_size: int = 64, patch_size: int = 8, dim: int = 32,
                 depth: int = 2, seed: int = 0):
        super().__init__()
        self.input_size = input_size
        self.patch_size = patch_size
        self.dim = dim
        self.patch_embed = nn.Linear(3 * patch_size * patch_size, dim)
        self.blocks = nn.ModuleList(LocalBlock(dim) for _ in range(depth))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.cls_block = ClassBlock(dim)
        self.norm = nn.LayerNorm(dim)
        self._init_weights(seed)

    @torch.no_grad()
    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) / math.sqrt(mod.in_features))
                mod.bias.copy_(0.02 * torch.randn(mod.bias.shape, generator=gen))
        self.cls_token.copy_(torch.randn(self.cls_token.shape, generator=gen))

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, h*w, 3*p*p), row-major over patch cells."""
        p = self.patch_size
        b = x.shape[0]
        x = x.unfold(2, p, p).unfold(3, p, p)  # b, c, h, w, p, p
        h, w = x.shape[2], x.shape[3]
        return x.permute(0, 2, 3, 1, 4, 5).reshape(b, h * w, -1)

    def forward(self, x: torch.Tensor):
        """Return ``(cls, patches)`` with shapes (B, D) and (B, h, w, D)."""
        p = self.patch_size
        b, _, H, W = x.shape
        pad_h, pad_w = (-H) % p, (-W) % p
        if pad_h or pad_w:
            x = nn.functional.pad(x, (0, pad_w, 0, pad_h))
        h, w = x.shape[2] // p, x.shape[3] // p
        tokens = self.patch_embed(self.patchify(x))
        for blk in self.blocks:
            tokens = blk(tokens)
        cls = self.cls_block(self.cls_token.expand(b, -1, -1), tokens)
        out = self.norm(torch.cat([cls, tokens], dim=1))
        return out[:, 0], out[:, 1:].reshape(b, h, w, self.dim)

    def adapter_target_names(self) -> list[str]:
        """Default LoRA targets: the class-attention q/k/v maps and every patch MLP."""
        names = [f"cls_block.attn.{n}" for n in ("q", "k", "v")]
        names += [f"blocks.{i}.mlp.{n}" for i in range(len(self.blocks)) for n in ("fc1", "fc2")]
        return names
