"""Low-rank adapters on named linear maps, plus their binary checkpoint format.

Checkpoint layout (little-endian)::

    magic    4 bytes  b"PRLA"
    version  uint32   1
    n_maps   uint32
    per map, in name order:
        name_len uint32, name utf-8 bytes
        r, d_in, d_out          uint32 x3
        alpha, dropout_p        float32 x2
        A                       r*d_in float32, row-major
        B                       d_out*r float32, row-major
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from persrep import errors

MAGIC = b"PRLA"
VERSION = 1


@dataclass(frozen=True)
class AdapterSpec:
    targets: Optional[tuple[str, ...]] = None  # None = every attention projection
    r: int = 16
    alpha: float = 0.5
    dropout_p: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.r < 1:
            raise errors.ConfigError("LoRA rank must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise errors.ConfigError("LoRA dropout must lie in [0, 1)")


class LoRALinear(nn.Module):
    """``y = W x + b + (alpha / r) * B (A drop(x))`` with ``W``, ``b`` frozen."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, dropout_p: float,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.r = r
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)
        self.generator: Optional[torch.Generator] = None  # dropout RNG, set by the trainer
        bound = 1.0 / math.sqrt(base.in_features)
        a = (torch.rand(r, base.in_features, generator=generator) * 2 - 1) * bound
        self.A = nn.Parameter(a.to(base.weight.dtype))
        self.B = nn.Parameter(torch.zeros(base.out_features, r, dtype=base.weight.dtype))

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta(self) -> torch.Tensor:
        return self.scaling * self.B @ self.A

    def _drop(self, x):
        if not self.training or self.dropout_p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= self.dropout_p
        return x * keep / (1.0 - self.dropout_p)

    def forward(self, x):
        return self.base(x) + self.scaling * (self._drop(x) @ self.A.T) @ self.B.T


def lora_forward(W, A, B, alpha: float, r: int, x, training: bool = False,
                 dropout_p: float = 0.0, rng_seed: int = 0, bias=None) -> np.ndarray:
    """Reference single-vector LoRA map; dropout (inverted) hits the adapter input only."""
    W, A, B, x = (np.asarray(v, dtype=np.float64) for v in (W, A, B, x))
    if A.shape != (r, W.shape[1]) or B.shape != (W.shape[0], r) or x.shape != (W.shape[1],):
        raise errors.ShapeMismatch(f"W {W.shape}, A {A.shape}, B {B.shape}, x {x.shape}, r={r}")
    xd = x
    if training and dropout_p > 0:
        keep = np.random.default_rng(rng_seed).random(x.shape) >= dropout_p
        xd = x * keep / (1.0 - dropout_p)
    out = W @ x + (alpha / r) * (B @ (A @ xd))
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out


def _resolve(module: nn.Module, name: str):
    parent = module
    parts = name.split(".")
    for p in parts[:-1]:
        if not hasattr(parent, p):
            return None, None
        parent = getattr(parent, p)
    return parent, parts[-1]


def inject_lora(module: nn.Module, spec: AdapterSpec, default_targets: list[str]) -> dict[str, LoRALinear]:
    """Replace the named ``nn.Linear`` children of ``module`` in place; freeze everything else."""
    targets = list(spec.targets) if spec.targets is not None else list(default_targets)
    named = dict(module.named_modules())
    for name in targets:
        if not isinstance(named.get(name), nn.Linear):
            raise errors.UnknownTargetMap(f"no linear map named {name!r}")
    for p in module.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(spec.seed)
    adapters = {}
    for name in targets:
        parent, attr = _resolve(module, name)
        lora = LoRALinear(getattr(parent, attr), spec.r, spec.alpha, spec.dropout_p, gen)
        setattr(parent, attr, lora)
        adapters[name] = lora
    return adapters


def adapter_digest(adapters: dict[str, LoRALinear]) -> str:
    h = hashlib.sha256()
    for name in sorted(adapters):
        m = adapters[name]
        h.update(name.encode())
        h.update(struct.pack("<Iff", m.r, m.alpha, m.dropout_p))
        h.update(m.A.detach().to(torch.float32).numpy().tobytes())
        h.update(m.B.detach().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


def save_adapters(adapters: dict[str, LoRALinear], path) -> Path:
    path = Path(path)
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(adapters))
    for name in sorted(adapters):
        m = adapters[name]
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        d_out, r = m.B.shape
        d_in = m.A.shape[1]
        buf += struct.pack("<IIIff", r, d_in, d_out, m.alpha, m.dropout_p)
        buf += m.A.detach().to(torch.float32).numpy().astype("<f4").tobytes()
        buf += m.B.detach().to(torch.float32).numpy().astype("<f4").tobytes()
    path.write_bytes(bytes(buf))
    return path


def read_adapter_file(path) -> dict[str, dict]:
    """Parse a checkpoint into ``{name: {r, alpha, dropout_p, A, B}}``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise errors.EncoderError(f"{path}: not a LoRA checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise errors.EncoderError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + ln].decode()
        off += ln
        r, d_in, d_out, alpha, dropout_p = struct.unpack_from("<IIIff", data, off)
        off += 20
        A = np.frombuffer(data, "<f4", r * d_in, off).reshape(r, d_in)
        off += 4 * r * d_in
        B = np.frombuffer(data, "<f4", d_out * r, off).reshape(d_out, r)
        off += 4 * d_out * r
        out[name] = {"r": r, "alpha": alpha, "dropout_p": dropout_p, "A": A.copy(), "B": B.copy()}
    return out
