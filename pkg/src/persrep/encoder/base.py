"""Encoder handles: a registry of backbones producing CLS + patch embeddings."""
from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from persrep import errors
from persrep.imageops import resize_rgb

from .lora import AdapterSpec, LoRALinear, adapter_digest, inject_lora, read_adapter_file, save_adapters
from .toy import ToyPatchEncoder


@dataclass(frozen=True)
class EncoderDescriptor:
    name: str
    input_size: int
    patch_size: int
    dim: int
    weights: str = "random"


@dataclass(frozen=True, eq=False)
class EmbeddingBundle:
    cls: np.ndarray          # (D,)
    patches: np.ndarray      # (h, w, D)
    patch_size: int
    source_dims: tuple[int, int]

    @property
    def dim(self) -> int:
        return self.cls.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.patches.shape[0], self.patches.shape[1]


def global_feature(bundle: EmbeddingBundle) -> np.ndarray:
    """``[cls, mean of all patch vectors]``, length 2D."""
    flat = bundle.patches.reshape(-1, bundle.patches.shape[-1])
    return np.concatenate([bundle.cls, flat.mean(axis=0)])


def global_feature_t(cls: torch.Tensor, patches: torch.Tensor) -> torch.Tensor:
    """Batched torch version of :func:`global_feature`."""
    return torch.cat([cls, patches.flatten(1, 2).mean(dim=1)], dim=-1)


class Encoder:
    """Wraps a backbone module; inference is deterministic (eval mode, no grad)."""

    def __init__(self, descriptor: EncoderDescriptor, module: nn.Module, fingerprint: str,
                 adapters: Optional[dict[str, LoRALinear]] = None,
                 default_targets: Sequence[str] = ()):
        self.descriptor = descriptor
        self.module = module.eval()
        if not adapters:
            # backbones are frozen; torch also picks its linear kernel by requires_grad,
            # so leaving them trainable would make base and zero-adapter outputs drift by an ulp
            for p in module.parameters():
                p.requires_grad_(False)
        self._fingerprint = fingerprint
        self.adapters = adapters or {}
        self.default_targets = list(default_targets)

    @property
    def is_adapted(self) -> bool:
        return bool(self.adapters)

    def fingerprint(self) -> str:
        if not self.adapters:
            return self._fingerprint
        return hashlib.sha256((self._fingerprint + adapter_digest(self.adapters)).encode()).hexdigest()

    def preprocess(self, pixels_list: Sequence[np.ndarray]) -> torch.Tensor:
        n = self.descriptor.input_size
        batch = np.stack([resize_rgb(p, (n, n)) for p in pixels_list]).astype(np.float32)
        return to_tensor(batch)

    def forward(self, x: torch.Tensor):
        return self.module(x)

    def embed_batch(self, pixels_list: Sequence[np.ndarray], batch_size: int = 64) -> list[EmbeddingBundle]:
        if len(pixels_list) == 0:
            return []
        self.module.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(pixels_list), batch_size):
                chunk = pixels_list[i:i + batch_size]
                cls, patches = self.module(self.preprocess(chunk))
                cls = cls.double().numpy()
                patches = patches.double().numpy()
                if not (np.isfinite(cls).all() and np.isfinite(patches).all()):
                    raise errors.NonFiniteOutput(f"{self.descriptor.name} produced non-finite embeddings")
                for j, px in enumerate(chunk):
                    out.append(EmbeddingBundle(cls[j], patches[j], self.descriptor.patch_size,
                                               tuple(np.asarray(px).shape[:2])))
        return out

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.module.parameters() if p.requires_grad]

    def base_parameters(self) -> list[nn.Parameter]:
        adapter_ids = {id(p) for m in self.adapters.values() for p in (m.A, m.B)}
        return [p for p in self.module.parameters() if id(p) not in adapter_ids]

    def save_adapter(self, path) -> Path:
        if not self.adapters:
            raise errors.EncoderError("encoder carries no adapter")
        return save_adapters(self.adapters, path)


def to_tensor(batch_uint8: np.ndarray) -> torch.Tensor:
    """(B, H, W, 3) 8-bit -> (B, 3, H, W) float32 centred on zero."""
    x = torch.from_numpy(np.ascontiguousarray(batch_uint8, dtype=np.float32))
    return (x / 255.0 - 0.5).permute(0, 3, 1, 2).contiguous()


def embed(encoder: Encoder, image) -> EmbeddingBundle:
    pixels = getattr(image, "pixels", image)
    if np.asarray(pixels).size == 0:
        raise errors.ShapeMismatch("cannot embed an empty image")
    return encoder.embed_batch([pixels])[0]


# -- registry ---------------------------------------------------------------

_REGISTRY: dict[str, Callable[[], Encoder]] = {}


def register_encoder(name: str, factory: Callable[[], Encoder]) -> None:
    _REGISTRY[name] = factory


def available_encoders() -> list[str]:
    return sorted(_REGISTRY)


def load_encoder(name: str) -> Encoder:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise errors.EncoderUnavailable(f"unknown encoder {name!r}; known: {available_encoders()}") from None
    return factory()


def make_toy_encoder(seed: int = 0, input_size: int = 64, patch_size: int = 8, dim: int = 32,
                     depth: int = 2) -> Encoder:
    module = ToyPatchEncoder(input_size, patch_size, dim, depth, seed)
    desc = EncoderDescriptor("toy", input_size, patch_size, dim, f"random:seed={seed}")
    fp = hashlib.sha256(f"toy:{seed}:{input_size}:{patch_size}:{dim}:{depth}".encode()).hexdigest()
    return Encoder(desc, module, fp, default_targets=module.adapter_target_names())


def _unavailable(name):
    def factory():
        raise errors.EncoderUnavailable(
            f"{name} weights are not bundled; register a loader with register_encoder({name!r}, ...)")
    return factory


register_encoder("toy", make_toy_encoder)
for _name in ("dinov2_vitb14", "clip_vitb16", "mae_vitb16"):
    register_encoder(_name, _unavailable(_name))


def attach_adapter(encoder: Encoder, spec: AdapterSpec = AdapterSpec()) -> Encoder:
    """Copy ``encoder`` and put LoRA adapters on the requested linear maps.

    Only adapter matrices are trainable afterwards; ``B`` starts at zero so the
    adapted encoder initially reproduces the base embeddings exactly.
    """
    module = copy.deepcopy(encoder.module)
    adapters = inject_lora(module, spec, encoder.default_targets)
    return Encoder(encoder.descriptor, module, encoder.fingerprint(), adapters, encoder.default_targets)


def load_adapter(encoder: Encoder, path) -> Encoder:
    """Attach adapters stored in a checkpoint written by :meth:`Encoder.save_adapter`."""
    entries = read_adapter_file(path)
    first = next(iter(entries.values()))
    spec = AdapterSpec(targets=tuple(sorted(entries)), r=first["r"], alpha=first["alpha"],
                       dropout_p=first["dropout_p"])
    adapted = attach_adapter(encoder, spec)
    with torch.no_grad():
        for name, e in entries.items():
            adapted.adapters[name].A.copy_(torch.from_numpy(e["A"]))
            adapted.adapters[name].B.copy_(torch.from_numpy(e["B"]))
    return adapted


# -- embedding cache --------------------------------------------------------

class EmbeddingCache:
    """On-disk cache of bundles keyed by encoder fingerprint and image digest."""

    def __init__(self, root=None):
        root = root or os.environ.get("PERSREP_CACHE_DIR")
        self.root = Path(root) if root else None

    def _path(self, encoder: Encoder, digest: str) -> Optional[Path]:
        if self.root is None:
            return None
        return self.root / encoder.fingerprint()[:16] / f"{digest}.npz"

    def embed_records(self, encoder: Encoder, records) -> list[EmbeddingBundle]:
        records = list(records)
        out: list[Optional[EmbeddingBundle]] = [None] * len(records)
        missing = []
        for i, rec in enumerate(records):
            path = self._path(encoder, rec.digest())
            if path is not None and path.exists():
                with np.load(path) as z:
                    out[i] = EmbeddingBundle(z["cls"], z["patches"], int(z["patch_size"]),
                                             tuple(int(v) for v in z["source_dims"]))
            else:
                missing.append(i)
        fresh = encoder.embed_batch([records[i].pixels for i in missing])
        for i, b in zip(missing, fresh):
            out[i] = b
            path = self._path(encoder, records[i].digest())
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                np.savez(path, cls=b.cls, patches=b.patches, patch_size=b.patch_size,
                         source_dims=np.array(b.source_dims))
        return out
