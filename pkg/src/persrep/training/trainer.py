"""Contrastive LoRA fine-tuning loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from persrep import errors
from persrep.dataset import ImageRecord, SyntheticPool
from persrep.encoder import AdapterSpec, Encoder, attach_adapter, global_feature_t
from persrep.imageops import resize_rgb

from .augment import AugmentParams, warp
from .losses import bce_batch, hinge_batch, info_nce_batch, multipos_batch
from .sampling import TrainConfig, sample_pair_indices

log = logging.getLogger(__name__)


def n_optimizer_steps(config: TrainConfig) -> int:
    """Epochs are concatenated into one sample stream, then cut into batches."""
    return math.ceil(config.epochs * config.n_pairs / config.batch_size)


@dataclass
class TrainResult:
    encoder: Encoder
    trace: list[float]
    head: Optional[nn.Module] = None
    steps: int = 0
    seeds: dict = field(default_factory=dict)


def adapter_spec(config: TrainConfig) -> AdapterSpec:
    return AdapterSpec(targets=config.lora_targets, r=config.lora_r, alpha=config.lora_alpha,
                       dropout_p=config.lora_dropout, seed=config.seed)


def _stack_images(records: Sequence[ImageRecord], size: int) -> torch.Tensor:
    arr = np.stack([resize_rgb(r.pixels, (size, size)) for r in records]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()  # 0..255


def train_personalized(
    encoder: Encoder,
    d_r: Sequence[ImageRecord],
    pool: SyntheticPool,
    config: TrainConfig,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Fine-tune the adapter of ``encoder`` on sampled (real anchor, synthetic positive,
    synthetic negatives) tuples. An encoder without adapters gets one attached first.
    Returns the adapted encoder and the per-step loss trace.
    """
    if not pool.positives:
        raise errors.EmptyPool("synthetic pool has no positives")
    if not encoder.is_adapted:
        encoder = attach_adapter(encoder, adapter_spec(config))
    size = encoder.descriptor.input_size
    idx = sample_pair_indices(len(d_r), len(pool.positives), len(pool.negatives), config, config.seed)

    anchors = _stack_images(d_r, size)
    positives = _stack_images(pool.positives, size)
    negatives = _stack_images(pool.negatives, size) if pool.negatives else anchors[:0]

    dropout_gen = torch.Generator().manual_seed(config.seed + 1)
    for m in encoder.adapters.values():
        m.generator = dropout_gen
    head = None
    params = encoder.trainable_parameters()
    if config.loss_kind == "cross_entropy":
        gen = torch.Generator().manual_seed(config.seed + 2)
        head = nn.Linear(2 * encoder.descriptor.dim, 1)
        with torch.no_grad():
            head.weight.copy_(torch.randn(head.weight.shape, generator=gen) * 0.01)
            head.bias.zero_()
        params = params + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)

    rng = np.random.default_rng([config.seed, 7])
    stream = np.concatenate([rng.permutation(config.n_pairs) for _ in range(config.epochs)])
    steps = n_optimizer_steps(config)
    k = config.n_neg_per_anchor
    trace: list[float] = []
    encoder.module.train()
    try:
        for step in range(steps):
            sel = stream[step * config.batch_size:(step + 1) * config.batch_size]
            b = len(sel)
            batch = torch.cat([anchors[idx.anchor[sel]], positives[idx.positive[sel]],
                               negatives[idx.negatives[sel].reshape(-1)]])
            if config.augment:
                arng = np.random.default_rng([config.seed, 11, step])
                batch = warp(batch, [AugmentParams.sample(arng) for _ in range(batch.shape[0])])
            cls, patches = encoder.forward(batch / 255.0 - 0.5)
            feats = global_feature_t(cls, patches)
            fa, fp, fn = feats[:b], feats[b:2 * b], feats[2 * b:].reshape(b, k, -1)
            loss = _batch_loss(config, fa, fp, fn, head)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise errors.NonFiniteLoss(f"non-finite loss at step {step}", trace + [value])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            trace.append(value)
            if on_step is not None:
                on_step(step, value)
    finally:
        encoder.module.eval()
        for m in encoder.adapters.values():
            m.generator = None
    return TrainResult(encoder, trace, head, steps, {"pairs": config.seed, "stream": [config.seed, 7],
                                                     "augment": [config.seed, 11], "dropout": config.seed + 1})


def _batch_loss(config: TrainConfig, fa, fp, fn, head):
    kind = config.loss_kind
    if kind == "infonce":
        return info_nce_batch(fa, fp, fn, config.temperature, config.include_positive_in_denominator)
    if kind == "infonce_multipos":
        # every synthetic positive in the batch depicts the same instance
        pos = fp.unsqueeze(0).expand(fa.shape[0], -1, -1)
        return multipos_batch(fa, pos, fn, config.temperature)
    if kind == "hinge":
        return hinge_batch(fa, fp.unsqueeze(1), fn, config.margin)
    return bce_batch(head, fp.unsqueeze(1), fn)
