"""Contrastive and non-contrastive losses over feature vectors.

All functions accept numpy arrays or torch tensors and return a scalar torch
tensor (float64 for numpy input) so gradients flow to whatever produced the
features.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from persrep import errors

LOSS_KINDS = ("infonce", "infonce_multipos", "hinge", "cross_entropy")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _stack(xs, like: torch.Tensor) -> torch.Tensor:
    if isinstance(xs, torch.Tensor):
        return xs
    xs = list(xs)
    if not xs:
        return like.new_zeros((0, like.shape[-1]))
    return torch.stack([_t(v).to(like.dtype) for v in xs])


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis, broadcasting ``a`` against ``b``."""
    return F.cosine_similarity(a, b, dim=-1, eps=1e-12)


def _check(anchor: torch.Tensor, *others: torch.Tensor) -> None:
    for o in others:
        if o.numel() and o.shape[-1] != anchor.shape[-1]:
            raise errors.DimensionMismatch(f"feature length {o.shape[-1]} vs anchor {anchor.shape[-1]}")


def info_nce_batch(anchor: torch.Tensor, pos: torch.Tensor, negs: torch.Tensor, tau: float,
                   include_positive: bool = True) -> torch.Tensor:
    """Mean InfoNCE over a batch: anchor (B,F), pos (B,F), negs (B,N,F)."""
    if tau <= 0:
        raise errors.NonPositiveTemperature(f"temperature must be > 0, got {tau}")
    _check(anchor, pos, negs)
    s_pos = _cos(anchor, pos) / tau                      # (B,)
    s_neg = _cos(anchor.unsqueeze(1), negs) / tau        # (B,N)
    if include_positive:
        denom = torch.logsumexp(torch.cat([s_pos.unsqueeze(1), s_neg], dim=1), dim=1)
    else:
        denom = torch.logsumexp(s_neg, dim=1)
    return (denom - s_pos).mean()


def info_nce(anchor_f, pos_f, neg_fs, tau: float = 0.07, include_positive: bool = True) -> torch.Tensor:
    """``-log(exp(s+/tau) / (exp(s+/tau) + sum_i exp(s_i/tau)))`` with cosine similarities."""
    a = _t(anchor_f)
    p = _t(pos_f).to(a.dtype)
    n = _stack(neg_fs, a)
    if p.shape != a.shape:
        raise errors.DimensionMismatch(f"positive {tuple(p.shape)} vs anchor {tuple(a.shape)}")
    return info_nce_batch(a[None], p[None], n[None], tau, include_positive)


def multipos_batch(anchor, pos, negs, tau):
    """anchor (B,F), pos (B,P,F), negs (B,N,F)."""
    if tau <= 0:
        raise errors.NonPositiveTemperature(f"temperature must be > 0, got {tau}")
    s_pos = _cos(anchor.unsqueeze(1), pos) / tau
    s_neg = _cos(anchor.unsqueeze(1), negs) / tau
    every = torch.logsumexp(torch.cat([s_pos, s_neg], dim=1), dim=1)
    return (every - torch.logsumexp(s_pos, dim=1)).mean()


def hinge_batch(anchor, pos, negs, margin):
    s_pos = _cos(anchor.unsqueeze(1), pos)               # (B,P)
    s_neg = _cos(anchor.unsqueeze(1), negs)              # (B,N)
    gaps = margin - s_pos.unsqueeze(2) + s_neg.unsqueeze(1)
    return F.relu(gaps).mean()


def bce_batch(head, pos, negs):
    """Binary cross-entropy of ``sigmoid(head(f))``: positives -> 1, negatives -> 0."""
    feats = torch.cat([pos.reshape(-1, pos.shape[-1]), negs.reshape(-1, negs.shape[-1])])
    labels = torch.cat([feats.new_ones(pos.shape[:-1].numel()), feats.new_zeros(negs.shape[:-1].numel())])
    logits = head(feats).reshape(-1)
    return F.binary_cross_entropy_with_logits(logits, labels)


def alt_loss(kind: str, anchor_f, pos_fs, neg_fs, params=None, head: Optional[torch.nn.Module] = None):
    """Loss ablation menu: ``infonce``, ``infonce_multipos``, ``hinge`` or ``cross_entropy``.

    ``params`` supplies ``temperature`` and ``margin`` (a TrainConfig works).
    The cross-entropy head is a linear map to one logit; the sigmoid is applied
    inside the loss.
    """
    tau = getattr(params, "temperature", 0.07)
    margin = getattr(params, "margin", 0.2)
    a = _t(anchor_f)
    p = _stack(pos_fs, a)
    n = _stack(neg_fs, a)
    _check(a, p, n)
    if kind in ("infonce_multipos", "hinge", "infonce") and p.shape[0] == 0:
        raise errors.EmptyPositives(f"{kind} needs at least one positive")
    if kind == "infonce":
        include = getattr(params, "include_positive_in_denominator", True)
        return info_nce_batch(a[None], p[:1], n[None], tau, include)
    if kind == "infonce_multipos":
        return multipos_batch(a[None], p[None], n[None], tau)
    if kind == "hinge":
        return hinge_batch(a[None], p[None], n[None], margin)
    if kind == "cross_entropy":
        if head is None:
            raise errors.MissingHead("cross_entropy loss needs a linear head")
        if p.shape[0] == 0 and n.shape[0] == 0:
            raise errors.EmptyPositives("cross_entropy needs at least one labelled feature")
        return bce_batch(head, p, n)
    raise errors.ConfigError(f"unknown loss kind {kind!r}")
