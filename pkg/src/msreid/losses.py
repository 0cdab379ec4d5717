"""Training objectives.

Feature arguments are either [B, d] (one spectra) or [M, B, d]; every term is
computed per spectra and averaged over spectra. Contrastive terms compare
cosine similarities scaled by 1/temperature, so raw inputs are L2-normalized
here and any positive rescaling of them is a no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ConfigError

TERMS = ("id", "tri", "i2p", "i2t", "t2p", "p2t", "t2i")


@dataclass
class LossConfig:
    temperature: float = 0.07
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 0.9
    margin: float = 0.3
    alignment: str = "loop"  # loop: t2p + p2t; "i2t": i2t only; "i2t+t2i": symmetric instance alignment

    def validate(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0", field="loss.temperature")
        for name in ("lambda1", "lambda2", "lambda3", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", field=f"loss.{name}")
        if self.alignment not in ("loop", "i2t", "i2t+t2i"):
            raise ConfigError(f"unknown alignment variant {self.alignment!r}", field="loss.alignment")


@dataclass
class LossReport:
    id: float = 0.0
    tri: float = 0.0
    i2p: float = 0.0
    i2t: float = 0.0
    t2p: float = 0.0
    p2t: float = 0.0
    t2i: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _stack(x):
    return x.unsqueeze(0) if x.dim() == 2 else x


def _check_labels(labels, n_classes):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    return labels


def _contrast(anchors, keys, targets, temperature):
    """Mean over spectra and anchors of CE(anchors . keys^T / temperature, targets)."""
    a = F.normalize(_stack(anchors), dim=-1)
    k = F.normalize(_stack(keys), dim=-1)
    logits = a @ k.transpose(1, 2) / temperature
    m, n, c = logits.shape
    return F.cross_entropy(logits.reshape(m * n, c), targets.repeat(m))


def loss_i2t(v, prompts, labels, temperature=0.07):
    """Each instance against every identity prompt of its spectra."""
    labels = _check_labels(labels, _stack(prompts).shape[1])
    return _contrast(v, prompts, labels, temperature)


def loss_t2i(prompts, v, labels, temperature=0.07):
    """Each instance's identity prompt against all batch instances, the instance itself positive."""
    prompts, v = _stack(prompts), _stack(v)
    labels = _check_labels(labels, prompts.shape[1])
    targets = torch.arange(v.shape[1])
    return _contrast(prompts[:, labels], v, targets, temperature)


def loss_i2p(v, prototypes, labels, temperature=0.07):
    """Instances against all identity prototypes; prototypes are treated as constants."""
    labels = _check_labels(labels, _stack(prototypes).shape[1])
    return _contrast(v, prototypes.detach(), labels, temperature)


def _pair_ids(a, b, identities):
    a, b = _stack(a), _stack(b)
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"prompt/prototype shape mismatch: {tuple(a.shape[:2])} vs {tuple(b.shape[:2])}")
    if identities is None:
        identities = torch.arange(a.shape[1])
    return a, b, _check_labels(identities, a.shape[1])


def loss_t2p(prompts, prototypes, identities=None, temperature=0.07):
    """Prompt of identity c against all prototypes; gradient reaches prompts only."""
    prompts, prototypes, ids = _pair_ids(prompts, prototypes, identities)
    return _contrast(prompts[:, ids], prototypes.detach(), ids, temperature)


def loss_p2t(prototypes, prompts, identities=None, temperature=0.07):
    """Prototype of identity c against all prompts; gradient reaches prompts only."""
    prototypes, prompts, ids = _pair_ids(prototypes, prompts, identities)
    return _contrast(prototypes.detach()[:, ids], prompts, ids, temperature)


def loss_prompt(l_i2t, l_t2p, l_p2t, lambda1=0.1, lambda2=1.0):
    return lambda1 * l_i2t + lambda2 * (l_t2p + l_p2t)


def loss_id(logits, labels):
    """Hard-label cross-entropy; ``logits`` is [B, C], [M, B, C] or a list of [B, C]."""
    if isinstance(logits, (list, tuple)):
        logits = torch.stack(list(logits))
    logits = _stack(logits)
    m, b, c = logits.shape
    labels = _check_labels(labels, c)
    return F.cross_entropy(logits.reshape(m * b, c), labels.repeat(m))


def pairwise_distances(x):
    diff = x[:, :, None, :] - x[:, None, :, :]
    return diff.pow(2).sum(-1).clamp_min(1e-24).sqrt()


def loss_triplet(features, labels, margin=0.3, normalize=True):
    """Batch-hard triplet loss on Euclidean distances, averaged over anchors and spectra."""
    x = _stack(features)
    if normalize:
        x = F.normalize(x, dim=-1)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.unique().numel() < 2:
        raise ValueError("triplet loss needs at least two identities in the batch")
    dist = pairwise_distances(x)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos = same & ~eye
    if not pos.any(dim=1).all():
        raise ValueError("every anchor needs a positive: each identity must appear at least twice")
    d_p = dist.masked_fill(~pos, float("-inf")).amax(dim=-1)
    d_n = dist.masked_fill(same, float("inf")).amin(dim=-1)
    return F.relu(d_p - d_n + margin).mean()


def loss_final(l_id, l_tri, l_i2p, l_prompt, lambda3=0.9):
    return l_id + l_tri + lambda3 * l_i2p + l_prompt


def combine(parts, cfg):
    """Total objective from a dict of term values; absent terms count as zero.

    The instance-level t2i term (ablation variant only) shares lambda2 with the prototype loop.
    """
    zero = 0.0
    prompt = loss_prompt(parts.get("i2t", zero), parts.get("t2p", zero), parts.get("p2t", zero),
                         cfg.lambda1, cfg.lambda2) + cfg.lambda2 * parts.get("t2i", zero)
    return loss_final(parts["id"], parts["tri"], parts.get("i2p", zero), prompt, cfg.lambda3)
