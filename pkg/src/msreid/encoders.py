"""Spectral visual encoder, prompt-driven text encoder and the trainable-parameter policy.

The visual backbone is one frozen transformer shared by every spectra; spectra
specific behaviour comes from the adapter set selected by name. Each spectra
has its own BNNeck and identity classifier, the image-text projection is shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapter import AdapterConfig, adapter_forward, adapter_key, build_adapters
from .errors import ConfigError

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class VisualBackboneConfig:
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: int = 4

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"backbone {f.name} must be positive", field=f"model.backbone.{f.name}")
        if self.dim % self.heads:
            raise ConfigError(f"backbone dim {self.dim} not divisible by heads {self.heads}",
                              field="model.backbone.heads")
        if self.embed_dim > self.dim:
            raise ConfigError(f"embed_dim {self.embed_dim} exceeds backbone dim {self.dim}",
                              field="model.backbone.embed_dim")


@dataclass
class TextEncoderConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4

    def validate(self):
        if self.dim % self.heads:
            raise ConfigError(f"text dim {self.dim} not divisible by heads {self.heads}", field="model.text.heads")


@dataclass
class ModelConfig:
    backbone: VisualBackboneConfig = field(default_factory=VisualBackboneConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    prompt_tokens: int = 4
    prompt_init_std: float = 0.02

    def validate(self):
        self.backbone.validate()
        self.text.validate()
        self.adapter.validate(self.backbone.dim)
        if self.prompt_tokens < 1:
            raise ConfigError("prompt_tokens must be >= 1", field="model.prompt_tokens")


@dataclass
class FreezePolicy:
    """Which parameter groups train; every parameter outside these groups is frozen."""

    prompts: bool = True
    adapters: bool = True
    classifier: bool = True
    norm: bool = True
    projection: bool = True


GROUP_PREFIXES = {
    "adapters": "adapters.",
    "prompts": "prompts.",
    "classifier": "classifiers.",
    "norm": "bnneck.",
    "projection": "projection.",
}


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        if mask is not None:
            att = att.masked_fill(mask, float("-inf"))
        out = att.softmax(dim=-1) @ v
        return self.out(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def ffn(self, x):
        return self.mlp(self.ln_2(x))

    def forward(self, x, adapter=None, scale=0.0, mask=None):
        x = x + self.attn(self.ln_1(x), mask)
        return adapter_forward(x, adapter, self.ffn, self.ln_2, scale)


class VisionTransformer(nn.Module):
    def __init__(self, cfg, image_size):
        super().__init__()
        h, w = image_size
        if h % cfg.patch or w % cfg.patch:
            raise ConfigError(f"image size {image_size} not divisible by patch {cfg.patch}",
                              field="model.backbone.patch")
        n_patches = (h // cfg.patch) * (w // cfg.patch)
        self.image_size = (h, w)
        self.patch_embed = nn.Conv2d(3, cfg.dim, cfg.patch, cfg.patch, bias=False)
        self.cls_token = nn.Parameter(torch.randn(cfg.dim) * cfg.dim ** -0.5)
        self.pos_embed = nn.Parameter(torch.randn(n_patches + 1, cfg.dim) * 0.02)
        self.ln_pre = nn.LayerNorm(cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_post = nn.LayerNorm(cfg.dim)

    def forward(self, x, adapters=None, scale=0.0):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = self.ln_pre(torch.cat([cls, x], dim=1) + self.pos_embed)
        for i, blk in enumerate(self.blocks):
            x = blk(x, None if adapters is None else adapters[i], scale)
        return self.ln_post(x[:, 0])


class TextEncoder(nn.Module):
    """Frozen text transformer over "a photo of a [X]_1 ... [X]_k [CLS]".

    Reads out the final (class-name) position, which sees the whole sequence under the causal mask.
    """

    vocab = ("a", "photo", "of", "person", "vehicle")
    template = ("a", "photo", "of", "a")

    def __init__(self, cfg, n_slots, out_dim, class_name="person"):
        super().__init__()
        if class_name not in self.vocab[3:]:
            raise ConfigError(f"class name must be person|vehicle, got {class_name!r}", field="data.object_class")
        self.n_slots = n_slots
        self.token_embedding = nn.Embedding(len(self.vocab), cfg.dim)
        self.pos_embed = nn.Parameter(torch.randn(self.seq_len, cfg.dim) * 0.01)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_final = nn.LayerNorm(cfg.dim)
        self.projection = nn.Linear(cfg.dim, out_dim, bias=False)
        self.register_buffer("prefix_ids", torch.tensor([self.vocab.index(t) for t in self.template]),
                             persistent=False)
        self.register_buffer("class_id", torch.tensor([self.vocab.index(class_name)]), persistent=False)

    @property
    def seq_len(self):
        return len(self.template) + self.n_slots + 1

    def forward(self, slots):
        k = slots.shape[0]
        prefix = self.token_embedding(self.prefix_ids).expand(k, -1, -1)
        suffix = self.token_embedding(self.class_id).expand(k, -1, -1)
        x = torch.cat([prefix.to(slots.dtype), slots, suffix.to(slots.dtype)], dim=1) + self.pos_embed
        n = x.shape[1]
        mask = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.projection(self.ln_final(x[:, -1]))


class PromptBank(nn.Module):
    """Learnable slot tokens, one sequence per (training identity, spectra)."""

    def __init__(self, n_ids, n_spectra, n_tokens, dim, init_std=0.02):
        super().__init__()
        self.tokens = nn.Parameter(torch.randn(n_ids, n_spectra, n_tokens, dim) * init_std)

    @property
    def n_ids(self):
        return self.tokens.shape[0]


class MultiSpectralReID(nn.Module):
    def __init__(self, cfg, n_ids, spectra, image_size, object_class="person", use_adapters=True,
                 use_prompts=True):
        super().__init__()
        cfg.validate()
        bcfg = cfg.backbone
        self.cfg = cfg
        self.spectra = spectra
        self.n_ids = n_ids
        self.object_class = object_class
        self.backbone = VisionTransformer(bcfg, image_size)
        self.adapter_cfg = cfg.adapter.resolve(bcfg.dim, object_class) if use_adapters else None
        self.adapters = (build_adapters(self.adapter_cfg, bcfg.dim, bcfg.depth, spectra.names)
                         if use_adapters else None)
        self.bnneck = nn.ModuleDict({m: nn.BatchNorm1d(bcfg.dim) for m in spectra})
        self.projection = nn.Linear(bcfg.dim, bcfg.embed_dim, bias=False)
        self.classifiers = nn.ModuleDict({m: nn.Linear(bcfg.embed_dim, n_ids, bias=False) for m in spectra})
        if use_prompts:
            self.text = TextEncoder(cfg.text, cfg.prompt_tokens, bcfg.embed_dim, object_class)
            self.prompts = PromptBank(n_ids, spectra.count, cfg.prompt_tokens, cfg.text.dim, cfg.prompt_init_std)
        else:
            self.text = None
            self.prompts = None

    @property
    def embed_dim(self):
        return self.cfg.backbone.embed_dim

    def _adapters_for(self, spectra_name):
        self.spectra.index(spectra_name)
        if self.adapters is None:
            return None
        return self.adapters[adapter_key(self.adapter_cfg, spectra_name)]

    def forward_spectra(self, images, spectra_name):
        """Projected (un-normalized) embedding and identity logits for one spectra."""
        adapters = self._adapters_for(spectra_name)
        scale = self.adapter_cfg.scale if self.adapter_cfg is not None else 0.0
        x = (images - PIXEL_MEAN) / PIXEL_STD
        x = self.backbone(x, adapters, scale)
        z = self.projection(self.bnneck[spectra_name](x))
        return z, self.classifiers[spectra_name](z)

    def encode_spectral(self, images, spectra_name, train_mode=None):
        if train_mode is not None:
            self.train(train_mode)
        z, _ = self.forward_spectra(images, spectra_name)
        return F.normalize(z, dim=-1)

    def encode_prompts(self, identities=None):
        """Unit-norm prompt features [M, K, d_e] for ``identities`` (default all)."""
        if self.prompts is None:
            raise ConfigError("model was built without prompts", field="components.al")
        tokens = self.prompts.tokens
        if identities is not None:
            identities = torch.as_tensor(identities, dtype=torch.long)
            if identities.numel() and (identities.min() < 0 or identities.max() >= self.n_ids):
                raise IndexError(f"prompt identity out of range [0, {self.n_ids})")
            tokens = tokens[identities]
        k, m, t, d = tokens.shape
        feats = self.text(tokens.transpose(0, 1).reshape(m * k, t, d))
        return F.normalize(feats, dim=-1).reshape(m, k, -1)

    def encode_prompt(self, identity, spectra_name):
        if not 0 <= int(identity) < self.n_ids:
            raise IndexError(f"identity {identity} out of range; prompts exist only for {self.n_ids} training ids")
        m = self.spectra.index(spectra_name)
        return self.encode_prompts([int(identity)])[m, 0]


def parameter_group(name):
    for group, prefix in GROUP_PREFIXES.items():
        if name.startswith(prefix):
            return group
    return None


def apply_freeze_policy(model, policy):
    for name, p in model.named_parameters():
        group = parameter_group(name)
        p.requires_grad_(group is not None and getattr(policy, group))
    return model


def trainable_parameters(model, policy):
    """Apply ``policy`` and return (trainable parameters, per-group counts with total)."""
    apply_freeze_policy(model, policy)
    report = {g: 0 for g in GROUP_PREFIXES}
    params = []
    for name, p in model.named_parameters():
        if p.requires_grad:
            params.append(p)
            report[parameter_group(name)] += p.numel()
    report["total"] = sum(report[g] for g in GROUP_PREFIXES)
    return params, report


def frozen_named_parameters(model):
    return [(n, p) for n, p in model.named_parameters() if not p.requires_grad]
