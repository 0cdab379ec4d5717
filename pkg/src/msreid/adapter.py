"""Low-rank bottleneck adapter running parallel to a transformer block's feed-forward network."""

from __future__ import annotations

from dataclasses import dataclass

import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

DEFAULT_SCALE = {"person": 0.5, "vehicle": 0.3}


@dataclass
class AdapterConfig:
    hidden_dim: int | None = None  # None -> d // 2
    scale: float | None = None  # None -> per object class default
    mode: str = "per-spectra"

    def resolve(self, d, object_class="person"):
        hidden = self.hidden_dim if self.hidden_dim is not None else max(1, d // 2)
        scale = self.scale if self.scale is not None else DEFAULT_SCALE[object_class]
        cfg = AdapterConfig(hidden, scale, self.mode)
        cfg.validate(d)
        return cfg

    def validate(self, d=None):
        if self.mode not in ("per-spectra", "shared"):
            raise ConfigError(f"adapter mode must be per-spectra|shared, got {self.mode!r}", field="model.adapter.mode")
        if self.hidden_dim is not None and (self.hidden_dim < 1 or (d is not None and self.hidden_dim > d)):
            raise ConfigError(f"adapter hidden_dim must be in [1, {d}], got {self.hidden_dim}",
                              field="model.adapter.hidden_dim")
        if self.scale is not None and self.scale < 0:
            raise ConfigError(f"adapter scale must be >= 0, got {self.scale}", field="model.adapter.scale")


class Adapter(nn.Module):
    """Down-projection, ReLU, up-projection; both projections carry biases."""

    def __init__(self, dim, hidden_dim):
        super().__init__()
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.down = nn.Linear(dim, hidden_dim)
        self.up = nn.Linear(hidden_dim, dim)

    def branch(self, x):
        return self.up(F.relu(self.down(x)))


def adapter_forward(v, adapter, ffn, ln, scale):
    """s * ReLU(LN(v) W_down) W_up + FFN(v) + v.

    ``ffn`` is the block's feed-forward callable (including its own pre-norm),
    ``ln`` the normalization feeding the adapter branch. ``adapter=None`` gives
    the unmodified block.
    """
    if adapter is not None and v.shape[-1] != adapter.dim:
        raise ValueError(f"adapter expects input dim {adapter.dim}, got {v.shape[-1]}")
    base = ffn(v)
    if adapter is None:
        return base + v
    return scale * adapter.branch(ln(v)) + base + v


def adapter_param_count(cfg, d, n_blocks, n_spectra):
    copies = 1 if cfg.mode == "shared" else n_spectra
    hidden = cfg.hidden_dim if cfg.hidden_dim is not None else max(1, d // 2)
    return copies * n_blocks * (2 * d * hidden + hidden + d)


def build_adapters(cfg, d, n_blocks, spectra):
    """ModuleDict keyed by adapter-set name; shared mode has the single key "shared"."""
    def stack():
        return nn.ModuleList(Adapter(d, cfg.hidden_dim) for _ in range(n_blocks))

    if cfg.mode == "shared":
        return nn.ModuleDict({"shared": stack()})
    return nn.ModuleDict({name: stack() for name in spectra})


def adapter_key(cfg, spectra_name):
    return "shared" if cfg.mode == "shared" else spectra_name

