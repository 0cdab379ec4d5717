"""Per-(identity, spectra) prototype memory bank with momentum refresh."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


class PrototypeBank:
    """Unit-norm centroids ``u`` of shape [N_id, M, d]; a buffer, never a parameter."""

    def __init__(self, n_ids, n_spectra, dim, alpha=0.9, dtype=torch.float32):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"momentum alpha must be in [0, 1], got {alpha}")
        self.alpha = float(alpha)
        self.u = torch.zeros(n_ids, n_spectra, dim, dtype=dtype)
        self.epoch = -1

    @property
    def n_ids(self):
        return self.u.shape[0]

    @property
    def n_spectra(self):
        return self.u.shape[1]

    def per_spectra(self):
        """View as [M, N_id, d], the layout the losses take."""
        return self.u.transpose(0, 1)

    @torch.no_grad()
    def set_from_features(self, features, labels, epoch=None):
        """Mean of each identity's features per spectra, renormalized.

        ``features`` is [S, M, d] for S samples; every identity must occur.
        """
        features = torch.as_tensor(features, dtype=self.u.dtype)
        labels = torch.as_tensor(labels, dtype=torch.long)
        counts = torch.bincount(labels, minlength=self.n_ids)
        if (counts == 0).any():
            missing = torch.nonzero(counts == 0).flatten().tolist()
            raise ValueError(f"identities without samples: {missing}")
        sums = torch.zeros_like(self.u).index_add_(0, labels, features)
        self.u = F.normalize(sums / counts[:, None, None].to(sums.dtype), dim=-1)
        if epoch is not None:
            self.epoch = int(epoch)
        return self

    @torch.no_grad()
    def momentum_update(self, c, m, v):
        if not (0 <= c < self.n_ids and 0 <= m < self.n_spectra):
            raise IndexError(f"prototype ({c}, {m}) out of range ({self.n_ids}, {self.n_spectra})")
        if self.alpha == 1.0:
            return self.u[c, m]
        v = torch.as_tensor(v, dtype=self.u.dtype).detach()
        mixed = self.alpha * self.u[c, m] + (1.0 - self.alpha) * v
        self.u[c, m] = F.normalize(mixed, dim=-1)
        return self.u[c, m]

    @torch.no_grad()
    def update_batch(self, features, labels):
        """One update per instance, in batch order. ``features`` is [M, B, d]."""
        features = features.detach()
        for j, c in enumerate(torch.as_tensor(labels).tolist()):
            for m in range(self.n_spectra):
                self.momentum_update(c, m, features[m, j])

    def state_dict(self):
        return {"u": self.u.clone(), "alpha": self.alpha, "epoch": self.epoch}

    def load_state_dict(self, state):
        self.u = state["u"].clone()
        self.alpha = float(state["alpha"])
        self.epoch = int(state["epoch"])


@torch.no_grad()
def extract_spectral_features(model, images, batch_size=64):
    """Eval-mode unit-norm features [S, M, d_e] for images [S, M, 3, H, W] (no augmentation)."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, images.shape[0], batch_size):
            chunk = torch.as_tensor(np.ascontiguousarray(images[start:start + batch_size]))
            per_m = [model.encode_spectral(chunk[:, m], name) for m, name in enumerate(model.spectra)]
            out.append(torch.stack(per_m, dim=1))
    finally:
        model.train(was_training)
    if not out:
        return torch.zeros(0, model.spectra.count, model.embed_dim)
    return torch.cat(out, dim=0)


def init_epoch(model, images, labels, n_ids, alpha=0.9, epoch=0, batch_size=64):
    """Build the bank for an epoch from un-augmented training images."""
    feats = extract_spectral_features(model, images, batch_size)
    bank = PrototypeBank(n_ids, model.spectra.count, model.embed_dim, alpha, dtype=feats.dtype)
    return bank.set_from_features(feats, labels, epoch)
