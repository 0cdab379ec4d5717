"""End-to-end training loop: per-epoch prototype initialization, per-iteration joint update."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import SamplerConfig, augment, pk_sample_batch
from .encoders import FreezePolicy, MultiSpectralReID, trainable_parameters
from .errors import CheckpointMismatchError, ConfigError, NonFiniteLossError
from .losses import (LossReport, combine, loss_i2p, loss_i2t, loss_id, loss_p2t, loss_t2i, loss_t2p,
                     loss_triplet)
from .prototypes import PrototypeBank, init_epoch

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class ComponentFlags:
    """Ablation switches: identity prototypes + image-prototype loss, prompt alignment, adapters."""

    sic: bool = True
    al: bool = True
    adapter: bool = True

    def key(self):
        return (self.sic, self.al, self.adapter)


@dataclass
class TrainConfig:
    epochs: int = 120
    warmup_epochs: int = 10
    base_lr: float = 3.5e-4
    decay_epochs: tuple = (30, 50)
    decay_lrs: tuple = (3.5e-5, 3.5e-6)
    weight_decay: float = 5e-4
    betas: tuple = (0.9, 0.999)
    P: int = 16
    N: int = 4
    alpha: float = 0.9
    max_iterations_per_epoch: int | None = None
    checkpoint_every: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", field="train.epochs")
        if len(self.decay_epochs) != len(self.decay_lrs):
            raise ConfigError("decay_epochs and decay_lrs must have equal length", field="train.decay_lrs")
        milestones = [self.warmup_epochs, *self.decay_epochs]
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ConfigError(f"need warmup < decay epochs (increasing), got {milestones}",
                              field="train.decay_epochs")
        if self.decay_epochs and self.decay_epochs[-1] > self.epochs:
            raise ConfigError(f"last decay epoch {self.decay_epochs[-1]} exceeds epochs {self.epochs}",
                              field="train.decay_epochs")
        if self.warmup_epochs < 0 or self.base_lr <= 0:
            raise ConfigError("warmup_epochs must be >= 0 and base_lr > 0", field="train.base_lr")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]", field="train.alpha")
        SamplerConfig(self.P, self.N).validate()


def lr_at(epoch, cfg):
    """Linear warmup from base/10, then step decays to the configured rates."""
    lr = cfg.base_lr
    for start, rate in zip(cfg.decay_epochs, cfg.decay_lrs):
        if epoch >= start:
            lr = rate
    if epoch < cfg.warmup_epochs:
        lr = cfg.base_lr / 10 + (cfg.base_lr - cfg.base_lr / 10) * epoch / cfg.warmup_epochs
    return lr


def set_deterministic():
    torch.use_deterministic_algorithms(True, warn_only=True)


class Trainer:
    def __init__(self, cfg, dataset, images=None, metrics_path=None):
        cfg.validate()
        set_deterministic()
        self.cfg = cfg
        self.train_cfg = cfg.train
        self.loss_cfg = cfg.loss
        self.flags = cfg.components
        self.dataset = dataset
        self.spectra = dataset.spectra
        self.image_size = cfg.data.resolved_size
        self.images = images if images is not None else dataset.load_images(self.image_size)
        self.labels = dataset.labels
        self.n_ids = dataset.num_identities
        if self.n_ids and self.labels.max() != self.n_ids - 1:
            raise ConfigError("training labels must be dense in [0, N_id)", field="data")
        self.sampler = SamplerConfig(cfg.train.P, cfg.train.N, cfg.seed)
        self.sampler.validate()
        if self.n_ids < self.sampler.P:
            raise ConfigError(f"training split has {self.n_ids} identities, fewer than P={self.sampler.P}",
                              field="train.P")

        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.model = MultiSpectralReID(cfg.model, self.n_ids, self.spectra, self.image_size,
                                           cfg.data.object_class, use_adapters=self.flags.adapter,
                                           use_prompts=self.flags.al)
        self.params, self.param_report = trainable_parameters(self.model, FreezePolicy())
        self.optimizer = torch.optim.Adam(self.params, lr=lr_at(0, self.train_cfg), betas=tuple(cfg.train.betas),
                                          weight_decay=cfg.train.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.epoch = 0
        self.iteration = 0
        self.bank = None
        self.metrics_path = Path(metrics_path) if metrics_path is not None else None
        self.history = []

    @property
    def uses_bank(self):
        return self.flags.sic or (self.flags.al and self.loss_cfg.alignment == "loop")

    @property
    def iterations_per_epoch(self):
        n = max(1, len(self.dataset) // self.sampler.batch_size)
        cap = self.train_cfg.max_iterations_per_epoch
        return n if cap is None else min(n, cap)

    def begin_epoch(self):
        lr = lr_at(self.epoch, self.train_cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        if self.uses_bank:
            self.bank = init_epoch(self.model, self.images, self.labels, self.n_ids, self.train_cfg.alpha,
                                   epoch=self.epoch)

    def _augmented(self, indices):
        batch = self.images[indices]
        out = np.empty_like(batch)
        for b in range(batch.shape[0]):
            for m in range(batch.shape[1]):
                out[b, m] = augment(batch[b, m], self.rng, self.cfg.augment)
        return torch.from_numpy(out)

    def compute_losses(self, x, labels):
        """Forward every spectra and return (term tensors, detached unit-norm features [M, B, d])."""
        self.model.train()
        outs = [self.model.forward_spectra(x[:, m], name) for m, name in enumerate(self.spectra)]
        v = F.normalize(torch.stack([z for z, _ in outs]), dim=-1)
        logits = [lg for _, lg in outs]
        lc = self.loss_cfg
        parts = {"id": loss_id(logits, labels), "tri": loss_triplet(v, labels, lc.margin)}
        protos = self.bank.per_spectra() if self.bank is not None else None
        if self.flags.sic:
            parts["i2p"] = loss_i2p(v, protos, labels, lc.temperature)
        if self.flags.al:
            t = self.model.encode_prompts()
            # visual branch chases fixed prompts; prompts chase fixed prototypes
            parts["i2t"] = loss_i2t(v, t.detach(), labels, lc.temperature)
            if lc.alignment == "loop":
                ids = labels.unique()
                parts["t2p"] = loss_t2p(t, protos, ids, lc.temperature)
                parts["p2t"] = loss_p2t(protos, t, ids, lc.temperature)
            elif lc.alignment == "i2t+t2i":
                parts["t2i"] = loss_t2i(t, v.detach(), labels, lc.temperature)
        return parts, v.detach()

    def train_step(self, batch):
        if self.uses_bank and self.bank is None:
            raise RuntimeError("prototypes not initialized; call begin_epoch() first")
        x = self._augmented(batch.indices)
        labels = torch.from_numpy(batch.labels)
        parts, v = self.compute_losses(x, labels)
        total = combine(parts, self.loss_cfg)
        for name, val in [*parts.items(), ("total", total)]:
            if not torch.isfinite(val):
                raise NonFiniteLossError(name, val.item())
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        if self.bank is not None:
            self.bank.update_batch(v, labels)
        self.iteration += 1
        report = LossReport(**{k: val.item() for k, val in parts.items()}, total=total.item())
        return report

    def train_epoch(self):
        self.begin_epoch()
        reports = []
        for i in range(self.iterations_per_epoch):
            batch = pk_sample_batch(self.dataset, self.sampler, self.rng)
            report = self.train_step(batch)
            reports.append(report)
            self._log(i, report)
        self.epoch += 1
        return reports

    def _log(self, i, report):
        row = {"epoch": self.epoch, "iter": i, "global_iter": self.iteration, **report.as_dict(),
               "lr": self.optimizer.param_groups[0]["lr"], "wall_time": time.time()}
        self.history.append(row)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")

    def fit(self, epochs=None, checkpoint_dir=None):
        """Train until ``epochs`` (default: config epochs) have completed."""
        target = self.train_cfg.epochs if epochs is None else epochs
        reports = []
        while self.epoch < target:
            reports.extend(self.train_epoch())
            logger.info("epoch %d done, last total loss %.4f", self.epoch, reports[-1].total)
            if checkpoint_dir is not None and (self.epoch % self.train_cfg.checkpoint_every == 0
                                               or self.epoch == target):
                path = Path(checkpoint_dir) / f"epoch_{self.epoch:03d}.pt"
                self.save_checkpoint(path)
                self.save_checkpoint(Path(checkpoint_dir) / "last.pt")
        return reports

    # -- checkpointing -----------------------------------------------------

    def state_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.cfg.to_dict(),
            "n_ids": self.n_ids,
            "spectra": list(self.spectra.names),
            "image_size": list(self.image_size),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "bank": self.bank.state_dict() if self.bank is not None else None,
            "epoch": self.epoch,
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "param_report": self.param_report,
        }

    def load_state_dict(self, state):
        check_model_compatible(self.model, state)
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        if state["bank"] is not None:
            bank = PrototypeBank(self.n_ids, self.spectra.count, self.model.embed_dim)
            bank.load_state_dict(state["bank"])
            self.bank = bank
        self.epoch = int(state["epoch"])
        self.iteration = int(state["iteration"])
        self.rng.bit_generator.state = state["rng"]

    def save_checkpoint(self, path):
        save_checkpoint(self.state_dict(), path)

    def load_checkpoint(self, path):
        self.load_state_dict(load_checkpoint(path))


def save_checkpoint(state, path):
    """Write-then-rename so an interrupted save never leaves a corrupt file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    return torch.load(path, map_location="cpu", weights_only=False)


def check_model_compatible(model, state):
    """Raise CheckpointMismatchError naming every parameter whose shape differs."""
    own = model.state_dict()
    theirs = state["model"]
    problems = []
    for name in sorted(set(own) | set(theirs)):
        if name not in theirs:
            problems.append(f"{name}: missing in checkpoint")
        elif name not in own:
            problems.append(f"{name}: unexpected in checkpoint")
        elif tuple(own[name].shape) != tuple(theirs[name].shape):
            problems.append(f"{name}: model {tuple(own[name].shape)} vs checkpoint {tuple(theirs[name].shape)}")
    if problems:
        raise CheckpointMismatchError("checkpoint does not match model: " + "; ".join(problems[:6]))


def model_from_checkpoint(cfg, state):
    """Rebuild the model described by ``cfg`` and load ``state`` into it (for evaluation)."""
    from .data import SpectraSet

    spectra = SpectraSet(tuple(state["spectra"]))
    flags = cfg.components
    model = MultiSpectralReID(cfg.model, int(state["n_ids"]), spectra, cfg.data.resolved_size,
                              cfg.data.object_class, use_adapters=flags.adapter, use_prompts=flags.al)
    check_model_compatible(model, state)
    model.load_state_dict(state["model"])
    model.eval()
    return model


def train(cfg, dataset, output_dir, resume=None, images=None):
    """Run the full schedule; returns (last checkpoint path, loss reports of this invocation, trainer).

    A fresh run truncates metrics.jsonl; a resumed run appends to it.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    metrics_path = output_dir / "metrics.jsonl"
    if resume is None:
        metrics_path.unlink(missing_ok=True)
    trainer = Trainer(cfg, dataset, images=images, metrics_path=metrics_path)
    if resume is not None:
        trainer.load_checkpoint(resume)
    ckpt_dir = output_dir / "checkpoints"
    reports = trainer.fit(checkpoint_dir=ckpt_dir)
    last = ckpt_dir / "last.pt"
    if not last.exists():
        trainer.save_checkpoint(last)
    return last, reports, trainer

