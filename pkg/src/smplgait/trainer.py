"""Identity-balanced sampling, step learning-rate schedule and the training loop.

An "epoch" is a fixed number of sampled P x K batches, by default
``ceil(#train sequences / (P * K))``. The training log is a CSV with header
``epoch,iter,triplet,ce,total,lr``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import PreprocessConfig, load_samples, sample_frames
from .errors import ConfigError, DataError, NumericError
from .losses import LossConfig, PartClassifier, total_loss
from .model import ModelConfig, SMPLGait, frames_to_tensor, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "iter", "triplet", "ce", "total", "lr")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    ids_per_batch: int = 32
    samples_per_id: int = 4
    frames: int = 30
    epochs: int = 1200
    lr: float = 1e-3
    weight_decay: float = 5e-4
    decay_epochs: tuple = (200, 600)
    decay_factor: float = 0.1
    iters_per_epoch: int | None = None
    max_iters: int | None = None
    checkpoint_every: int = 100
    grad_clip: float | None = None
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))
        if self.ids_per_batch < 2 or self.samples_per_id < 2:
            raise ConfigError("need at least 2 ids per batch and 2 samples per id")
        if self.frames < 1 or self.epochs < 1:
            raise ConfigError("frames and epochs must be positive")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e >= self.epochs or e < 0 for e in d):
            raise ConfigError(f"decay epochs {d} must be strictly increasing and below {self.epochs}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")

    @property
    def batch_size(self):
        return self.ids_per_batch * self.samples_per_id

    def to_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: base lr times factor per milestone passed."""
    passed = sum(1 for e in cfg.decay_epochs if epoch >= e)
    lr = cfg.lr
    for _ in range(passed):
        lr *= cfg.decay_factor
    return lr


def group_by_subject(samples) -> dict:
    groups = defaultdict(list)
    for s in samples:
        groups[s.subject_id].append(s)
    return dict(sorted(groups.items()))


def sample_batch(groups: dict, cfg: TrainConfig, rng: np.random.Generator) -> list:
    """P distinct subjects x K sequences each, every sequence cut to L frames.

    Subjects with fewer than K sequences are resampled with replacement.
    """
    subjects = list(groups)
    if len(subjects) < cfg.ids_per_batch:
        raise DataError(f"need {cfg.ids_per_batch} subjects per batch, split has {len(subjects)}")
    chosen = rng.choice(len(subjects), size=cfg.ids_per_batch, replace=False)
    batch = []
    for i in chosen:
        seqs = groups[subjects[i]]
        k = cfg.samples_per_id
        picks = rng.choice(len(seqs), size=k, replace=len(seqs) < k)
        batch.extend(sample_frames(seqs[j], cfg.frames, rng) for j in picks)
    return batch


def batch_tensors(batch, dtype=torch.float32):
    frames = frames_to_tensor(np.stack([s.frames for s in batch]), dtype)
    smpls = torch.from_numpy(np.stack([s.smpls for s in batch])).to(dtype)
    return frames, smpls


def _param_groups(modules, weight_decay):
    decay, no_decay = [], []
    for module in modules:
        for m in module.modules():
            params = list(m.parameters(recurse=False))
            if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                no_decay += params
            else:
                decay += params
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


class Trainer:
    """Holds the model, classifier head, optimizer and all RNG state.

    Everything needed to continue bit-identically is in the checkpoint:
    parameters, optimizer moments, the batch sampler's generator state and
    torch's RNG state (dropout).
    """

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, loss_cfg: LossConfig,
                 train_samples, out_dir=None):
        if not train_samples:
            raise DataError("training split is empty")
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.groups = group_by_subject(train_samples)
        self.label_map = {sid: i for i, sid in enumerate(self.groups)}
        if loss_cfg.num_classes and loss_cfg.num_classes != len(self.label_map):
            raise ConfigError(f"loss num_classes {loss_cfg.num_classes} != {len(self.label_map)} train subjects")
        self.loss_cfg = LossConfig(loss_cfg.alpha, loss_cfg.beta, loss_cfg.margin, len(self.label_map))
        self.num_sequences = len(train_samples)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.dtype = DTYPES[train_cfg.dtype]

        torch.manual_seed(train_cfg.seed)
        self.model = SMPLGait(model_cfg).to(self.dtype)
        self.classifier = PartClassifier(model_cfg.num_parts, model_cfg.part_dim,
                                         self.loss_cfg.num_classes).to(self.dtype)
        self.optimizer = torch.optim.AdamW(
            _param_groups([self.model, self.classifier], train_cfg.weight_decay), lr=train_cfg.lr)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.torch_rng = torch.Generator().manual_seed(train_cfg.seed)
        self.iteration = 0
        self.history = []

    @property
    def iters_per_epoch(self):
        if self.cfg.iters_per_epoch:
            return self.cfg.iters_per_epoch
        return max(1, math.ceil(self.num_sequences / self.cfg.batch_size))

    @property
    def total_iters(self):
        n = self.cfg.epochs * self.iters_per_epoch
        return min(n, self.cfg.max_iters) if self.cfg.max_iters else n

    def epoch_of(self, iteration):
        return iteration // self.iters_per_epoch

    def step(self) -> dict:
        """One optimizer step on a freshly sampled batch; returns the log row."""
        epoch = self.epoch_of(self.iteration)
        lr = lr_at(epoch, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        batch = sample_batch(self.groups, self.cfg, self.rng)
        frames, smpls = batch_tensors(batch, self.dtype)
        labels = torch.tensor([self.label_map[s.subject_id] for s in batch])

        self.model.train()
        self.classifier.train()
        # dropout draws from a dedicated generator so resuming is exact
        saved = torch.get_rng_state()
        torch.set_rng_state(self.torch_rng.get_state())
        try:
            emb = self.model(frames, smpls)
            loss, parts = total_loss(emb, labels, self.classifier, self.loss_cfg)
        finally:
            self.torch_rng.set_state(torch.get_rng_state())
            torch.set_rng_state(saved)
        if not math.isfinite(parts["total"]):
            ids = [s.sequence_id for s in batch]
            self._dump_nonfinite(ids, parts)
            raise NumericError(f"non-finite loss at iteration {self.iteration}: {parts}", batch_ids=ids)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(
                list(self.model.parameters()) + list(self.classifier.parameters()), self.cfg.grad_clip)
        self.optimizer.step()
        row = {"epoch": epoch, "iter": self.iteration, "triplet": parts["triplet"],
               "ce": parts["ce"], "total": parts["total"], "lr": lr}
        self.iteration += 1
        self.history.append(row)
        return row

    def _dump_nonfinite(self, ids, parts):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "nonfinite_batch.json", "w") as fh:
            json.dump({"iteration": self.iteration, "losses": parts, "sequence_ids": ids}, fh, indent=2)

    def run(self, log_every=0) -> list:
        """Train until ``total_iters``; write log/checkpoints when ``out_dir`` is set."""
        writer = fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "train_log.csv"
            fresh = self.iteration == 0 or not path.exists()
            fh = open(path, "w" if fresh else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            if fresh:
                writer.writeheader()
        try:
            while self.iteration < self.total_iters:
                row = self.step()
                if writer is not None:
                    writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
                if log_every and row["iter"] % log_every == 0:
                    log.info("iter %d epoch %d loss %.4f (tri %.4f ce %.4f) lr %g", row["iter"],
                             row["epoch"], row["total"], row["triplet"], row["ce"], row["lr"])
                end_of_epoch = self.iteration % self.iters_per_epoch == 0
                if (self.out_dir is not None and end_of_epoch
                        and self.epoch_of(self.iteration) % self.cfg.checkpoint_every == 0):
                    self.save(self.out_dir / f"checkpoint_{self.iteration:07d}.pt")
        finally:
            if fh is not None:
                fh.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoint_final.pt")
        return self.history

    def save(self, path):
        save_checkpoint(
            path, self.model,
            classifier_state=self.classifier.state_dict(),
            optimizer_state=self.optimizer.state_dict(),
            sampler_state=json.dumps(self.rng.bit_generator.state),
            torch_rng_state=self.torch_rng.get_state(),
            iteration=self.iteration,
            train_config=json.dumps(self.cfg.to_dict()),
            loss_config=json.dumps(asdict(self.loss_cfg)),
            label_map=json.dumps([[int(k), v] for k, v in self.label_map.items()]),
        )

    @classmethod
    def resume(cls, path, train_samples, out_dir=None, train_cfg=None):
        """Rebuild a trainer from a checkpoint written by :meth:`save`."""
        model, ckpt = load_checkpoint(path)
        cfg = train_cfg or TrainConfig(**json.loads(ckpt["train_config"]))
        # class count is re-derived from the subjects, then checked against the label map
        loss_cfg = LossConfig(**{**json.loads(ckpt["loss_config"]), "num_classes": 0})
        trainer = cls(model.cfg, cfg, loss_cfg, train_samples, out_dir)
        saved_map = {k: v for k, v in json.loads(ckpt["label_map"])}
        if saved_map != trainer.label_map:
            raise DataError("training subjects differ from the checkpoint's label map")
        trainer.model.load_state_dict(model.state_dict())
        trainer.classifier.load_state_dict(ckpt["classifier_state"])
        trainer.optimizer.load_state_dict(ckpt["optimizer_state"])
        trainer.rng.bit_generator.state = json.loads(ckpt["sampler_state"])
        trainer.torch_rng.set_state(ckpt["torch_rng_state"])
        trainer.iteration = int(ckpt["iteration"])
        return trainer


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, loss_cfg: LossConfig, manifest,
          preprocess: PreprocessConfig, out_dir=None, threads=1, subjects=None, log_every=0) -> Trainer:
    """Load the manifest's train split and run the full schedule."""
    if tuple(model_cfg.input_size) != tuple(preprocess.size):
        raise ConfigError(f"model input {model_cfg.input_size} != preprocessing size {preprocess.size}")
    split = manifest.select(split="train", subjects=subjects)
    samples = load_samples(split, preprocess, threads=threads)
    trainer = Trainer(model_cfg, train_cfg, loss_cfg, samples, out_dir)
    trainer.run(log_every=log_every)
    return trainer
