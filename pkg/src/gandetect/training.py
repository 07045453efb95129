"""Two-phase training: contrastive pretraining, then supervised fine-tuning."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .augment import AugmentConfig, center_crop, make_views
from .datagen import Corpus, Record
from .netarch import CLASSIFIER, PROJECTION, DetectorNetwork
from .tensorcore import ContractError, Parameter, RngStream, Tensor

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Configs
# --------------------------------------------------------------------------

@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    images_per_batch: int = 32
    epochs: int = 50

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        if self.images_per_batch < 2:
            raise ContractError("images_per_batch must be >= 2 so every anchor has a negative")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")


@dataclass
class OptimizerConfig:
    pretrain_optimizer: str = "sgd"
    pretrain_lr: float = 1e-4
    finetune_optimizer: str = "adam"
    finetune_lr: float = 1e-5
    finetune_epochs: int = 50
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    plateau_factor: float = 10.0
    plateau_patience: int = 5
    lr_floor: float = 1e-6
    augment_finetune: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)

    def validate(self) -> None:
        for name in ("pretrain_lr", "finetune_lr", "lr_floor"):
            if not getattr(self, name) > 0:
                raise ContractError(f"optimizer.{name} must be > 0")
        if self.lr_floor > min(self.pretrain_lr, self.finetune_lr):
            raise ContractError("optimizer.lr_floor must not exceed the initial learning rates")
        for name in ("pretrain_optimizer", "finetune_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                raise ContractError(f"optimizer.{name} must be 'sgd' or 'adam'")
        if self.plateau_factor <= 1 or self.plateau_patience < 1:
            raise ContractError("plateau factor must be > 1 and patience >= 1")
        if self.finetune_epochs < 0:
            raise ContractError("finetune_epochs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

@dataclass
class LatentBatch:
    """``2N`` latent rows plus the involution mapping each row to its positive."""

    latents: Tensor
    partner: np.ndarray

    def __post_init__(self):
        self.latents = tc.as_tensor(self.latents)
        self.partner = np.asarray(self.partner, dtype=int)
        n = self.latents.shape[0]
        if self.latents.ndim != 2:
            raise ContractError(f"latents must be 2-d, got shape {self.latents.shape}")
        if n < 4:
            raise ContractError(f"a contrastive batch needs at least 4 latents, got {n}")
        idx = np.arange(n)
        if self.partner.shape != (n,) or (self.partner == idx).any() or (self.partner[self.partner] != idx).any():
            raise ContractError("pairing must be an involution without fixed points")

    @classmethod
    def from_views(cls, latents) -> "LatentBatch":
        """Rows ordered ``[a0, a0+, a1, a1+, ...]``."""
        n = tc.as_tensor(latents).shape[0]
        return cls(latents, np.arange(n) ^ 1)


def nt_xent_per_anchor(batch: LatentBatch, temperature: float) -> Tensor:
    """Per-anchor NT-Xent: ``-sim(u, u+)/t + log sum_{v != u} exp(sim(u, v)/t)``."""
    if not temperature > 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    z = tc.l2_normalize(batch.latents, axis=1)
    sims = tc.mul(_gram(z), 1.0 / temperature)
    n = z.shape[0]
    idx = np.arange(n)
    pos = tc.take(sims, (idx, batch.partner))
    lse = tc.logsumexp(sims, axis=1, mask=~np.eye(n, dtype=bool))
    return tc.add(lse, tc.mul(pos, -1.0))


def _gram(z: Tensor) -> Tensor:
    """``z @ z.T`` with the gradient of both factors routed to ``z``."""
    out_data = z.data @ z.data.T

    def backward(g):
        tc._accum(z, (g + g.T) @ z.data)

    return tc._make(out_data, (z,), backward, "gram")


def nt_xent_loss(batch: LatentBatch, temperature: float) -> Tensor:
    """Mean NT-Xent over all ``2N`` anchors."""
    return tc.mean(nt_xent_per_anchor(batch, temperature))


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy from logits: ``softplus(z) - y z``."""
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    return tc.mean(tc.add(tc.softplus(logits), tc.mul(logits, -y)))


def bce_loss(score: float, label: int) -> float:
    """``-[y ln s + (1 - y) ln(1 - s)]``, evaluated through the logit for stability."""
    if not 0.0 <= score <= 1.0:
        raise ContractError(f"score must lie in [0, 1], got {score}")
    if score in (0.0, 1.0):
        correct = (score == 1.0) == (label == 1)
        return 0.0 if correct else math.inf
    logit = math.log(score) - math.log1p(-score)
    return float(bce_with_logits(Tensor([logit]), [label]).data)


# --------------------------------------------------------------------------
# Optimizers and schedule
# --------------------------------------------------------------------------

def _check_grads(params: dict[str, Parameter]) -> None:
    for name, p in params.items():
        if p.trainable and not np.isfinite(p.grad).all():
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")


class SGD:
    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, Parameter]) -> None:
        _check_grads(params)
        for p in params.values():
            if p.trainable:
                p.data = p.data - self.lr * p.grad


class Adam:
    kind = "adam"

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Parameter]) -> None:
        _check_grads(params)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if not p.trainable:
                continue
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, lr: float, cfg: OptimizerConfig):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr, cfg.adam_betas, cfg.adam_eps)
    raise ContractError(f"unknown optimizer {kind!r}")


def optimizer_step(optimizer, params: dict[str, Parameter], lr: float | None = None) -> None:
    if lr is not None:
        optimizer.lr = lr
    optimizer.step(params)


@dataclass
class TrainState:
    initial_lr: float
    lr: float
    floor: float = 1e-6
    factor: float = 10.0
    patience: int = 5
    epoch: int = 0
    reductions: int = 0
    best_val: float = math.inf
    since_improvement: int = 0
    exhausted: bool = False
    history: list[dict] = field(default_factory=list)

    @classmethod
    def start(cls, lr: float, cfg: OptimizerConfig) -> "TrainState":
        return cls(initial_lr=lr, lr=lr, floor=cfg.lr_floor, factor=cfg.plateau_factor,
                   patience=cfg.plateau_patience)


def plateau_step(state: TrainState, val_loss: float) -> TrainState:
    """Reduce-on-plateau: divide lr by ``factor`` after ``patience`` epochs without improvement.

    ``exhausted`` turns on when patience runs out while the rate is already
    at the floor.
    """
    if val_loss < state.best_val:
        return replace(state, best_val=val_loss, since_improvement=0)
    count = state.since_improvement + 1
    if count < state.patience:
        return replace(state, since_improvement=count)
    if state.lr <= state.floor:
        return replace(state, since_improvement=0, exhausted=True)
    k = state.reductions + 1
    # recompute from the initial rate so the values stay exactly on the 10^-k grid
    lr = max(state.initial_lr / state.factor ** k, state.floor)
    return replace(state, lr=lr, reductions=k, since_improvement=0)


# --------------------------------------------------------------------------
# Batch assembly
# --------------------------------------------------------------------------

def _batches(records: Sequence[Record], size: int, rng: RngStream, min_size: int = 2) -> list[list[Record]]:
    order = rng.generator().permutation(len(records))
    shuffled = [records[i] for i in order]
    out = [shuffled[i:i + size] for i in range(0, len(shuffled), size)]
    return [b for b in out if len(b) >= min_size]


def _view_batch(corpus: Corpus, records: Sequence[Record], aug: AugmentConfig, rng: RngStream,
                epoch: int) -> np.ndarray:
    views = []
    for rec in records:
        # keyed by (seed, item, epoch) only: independent of batch composition
        v0, v1 = make_views(corpus.image(rec), aug, rng.child(f"aug/{rec.id}/{epoch}"))
        views += [v0, v1]
    return np.stack([v.transpose(2, 0, 1) for v in views])


def _center_batch(corpus: Corpus, records: Sequence[Record], size: int) -> np.ndarray:
    return np.stack([center_crop(corpus.image(r), size).transpose(2, 0, 1) for r in records])


def write_history_csv(history: list[dict], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "phase", "train_loss", "val_loss", "lr"])
    for h in history:
        w.writerow([h["epoch"], h["phase"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# --------------------------------------------------------------------------
# Phase 1: contrastive pretraining
# --------------------------------------------------------------------------

def contrastive_val_loss(net: DetectorNetwork, corpus: Corpus, records: Sequence[Record],
                         cfg: ContrastiveConfig, crop: int) -> float | None:
    """NT-Xent over deterministic center crops (both views identical, no augmentation)."""
    if len(records) < 2:
        return None
    losses, weights = [], []
    for i in range(0, len(records), cfg.images_per_batch):
        chunk = records[i:i + cfg.images_per_batch]
        if len(chunk) < 2:
            continue
        z = net.forward(Tensor(_center_batch(corpus, chunk, crop))).data
        zz = np.repeat(z, 2, axis=0)
        losses.append(nt_xent_loss(LatentBatch.from_views(zz), cfg.temperature).item())
        weights.append(len(chunk))
    return float(np.average(losses, weights=weights))


def pretrain(net: DetectorNetwork, corpus: Corpus, cfg: ContrastiveConfig, opt: OptimizerConfig,
             aug: AugmentConfig, rng: RngStream,
             on_epoch: Callable[[dict], None] | None = None) -> tuple[DetectorNetwork, list[dict]]:
    """Self-supervised phase; reads only image pixels of the train/val splits, never labels."""
    if net.head_kind != PROJECTION:
        raise ContractError("pretraining needs a projection head")
    cfg.validate()
    opt.validate()
    train = corpus.split("train")
    val = corpus.split("val")
    if len(train) < 2:
        raise ContractError("pretraining needs at least 2 training images")
    crop = aug.crop_size
    optimizer = make_optimizer(opt.pretrain_optimizer, opt.pretrain_lr, opt)
    state = TrainState.start(opt.pretrain_lr, opt)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in _batches(train, cfg.images_per_batch, rng.child(f"shuffle/{epoch}")):
            x = Tensor(_view_batch(corpus, batch, aug, rng, epoch))
            loss = nt_xent_loss(LatentBatch.from_views(net.forward(x)), cfg.temperature)
            net.zero_grad()
            tc.backward(loss)
            optimizer_step(optimizer, net.params, state.lr)
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_loss = contrastive_val_loss(net, corpus, val, cfg, crop)
        entry = {"epoch": epoch, "phase": "pretrain", "train_loss": train_loss,
                 "val_loss": val_loss if val_loss is not None else train_loss, "lr": state.lr}
        state.history.append(entry)
        state = plateau_step(replace(state, epoch=epoch), entry["val_loss"])
        log.info("pretrain epoch %d loss %.5f val %.5f lr %g", epoch, train_loss, entry["val_loss"], entry["lr"])
        if on_epoch:
            on_epoch(entry)
        if state.exhausted:
            break
    return net, state.history


# --------------------------------------------------------------------------
# Phase 2: supervised fine-tuning
# --------------------------------------------------------------------------

def _labels(records: Sequence[Record]) -> np.ndarray:
    return np.array([float(r.label) for r in records])


def classifier_val_loss(net: DetectorNetwork, corpus: Corpus, records: Sequence[Record], crop: int,
                        chunk: int = 64) -> float | None:
    if not records:
        return None
    total = 0.0
    for i in range(0, len(records), chunk):
        part = records[i:i + chunk]
        logits = net.forward(Tensor(_center_batch(corpus, part, crop)))
        total += bce_with_logits(logits, _labels(part)).item() * len(part)
    return total / len(records)


def finetune(net: DetectorNetwork, corpus: Corpus, cfg: ContrastiveConfig, opt: OptimizerConfig,
             aug: AugmentConfig, rng: RngStream,
             on_epoch: Callable[[dict], None] | None = None) -> tuple[DetectorNetwork, list[dict]]:
    """Supervised phase over the whole network with BCE; same batch size and schedule as phase 1.

    Each batch holds ``images_per_batch`` images with two augmented crops
    each. With ``opt.augment_finetune`` off, crops are taken from the
    unaugmented image.
    """
    if net.head_kind != CLASSIFIER:
        raise ContractError("fine-tuning needs a classifier head")
    cfg.validate()
    opt.validate()
    train = corpus.split("train")
    val = corpus.split("val")
    if not train:
        raise ContractError("fine-tuning needs training images")
    view_cfg = aug if opt.augment_finetune else aug.disabled()
    optimizer = make_optimizer(opt.finetune_optimizer, opt.finetune_lr, opt)
    state = TrainState.start(opt.finetune_lr, opt)
    for epoch in range(1, opt.finetune_epochs + 1):
        losses = []
        for batch in _batches(train, cfg.images_per_batch, rng.child(f"shuffle/{epoch}"), min_size=1):
            x = Tensor(_view_batch(corpus, batch, view_cfg, rng, epoch))
            y = np.repeat(_labels(batch), 2)
            loss = bce_with_logits(net.forward(x), y)
            net.zero_grad()
            tc.backward(loss)
            optimizer_step(optimizer, net.params, state.lr)
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_loss = classifier_val_loss(net, corpus, val, aug.crop_size)
        entry = {"epoch": epoch, "phase": "finetune", "train_loss": train_loss,
                 "val_loss": val_loss if val_loss is not None else train_loss, "lr": state.lr}
        state.history.append(entry)
        state = plateau_step(replace(state, epoch=epoch), entry["val_loss"])
        log.info("finetune epoch %d loss %.5f val %.5f lr %g", epoch, train_loss, entry["val_loss"], entry["lr"])
        if on_epoch:
            on_epoch(entry)
        if state.exhausted:
            break
    return net, state.history
