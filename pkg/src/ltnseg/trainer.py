"""Training loop: Adam with warmup-cosine schedule on either loss mode.

``baseline`` minimizes the batch-mean soft Dice loss; ``ltn`` minimizes one
minus the aggregated satisfaction of the four-formula knowledge base.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ltnseg import autodiff as ad
from ltnseg.constraints import ConstraintParams, ground_knowledge_base, one_hot, sample_rng, soft_dice_per_sample
from ltnseg.data import stack_samples, subsample_fraction
from ltnseg.evaluation import mean_dice, predict_labels
from ltnseg.logic import FORMULA_NAMES, kb_loss
from ltnseg.model import SegModel, SegModelConfig, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("baseline", "ltn")
HISTORY_KEYS = ("epoch", "loss", "phi_d", "phi_c", "phi_v", "phi_n", "val_dice", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    warmup_fraction: float = 0.1
    agg_p: float = 2.0
    quantifier_p: float = 2.0
    mode: str = "ltn"
    seed: int = 0
    constraints: ConstraintParams = field(default_factory=ConstraintParams)
    model: SegModelConfig = field(default_factory=SegModelConfig)
    formulas: tuple = FORMULA_NAMES
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError(f"invalid training config: lr={self.lr}, b={self.batch_size}, E={self.epochs}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")


def lr_schedule(step, total_steps, warmup_steps, eta):
    """Linear warmup to ``eta`` then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must lie in [0, {total_steps})")
    if step < warmup_steps:
        return eta * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return eta * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr:
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_batches(ids, batch_size, rng):
    """Shuffled batches; a trailing batch of a single sample is dropped."""
    order = rng.permutation(np.asarray(ids))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches.pop()
    return batches


def steps_per_epoch(n_train, batch_size):
    full, rem = divmod(n_train, batch_size)
    if full == 0:
        return 1
    return full + (1 if rem >= 2 else 0)


def batch_loss(model, images, labels, sample_ids, config, epoch):
    """Scalar loss tensor and per-formula truths (empty in baseline mode)."""
    probs = model.forward(images)
    if config.mode == "baseline":
        target = np.stack([one_hot(lab, probs.shape[1]) for lab in labels])
        return soft_dice_per_sample(probs, target).mean(), {}
    rngs = [sample_rng(config.seed, sid, epoch) for sid in sample_ids]
    kb = ground_knowledge_base(probs, labels, config.constraints, rngs, config.quantifier_p, config.agg_p,
                               include=config.formulas)
    return kb_loss(kb), kb.truths()


def train_epoch(model, batches, config, optimizer, step, total_steps, warmup_steps, epoch=0):
    """One pass over ``batches`` of (images, labels, sample_ids); returns (step, record)."""
    if not batches:
        raise ValueError("no batches to train on")
    losses, truths, rates = [], {k: [] for k in FORMULA_NAMES}, []
    for bi, (images, labels, sids) in enumerate(batches):
        optimizer.zero_grad()
        loss, tv = batch_loss(model, images, labels, sids, config, epoch)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch} batch {bi}; truths={tv}")
        ad.backward(loss)
        lr = lr_schedule(min(step, total_steps), total_steps, warmup_steps, config.lr)
        optimizer.step(lr)
        step += 1
        losses.append(value)
        rates.append(lr)
        for k, v in tv.items():
            truths[k].append(v)
    record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": rates[-1]}
    if config.mode == "ltn":
        record.update({k: float(np.mean(v)) for k, v in truths.items() if v})
    return step, record


@dataclass
class FoldResult:
    fold: int
    history: list
    model: SegModel
    val_ids: np.ndarray
    train_ids: np.ndarray

    @property
    def final_val_dice(self):
        return self.history[-1]["val_dice"]


def fold_seed(seed, fold):
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1)[0])


def validation_dice(model, images, labels):
    preds = predict_labels(model, images)
    return float(np.mean([mean_dice(p, t) for p, t in zip(preds, labels)]))


def train_fold(samples, train_ids, val_ids, config, fold=0):
    model = SegModel.init(SegModelConfig(**{**asdict(config.model), "seed": fold_seed(config.seed, fold)}))
    optimizer = Adam(model.params, config.adam_betas, config.adam_eps)
    per_epoch = steps_per_epoch(len(train_ids), config.batch_size)
    total = per_epoch * config.epochs
    warmup = int(config.warmup_fraction * total)
    images, labels, sids = stack_samples(samples)
    val_images, val_labels = images[val_ids], labels[val_ids]
    history, step = [], 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, fold, epoch])
        batches = [(images[b], labels[b], sids[b]) for b in make_batches(train_ids, config.batch_size, rng)]
        step, record = train_epoch(model, batches, config, optimizer, step, total, warmup, epoch)
        record["val_dice"] = validation_dice(model, val_images, val_labels)
        history.append({k: record[k] for k in HISTORY_KEYS if k in record})
        log.debug("fold %d epoch %d %s", fold, epoch, record)
    return FoldResult(fold, history, model, np.asarray(val_ids), np.asarray(train_ids))


def write_history(history, path):
    with Path(path).open("w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def read_history(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def fit(samples, plan, fraction, config, out_dir=None, config_text=None):
    """Train every fold of ``plan`` on the ``fraction`` subset of its training side."""
    results = []
    for fold in range(plan.k):
        train_ids = subsample_fraction(plan.train_ids(fold), fraction, config.seed)
        res = train_fold(samples, train_ids, plan.val_ids(fold), config, fold)
        results.append(res)
        if out_dir is not None:
            d = Path(out_dir) / config.mode / f"fraction_{fraction:g}" / f"fold_{fold}"
            d.mkdir(parents=True, exist_ok=True)
            save_checkpoint(res.model, d / "model.ckpt")
            write_history(res.history, d / "history.jsonl")
            if config_text is not None:
                (d / "config.txt").write_text(config_text)
        log.info("%s fraction=%g fold=%d val_dice=%.4f", config.mode, fraction, fold, res.final_val_dice)
    return results
