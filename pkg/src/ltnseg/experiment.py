"""Cross-validated baseline-vs-ltn comparison over seeds and data fractions.

Each global seed fixes the generated dataset, the fold split, the training
subsets, model initialisation and chord sampling. Fold models are always
scored on their full validation fold.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ltnseg.data import PhantomConfig, generate_dataset, kfold_split, stack_samples
from ltnseg.evaluation import predict_labels, summarize
from ltnseg.trainer import MODES, TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    n_samples: int = 200
    size: tuple = (32, 32)
    k: int = 5
    seeds: tuple = (0, 1, 2)
    fractions: tuple = (1.0, 0.25, 0.05)
    modes: tuple = MODES
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def __post_init__(self):
        unknown = set(self.modes) - set(MODES)
        if unknown:
            raise ValueError(f"unknown modes {sorted(unknown)}")
        if not self.seeds or not self.fractions:
            raise ValueError("need at least one seed and one fraction")


@dataclass
class CellResult:
    """All fold scores for one (mode, fraction) cell, across seeds."""
    mode: str
    fraction: float
    fold_dice: list = field(default_factory=list)
    fold_nested: list = field(default_factory=list)
    fold_connected: list = field(default_factory=list)
    fold_simvol: list = field(default_factory=list)

    @property
    def dice(self):
        return float(np.mean(self.fold_dice))

    @property
    def nested(self):
        return float(np.mean(self.fold_nested))


@dataclass
class ExperimentResult:
    cells: dict = field(default_factory=dict)
    seconds: float = 0.0

    def cell(self, mode, fraction):
        return self.cells[(mode, float(fraction))]

    def summary(self):
        return {f"{m}@{f:g}": {"dice": c.dice, "nested": c.nested} for (m, f), c in sorted(self.cells.items())}


def run_experiment(config=None, out_dir=None):
    config = config or ExperimentConfig()
    t0 = time.process_time()
    result = ExperimentResult()
    phantom = replace(config.phantom, size=tuple(config.size))
    for seed in config.seeds:
        samples = generate_dataset(config.n_samples, phantom, seed=seed)
        images, labels, sids = stack_samples(samples)
        plan = kfold_split(len(samples), config.k, seed)
        for mode in config.modes:
            train_cfg = replace(config.train, mode=mode, seed=seed,
                                constraints=replace(config.train.constraints, seed=seed))
            for fraction in config.fractions:
                sub = None if out_dir is None else f"{out_dir}/seed_{seed}"
                folds = fit(samples, plan, fraction, train_cfg, sub)
                cell = result.cells.setdefault((mode, float(fraction)), CellResult(mode, float(fraction)))
                for res in folds:
                    val = res.val_ids
                    preds = predict_labels(res.model, images[val])
                    row = summarize(mode, fraction, preds, labels[val], train_cfg.constraints, sids[val])
                    cell.fold_dice.append(res.final_val_dice)
                    cell.fold_nested.append(row.nested_mean)
                    cell.fold_connected.append(row.connected_mean)
                    cell.fold_simvol.append(row.simvol_mean)
                log.info("seed=%d %s fraction=%g dice=%.4f", seed, mode, fraction,
                         np.mean([r.final_val_dice for r in folds]))
    result.seconds = time.process_time() - t0
    return result


@dataclass
class Verdict:
    dice_parity: dict
    low_data_gain: float
    nested_baseline: float
    nested_ltn: float

    @property
    def parity_ok(self):
        return all(gap >= -0.005 for gap in self.dice_parity.values())

    @property
    def gain_ok(self):
        return self.low_data_gain >= 0.01

    @property
    def nesting_ok(self):
        return self.nested_ltn <= self.nested_baseline


def directional_verdict(result, low_fraction=0.05, full_fraction=1.0):
    """ltn-minus-baseline Dice per fraction plus the full-data nesting rates."""
    fractions = sorted({f for _, f in result.cells})
    parity = {f: result.cell("ltn", f).dice - result.cell("baseline", f).dice for f in fractions}
    return Verdict(parity, parity[float(low_fraction)], result.cell("baseline", full_fraction).nested,
                   result.cell("ltn", full_fraction).nested)
