"""Real-valued grounding of quantifiers, negation and knowledge-base aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ltnseg import autodiff as ad
from ltnseg.autodiff import Tensor

FORMULA_NAMES = ("phi_d", "phi_c", "phi_v", "phi_n")


class TruthRangeError(ValueError):
    pass


def check_truth(t, name="truth", tol=1e-12):
    """Raise unless every value of ``t`` lies in [0, 1]."""
    v = t.data if isinstance(t, Tensor) else np.asarray(t)
    if np.any(v < -tol) or np.any(v > 1 + tol) or not np.all(np.isfinite(v)):
        raise TruthRangeError(f"{name} outside [0, 1]: {v}")
    return t


def _as_vector(truths):
    if isinstance(truths, Tensor):
        return truths.reshape(-1)
    truths = list(truths)
    if not truths:
        raise ValueError("cannot aggregate an empty collection of truth values")
    return ad.stack([ad.as_tensor(t).reshape(()) for t in truths])


def forall_pmean(truths, p=2.0):
    """Smooth minimum ``1 - (mean((1 - u)**p))**(1/p)``."""
    if p < 1:
        raise ValueError(f"quantifier p must be >= 1, got {p}")
    u = _as_vector(truths)
    if u.size == 0:
        raise ValueError("cannot aggregate an empty collection of truth values")
    check_truth(u)
    err = ad.clamp_min(1.0 - u, 0.0)
    return 1.0 - ad.pmean(err, p)


def smooth_max(truths, p=2.0):
    """Smooth maximum ``(mean(u**p))**(1/p)``."""
    if p < 1:
        raise ValueError(f"quantifier p must be >= 1, got {p}")
    u = _as_vector(truths)
    if u.size == 0:
        raise ValueError("cannot aggregate an empty collection of truth values")
    check_truth(u)
    return ad.pmean(ad.clamp_min(u, 0.0), p)


def negate(t):
    return 1.0 - ad.as_tensor(t)


@dataclass
class KnowledgeBase:
    formulas: list = field(default_factory=list)
    agg_p: float = 2.0

    def __post_init__(self):
        names = [name for name, _ in self.formulas]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate formula names: {names}")
        if self.agg_p < 1:
            raise ValueError(f"agg_p must be >= 1, got {self.agg_p}")

    def add(self, name, truth):
        if name in self.names:
            raise ValueError(f"formula {name!r} already present")
        self.formulas.append((name, truth))

    @property
    def names(self):
        return [name for name, _ in self.formulas]

    def truths(self):
        return {name: float(t.item()) for name, t in self.formulas}

    def __getitem__(self, name):
        for key, t in self.formulas:
            if key == name:
                return t
        raise KeyError(name)

    def __len__(self):
        return len(self.formulas)


def sat_agg(kb):
    if not kb.formulas:
        raise ValueError("empty knowledge base")
    return forall_pmean([t for _, t in kb.formulas], kb.agg_p)


def kb_loss(kb):
    return 1.0 - sat_agg(kb)
