"""Soft (trainable) and hard (audit) groundings of the segmentation constraints.

Class convention: 0 background, 1 anterior, 2 posterior. Probabilities are
laid out class-first, ``(C, *spatial)`` for one sample and
``(N, C, *spatial)`` for a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from ltnseg import autodiff as ad
from ltnseg.autodiff import Tensor
from ltnseg.logic import KnowledgeBase, smooth_max, forall_pmean, negate

FOREGROUND = (1, 2)
FG_SLICE = slice(1, 3)
DICE_SMOOTH = 1e-6


class EmptyMask(ValueError):
    pass


@dataclass
class ConstraintParams:
    gamma_c: float = 0.001
    gamma_v: float = 0.0001
    # absolute voxel tolerance; when None, epsilon_fraction of the grid is used
    epsilon: float | None = None
    epsilon_fraction: float = 0.019
    chamfer_power: float = 1.0
    nest_pairs: int = 32
    nest_points: int = 64
    nest_smooth_p: float = 2.0
    nest_endpoint_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.gamma_c <= 0 or self.gamma_v <= 0:
            raise ValueError("gamma_c and gamma_v must be positive")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.epsilon_fraction < 0:
            raise ValueError("epsilon_fraction must be non-negative")
        if self.chamfer_power < 1:
            raise ValueError("chamfer_power must be >= 1")
        if self.nest_pairs < 1 or self.nest_points < 1:
            raise ValueError("nest_pairs and nest_points must be positive")

    def resolve_epsilon(self, n_voxels=None):
        if self.epsilon is not None:
            return float(self.epsilon)
        if n_voxels is None:
            raise ValueError("fractional epsilon needs the grid size")
        return self.epsilon_fraction * n_voxels


def sample_rng(seed, sample_id=0, epoch=0):
    """Independent generator for one (seed, sample, epoch) triple."""
    return np.random.default_rng([int(seed), int(sample_id), int(epoch)])


def argmax_labels(probs):
    """Per-voxel argmax over the class axis; ties go to the lowest class id."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(data, axis=0)


def one_hot(labels, num_classes=3):
    labels = np.asarray(labels)
    return (np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(np.float64)


# -- Dice ----------------------------------------------------------------

def _target_array(target, probs_shape):
    t = np.asarray(target)
    if t.shape == tuple(probs_shape):
        return t.astype(np.float64)
    if t.shape == tuple(probs_shape[1:]):
        return one_hot(t, probs_shape[0])
    raise ad.ShapeError("soft_dice", tuple(probs_shape), t.shape)


def soft_dice_per_sample(probs, target, smooth=DICE_SMOOTH):
    """Soft Dice loss of every sample in a ``(N, C, *spatial)`` batch, shape (N,)."""
    probs = ad.as_tensor(probs)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != probs.shape:
        raise ad.ShapeError("soft_dice", probs.shape, t.shape)
    axes = tuple(range(2, probs.ndim))
    p = probs[:, FG_SLICE]
    tt = t[:, FG_SLICE]
    inter = (p * tt).sum(axis=axes)
    denom = p.sum(axis=axes) + tt.sum(axis=axes)
    dice = (2.0 * inter + smooth) / (denom + smooth)
    return 1.0 - dice.mean(axis=1)


def soft_dice_loss(probs, target, smooth=DICE_SMOOTH):
    """``1 - mean_c (2 sum p t + s) / (sum p + sum t + s)`` over foreground classes.

    ``target`` is either a one-hot array shaped like ``probs`` or a label grid.
    """
    probs = ad.as_tensor(probs)
    t = _target_array(target, probs.shape)
    batched = probs.reshape((1,) + probs.shape)
    return soft_dice_per_sample(batched, t[None], smooth).reshape(())


# -- Chamfer / connectedness --------------------------------------------

def _nearest_sq(points_a, points_b):
    diff = points_a[:, None, :] - points_b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _nearest_terms(points_a, points_b, power):
    sq = _nearest_sq(points_a, points_b)
    return sq.min(axis=1) ** (power / 2.0), sq.min(axis=0) ** (power / 2.0)


def chamfer_distance(points_a, points_b, power=1.0):
    """Symmetric Chamfer distance between two integer point sets ``(n, ndim)``."""
    if len(points_a) == 0 or len(points_b) == 0:
        raise EmptyMask("chamfer distance of an empty point set")
    a = np.asarray(points_a, dtype=np.float64).reshape(len(points_a), -1)
    b = np.asarray(points_b, dtype=np.float64).reshape(len(points_b), -1)
    ta, tb = _nearest_terms(a, b, power)
    return math.fsum(ta) / len(a) + math.fsum(tb) / len(b)


def mask_points(mask):
    return np.argwhere(np.asarray(mask, dtype=bool)).astype(np.float64)


def _distance_to(mask):
    """Euclidean distance from every voxel to the nearest voxel of ``mask``."""
    return distance_transform_edt(~mask)


def connectedness_hard(labels, params, class_a=1, class_b=2):
    """exp(-gamma_c * d**2) on a label grid; an absent region grounds to 0."""
    labels = np.asarray(labels)
    a, b = labels == class_a, labels == class_b
    if not a.any() or not b.any():
        return 0.0
    ta = _distance_to(b)[a] ** params.chamfer_power
    tb = _distance_to(a)[b] ** params.chamfer_power
    d = math.fsum(ta) / len(ta) + math.fsum(tb) / len(tb)
    return math.exp(-params.gamma_c * d * d)


def connectedness_grounding(probs, params, class_a=1, class_b=2, labels=None):
    """Differentiable connectedness of one ``(C, *spatial)`` prediction.

    Region membership comes from the argmax labels (no gradient). Each
    point's nearest-neighbour term is weighted by its own class
    probability, so the value equals the hard grounding on crisp input.
    """
    probs = ad.as_tensor(probs)
    labels = argmax_labels(probs) if labels is None else np.asarray(labels)
    a, b = labels == class_a, labels == class_b
    if not a.any() or not b.any():
        return Tensor(0.0)
    ia, ib = np.nonzero(a), np.nonzero(b)
    ta = _distance_to(b)[ia] ** params.chamfer_power
    tb = _distance_to(a)[ib] ** params.chamfer_power
    wa = probs[(class_a,) + ia]
    wb = probs[(class_b,) + ib]
    d = (wa * ta).sum() / len(ta) + (wb * tb).sum() / len(tb)
    return ad.exp(-params.gamma_c * d * d)


# -- nesting --------------------------------------------------------------

def chord_points(src, dst, q, shape):
    """Q interpolated grid points on each segment src->dst, rounded half up and clamped.

    ``src`` and ``dst`` are integer ``(P, ndim)`` voxel coordinates; returns
    integer ``(P, Q, ndim)``. The arithmetic is exact: point k sits at
    src + k (dst - src) / (Q - 1), so ties at .5 always round up.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if q == 1:
        idx = src[:, None, :]
    else:
        k = np.arange(q, dtype=np.int64)[None, :, None]
        num = src[:, None, :] * (q - 1) + k * (dst - src)[:, None, :]
        # floor(num / (q-1) + 1/2) in integers
        idx = (2 * num + (q - 1)) // (2 * (q - 1))
    hi = np.asarray(shape) - 1
    return np.clip(idx, 0, hi)


def sample_chords(mask, pairs, points, rng=None):
    """Chord interpolants between voxel pairs of ``mask``.

    ``pairs=None`` enumerates every ordered pair of distinct voxels.
    Returns None when the mask holds fewer than two voxels.
    """
    mask = np.asarray(mask, dtype=bool)
    coords = np.argwhere(mask)
    n = len(coords)
    if n < 2:
        return None
    if pairs is None:
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        keep = i != j
        src_i, dst_i = i[keep], j[keep]
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        src_i = rng.integers(0, n, size=pairs)
        dst_i = rng.integers(0, n, size=pairs)
    return chord_points(coords[src_i], coords[dst_i], points, mask.shape)


def nested_hard(mask_a, mask_b, pairs=32, points=64, rng=None):
    """True if a sampled chord inside ``mask_a`` crosses a voxel of ``mask_b``."""
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    if mask_a.shape != mask_b.shape:
        raise ad.ShapeError("nested_hard", mask_a.shape, mask_b.shape)
    chords = sample_chords(mask_a, pairs, points, rng)
    if chords is None:
        return False
    flat = chords.reshape(-1, mask_a.ndim)
    return bool(mask_b[tuple(flat.T)].any())


def nested_either(labels, params, rng=None, class_a=1, class_b=2):
    """Nesting in either containment direction on a label grid."""
    labels = np.asarray(labels)
    a, b = labels == class_a, labels == class_b
    rng = np.random.default_rng(params.seed) if rng is None else rng
    return (nested_hard(a, b, params.nest_pairs, params.nest_points, rng)
            or nested_hard(b, a, params.nest_pairs, params.nest_points, rng))


def nested_soft(probs, outer, inner, params, rng=None, labels=None, smooth_p=None):
    """Smooth-max of the ``inner`` class probability along chords of ``outer``.

    Chords are drawn from the argmax mask of ``outer`` exactly as in
    :func:`nested_hard`; the sampling step carries no gradient.
    """
    if outer == inner:
        raise ValueError("outer and inner classes must differ")
    probs = ad.as_tensor(probs)
    labels = argmax_labels(probs) if labels is None else np.asarray(labels)
    chords = sample_chords(labels == outer, params.nest_pairs, params.nest_points, rng)
    if chords is None:
        return Tensor(0.0)
    p_count, q_count = chords.shape[:2]
    flat = chords.reshape(-1, labels.ndim)
    values = probs[(inner,) + tuple(flat.T)].reshape((p_count, q_count))
    if params.nest_endpoint_weights:
        src = probs[(outer,) + tuple(chords[:, 0].T)]
        dst = probs[(outer,) + tuple(chords[:, -1].T)]
        values = values * (src * dst).reshape((p_count, 1))
    return smooth_max(values, params.nest_smooth_p if smooth_p is None else smooth_p)


# -- volume ---------------------------------------------------------------

def soft_voxel_count(probs, class_id):
    return ad.as_tensor(probs)[class_id].sum()


def hard_voxel_count(labels, class_id):
    return int(np.count_nonzero(np.asarray(labels) == class_id))


def volume_similarity(count_a, count_b, params, n_voxels=None):
    """exp(-gamma_v * max(|c_a - c_b| - eps, 0)**2)."""
    eps = params.resolve_epsilon(n_voxels)
    gap = ad.clamp_min(ad.abs_(ad.as_tensor(count_a) - ad.as_tensor(count_b)) - eps, 0.0)
    return ad.exp(-params.gamma_v * gap * gap)


def volume_similarity_hard(labels, params):
    labels = np.asarray(labels)
    v = volume_similarity(hard_voxel_count(labels, 1), hard_voxel_count(labels, 2), params, labels.size)
    return v.item()


# -- knowledge base -------------------------------------------------------

def ground_sample(probs, params, rng):
    """Per-sample (connectedness, volume similarity, nestedness) truths."""
    labels = argmax_labels(probs)
    n_vox = int(np.prod(probs.shape[1:]))
    conn = connectedness_grounding(probs, params, labels=labels)
    c1, c2 = soft_voxel_count(probs, 1), soft_voxel_count(probs, 2)
    simvol = volume_similarity(c1, c2, params, n_vox)
    nest = ad.maximum(nested_soft(probs, 1, 2, params, rng, labels=labels),
                      nested_soft(probs, 2, 1, params, rng, labels=labels))
    return conn, simvol, nest


def ground_knowledge_base(probs, targets, params, rngs, quantifier_p=2.0, agg_p=2.0, include=None):
    """Assemble {phi_d, phi_c, phi_v, phi_n} from a ``(N, C, *spatial)`` batch.

    ``targets`` are label grids ``(N, *spatial)`` or one-hot ``(N, C, *spatial)``;
    ``rngs`` provides one generator per sample. ``include`` restricts the
    knowledge base to a subset of formula names (ablations).
    """
    probs = ad.as_tensor(probs)
    n = probs.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = np.asarray(targets)
    if t.shape != probs.shape:
        t = np.stack([one_hot(lab, probs.shape[1]) for lab in t])
    dice_truth = 1.0 - soft_dice_per_sample(probs, t)
    conns, vols, nests = [], [], []
    for i in range(n):
        c, v, nest = ground_sample(probs[i], params, rngs[i])
        conns.append(c)
        vols.append(v)
        nests.append(negate(nest))
    kb = KnowledgeBase(agg_p=agg_p)
    for name, truths in (("phi_d", dice_truth), ("phi_c", conns), ("phi_v", vols), ("phi_n", nests)):
        if include is None or name in include:
            kb.add(name, forall_pmean(truths, quantifier_p))
    return kb


def build_knowledge_base(images, targets, model, params, rngs, quantifier_p=2.0, agg_p=2.0):
    probs = model.forward(images)
    return ground_knowledge_base(probs, targets, params, rngs, quantifier_p, agg_p)
