"""Training objectives with closed-form gradients.

All losses here consume probabilities, not logits: ``grad_probs`` is the
derivative with respect to each ``p[i, c]`` treated as a free variable. The
model module chains these through its softmax.

The DyCE gradient is the exact derivative of the DyCE value, so it carries
the same ``1/p`` factor as plain CE, scaled by the mined class weight.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numkern import ContractError

IGNORE_INDEX = 255
PROB_FLOOR = 1e-300


@dataclass
class BatchPrediction:
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2:
            raise ContractError(f"probs must be S x N_C, got shape {self.probs.shape}")
        S, n_classes = self.probs.shape
        if S < 1 or n_classes < 2:
            raise ContractError(f"need S >= 1 and N_C >= 2, got {self.probs.shape}")
        if self.labels.shape != (S,):
            raise ContractError(f"labels shape {self.labels.shape} does not match S={S}")
        bad = (self.labels != IGNORE_INDEX) & ((self.labels < 0) | (self.labels >= n_classes))
        if bad.any():
            raise ContractError(f"label out of range at instance {int(np.flatnonzero(bad)[0])}")

    @property
    def n_classes(self):
        return self.probs.shape[1]

    def valid_indices(self):
        return np.flatnonzero(self.labels != IGNORE_INDEX)


@dataclass
class MinedSubset:
    indices: np.ndarray
    f_H: int
    f_c: np.ndarray


@dataclass
class DyCEConfig:
    omega: float = 0.5
    hard_fraction: float = 0.5
    allow_boundary: bool = False

    def __post_init__(self):
        lo_ok = self.omega > 0 or (self.allow_boundary and self.omega == 0)
        hi_ok = self.omega < 1 or (self.allow_boundary and self.omega == 1)
        if not (lo_ok and hi_ok):
            raise ContractError(f"omega must lie in (0, 1), got {self.omega}")
        if not 0 < self.hard_fraction <= 1:
            raise ContractError(f"hard_fraction must lie in (0, 1], got {self.hard_fraction}")


@dataclass
class LossResult:
    value: float
    grad_probs: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def to_json(self):
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.integer,)):
                return int(v)
            if isinstance(v, (np.floating,)):
                return float(v)
            return v

        payload = {"value": float(self.value)}
        payload.update({k: conv(v) for k, v in self.diagnostics.items()})
        return json.dumps(payload, sort_keys=True)


def _target_probs(batch, idx):
    p = batch.probs[idx, batch.labels[idx]]
    clamped = p < PROB_FLOOR
    return np.where(clamped, PROB_FLOOR, p), int(clamped.sum())


def _effective(batch):
    idx = batch.valid_indices()
    if idx.size == 0:
        raise ContractError("empty effective batch")
    return idx


def per_instance_ce(batch):
    """-log p of the target class for every non-ignored instance."""
    idx = _effective(batch)
    p, _ = _target_probs(batch, idx)
    return idx, -np.log(p)


def ce_loss(batch):
    idx = _effective(batch)
    S = idx.size
    p, n_clamped = _target_probs(batch, idx)
    grad = np.zeros_like(batch.probs)
    grad[idx, batch.labels[idx]] = -1.0 / (S * p)
    value = -np.log(p).sum() / S
    return LossResult(float(value), grad, {"clamp_count": n_clamped, "S": S})


def mine_hard_subset(batch, hard_fraction):
    if not 0 < hard_fraction <= 1:
        raise ContractError(f"hard_fraction must lie in (0, 1], got {hard_fraction}")
    idx, losses = per_instance_ce(batch)
    S = idx.size
    # guard against 0.3 * 10 == 3.0000000000000004
    k = max(1, math.ceil(hard_fraction * S - 1e-9))
    # stable sort on -loss keeps lower batch index first among ties
    order = np.argsort(-losses, kind="stable")[:k]
    chosen = np.sort(idx[order])
    f_c = np.bincount(batch.labels[chosen], minlength=batch.n_classes)
    return MinedSubset(indices=chosen, f_H=int(chosen.size), f_c=f_c)


def dyce_weights(f_H, f_c, omega):
    """Per-class factor 1 / (f_H^omega * f_c^(1-omega)); zero for absent classes."""
    f_c = np.asarray(f_c, dtype=np.float64)
    w = np.zeros_like(f_c)
    present = f_c > 0
    w[present] = 1.0 / (f_H**omega * f_c[present] ** (1.0 - omega))
    return w


def dyce_loss(batch, cfg):
    sub = mine_hard_subset(batch, cfg.hard_fraction)
    H = sub.indices
    y = batch.labels[H]
    p, n_clamped = _target_probs(batch, H)
    w = dyce_weights(sub.f_H, sub.f_c, cfg.omega)[y]
    grad = np.zeros_like(batch.probs)
    grad[H, y] = -w / p
    per_class = np.zeros(batch.n_classes)
    np.add.at(per_class, y, -w * np.log(p))
    value = per_class.sum()
    diag = {
        "clamp_count": n_clamped,
        "S": int(batch.valid_indices().size),
        "f_H": sub.f_H,
        "f_c": sub.f_c,
        "per_class": per_class,
        "indices": H,
    }
    return LossResult(float(value), grad, diag)


def wce_loss(batch, class_weights):
    wts = np.asarray(class_weights, dtype=np.float64)
    if wts.shape != (batch.n_classes,):
        raise ContractError(f"class_weights must have length {batch.n_classes}")
    if (wts <= 0).any():
        raise ContractError("class weights must be positive")
    idx = _effective(batch)
    S = idx.size
    y = batch.labels[idx]
    p, n_clamped = _target_probs(batch, idx)
    grad = np.zeros_like(batch.probs)
    grad[idx, y] = -wts[y] / (S * p)
    value = -(wts[y] * np.log(p)).sum() / S
    return LossResult(float(value), grad, {"clamp_count": n_clamped, "S": S})


def focal_loss(batch, gamma=2.0):
    if gamma < 0:
        raise ContractError(f"gamma must be nonnegative, got {gamma}")
    idx = _effective(batch)
    S = idx.size
    y = batch.labels[idx]
    p, n_clamped = _target_probs(batch, idx)
    q = 1.0 - p
    logp = np.log(p)
    mod = q**gamma
    # d/dp of -(1-p)^g log p; the first term vanishes at p == 1 for every g
    with np.errstate(divide="ignore", invalid="ignore"):
        d_mod = np.where(q > 0, gamma * q ** (gamma - 1.0) * logp, 0.0) if gamma > 0 else 0.0
    grad = np.zeros_like(batch.probs)
    grad[idx, y] = (d_mod - mod / p) / S
    value = -(mod * logp).sum() / S
    return LossResult(float(value), grad, {"clamp_count": n_clamped, "S": S})


@dataclass
class ContrastiveResult:
    value: float
    grad_img: np.ndarray
    grad_txt: np.ndarray


def contrastive_loss(img_emb, txt_emb, tau, normalize=False):
    """Image-to-text InfoNCE over cosine similarities at temperature ``tau``.

    Summed over the N pairs unless ``normalize`` is set, in which case the
    value and gradients are divided by N.
    """
    v = np.asarray(img_emb, dtype=np.float64)
    t = np.asarray(txt_emb, dtype=np.float64)
    if v.ndim != 2 or v.shape != t.shape or v.shape[0] < 1:
        raise ContractError(f"embedding shapes must match and be N x d, got {v.shape} and {t.shape}")
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    nt = np.linalg.norm(t, axis=1, keepdims=True)
    if (nv == 0).any() or (nt == 0).any():
        raise ContractError("degenerate embedding")
    vh, th = v / nv, t / nt
    logits = (vh @ th.T) / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    value = -(np.diag(shifted) - log_z).sum()
    P = np.exp(shifted - log_z[:, None])
    G = (P - np.eye(len(v))) / tau
    g_vh = G @ th
    g_th = G.T @ vh
    g_v = (g_vh - vh * (vh * g_vh).sum(axis=1, keepdims=True)) / nv
    g_t = (g_th - th * (th * g_th).sum(axis=1, keepdims=True)) / nt
    if normalize:
        n = len(v)
        return ContrastiveResult(float(value) / n, g_v / n, g_t / n)
    return ContrastiveResult(float(value), g_v, g_t)


def consistency_loss(student, teacher, threshold, gate="teacher", normalize="masked"):
    """Confidence-gated CE between student probabilities and teacher pseudo-labels.

    ``student`` and ``teacher`` are ``[B, h, w, N_C]`` probability maps. The
    pseudo-label is the teacher argmax; the gate compares either the teacher
    or the student max probability against ``threshold``. ``normalize``
    selects the divisor: ``"masked"`` (gated pixel count), ``"pixels"`` (all
    unlabeled pixels) or ``"images"`` (number of unlabeled images).
    """
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 4:
        raise ContractError(f"student/teacher shape mismatch: {s.shape} vs {t.shape}")
    n_classes = s.shape[-1]
    sf = s.reshape(-1, n_classes)
    tf = t.reshape(-1, n_classes)
    if gate not in ("teacher", "student"):
        raise ContractError(f"gate must be 'teacher' or 'student', got {gate!r}")
    pseudo = tf.argmax(axis=1)
    conf = (tf if gate == "teacher" else sf).max(axis=1)
    mask = conf >= threshold
    n_mask = int(mask.sum())
    if normalize == "masked":
        denom = n_mask
    elif normalize == "pixels":
        denom = sf.shape[0]
    elif normalize == "images":
        denom = s.shape[0]
    else:
        raise ContractError(f"unknown normalize mode {normalize!r}")
    grad = np.zeros_like(sf)
    diag = {"n_masked": n_mask, "n_pixels": int(sf.shape[0]), "clamp_count": 0}
    if n_mask == 0:
        return LossResult(0.0, grad.reshape(s.shape), diag)
    rows = np.flatnonzero(mask)
    p = sf[rows, pseudo[rows]]
    clamped = p < PROB_FLOOR
    p = np.where(clamped, PROB_FLOOR, p)
    diag["clamp_count"] = int(clamped.sum())
    grad[rows, pseudo[rows]] = -1.0 / (denom * p)
    value = -np.log(p).sum() / denom
    return LossResult(float(value), grad.reshape(s.shape), diag)


def supervised_loss(student, labels, mode="CE", cfg=None):
    """Pixel-level CE or DyCE for a ``[B, h, w, N_C]`` map against ``[B, h, w]`` labels."""
    s = np.asarray(student, dtype=np.float64)
    lab = np.asarray(labels)
    if s.shape[:-1] != lab.shape:
        raise ContractError(f"prediction shape {s.shape} does not match labels {lab.shape}")
    batch = BatchPrediction(s.reshape(-1, s.shape[-1]), lab.reshape(-1))
    mode = mode.upper()
    if mode == "CE":
        res = ce_loss(batch)
    elif mode == "DYCE":
        res = dyce_loss(batch, cfg or DyCEConfig())
    else:
        raise ContractError(f"unknown supervised mode {mode!r}")
    res.grad_probs = res.grad_probs.reshape(s.shape)
    return res
