"""Student/teacher training: supervised loss on labeled images, gated
consistency on unlabeled images, SGD on the student, EMA on the teacher."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses, model
from .losses import DyCEConfig
from .numkern import ContractError

# Th and alpha follow the reference setup; lambda_ct, omega and hard_fraction are our own picks.
DEFAULT_THRESHOLD = 0.95
DEFAULT_ALPHA = 0.999
DEFAULT_LR = 1e-4
DEFAULT_DECAY_INTERVAL = 1000


class NumericError(RuntimeError):
    pass


@dataclass
class TrainerState:
    student: model.ModelParams
    teacher: model.ModelParams
    step: int = 0
    alpha: float = DEFAULT_ALPHA
    threshold: float = DEFAULT_THRESHOLD
    lr: float = DEFAULT_LR
    lambda_ct: float = 1.0
    dyce_cfg: DyCEConfig = field(default_factory=DyCEConfig)
    mode: str = "DyCE"
    decay_interval: int = DEFAULT_DECAY_INTERVAL
    momentum: float = 0.0
    weight_decay: float = 0.0
    gate: str = "teacher"
    ct_normalize: str = "masked"
    fusion: str = "dense"
    frozen: tuple = ()
    velocity: model.ModelParams | None = None

    def __post_init__(self):
        s, t = self.student.tensors(), self.teacher.tensors()
        if any(s[k].shape != t[k].shape for k in s):
            raise ContractError("student and teacher parameter shapes differ")
        if not 0 <= self.alpha <= 1:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode.upper() not in ("CE", "DYCE"):
            raise ContractError(f"mode must be CE or DyCE, got {self.mode!r}")


@dataclass
class SsdaBatch:
    """Labeled ``(images, tokens, labels)`` and unlabeled ``(images, tokens)`` arrays."""

    labeled: tuple | None = None
    unlabeled: tuple | None = None

    def __post_init__(self):
        empty_l = self.labeled is None or len(self.labeled[0]) == 0
        empty_u = self.unlabeled is None or len(self.unlabeled[0]) == 0
        if empty_l and empty_u:
            raise ContractError("batch has neither labeled nor unlabeled samples")
        if empty_l:
            self.labeled = None
        if empty_u:
            self.unlabeled = None


@dataclass
class StepReport:
    step: int
    lr: float
    total: float
    supervised: float
    consistency: float
    f_H: int | None = None
    f_c: list | None = None
    clamp_count: int = 0
    n_masked: int = 0

    def to_json(self, **extra):
        d = dict(self.__dict__)
        d.update(extra)
        return json.dumps(d, sort_keys=True)


def lr_schedule(step, base_lr, decay_interval=DEFAULT_DECAY_INTERVAL):
    if step < 0:
        raise ContractError("step must be nonnegative")
    return base_lr * 0.9 ** (step / decay_interval)


def ema_update(state):
    """Teacher <- alpha * teacher + (1 - alpha) * student, tensor by tensor."""
    a = state.alpha
    teacher = state.teacher.map(lambda t, s: a * t + (1.0 - a) * s, state.student)
    return replace(state, teacher=teacher)


def _check_finite(grads):
    for name, g in grads.tensors().items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")


def _add(a, b, scale=1.0):
    return a.map(lambda x, y: x + scale * y, b)


def train_step(state, batch):
    lr = lr_schedule(state.step, state.lr, state.decay_interval)
    student = state.student
    grads = student.map(np.zeros_like)
    report = StepReport(step=state.step, lr=lr, total=0.0, supervised=0.0, consistency=0.0)

    if batch.labeled is not None:
        images, tokens, labels = batch.labeled
        probs, cache = model.forward_batch(images, tokens, student, state.fusion)
        sup = losses.supervised_loss(probs, labels, state.mode, state.dyce_cfg)
        grads = _add(grads, model.backward_batch(sup.grad_probs, cache, student))
        report.supervised = sup.value
        report.clamp_count += sup.diagnostics["clamp_count"]
        if "f_H" in sup.diagnostics:
            report.f_H = int(sup.diagnostics["f_H"])
            report.f_c = [int(v) for v in sup.diagnostics["f_c"]]

    if batch.unlabeled is not None:
        images, tokens = batch.unlabeled
        # teacher output is a constant target: no cache, no backward
        t_probs, _ = model.forward_batch(images, tokens, state.teacher, state.fusion)
        s_probs, cache = model.forward_batch(images, tokens, student, state.fusion)
        ct = losses.consistency_loss(s_probs, t_probs, state.threshold, state.gate, state.ct_normalize)
        if state.lambda_ct != 0 and ct.diagnostics["n_masked"]:
            grads = _add(grads, model.backward_batch(ct.grad_probs, cache, student), state.lambda_ct)
        report.consistency = ct.value
        report.n_masked = ct.diagnostics["n_masked"]
        report.clamp_count += ct.diagnostics["clamp_count"]

    report.total = report.supervised + state.lambda_ct * report.consistency
    _check_finite(grads)

    if state.frozen:
        grads = model.ModelParams.from_tensors(
            {k: (np.zeros_like(v) if k.startswith(state.frozen) else v) for k, v in grads.tensors().items()}
        )
    if state.weight_decay:
        grads = _add(grads, student, state.weight_decay)
    velocity = state.velocity
    if state.momentum:
        velocity = grads if velocity is None else velocity.map(lambda v, g: state.momentum * v + g, grads)
        grads = velocity
    new_student = student.map(lambda p, g: p - lr * g, grads)
    new_state = replace(state, student=new_student, velocity=velocity)
    new_state = ema_update(new_state)
    new_state.step = state.step + 1
    return new_state, report


def evaluate(params, split, n_classes, fusion="dense", use_language=True, batch_size=64):
    """Confusion matrix of ``params`` on an :class:`~dycelab.synthdata.ImageSet`."""
    from .metrics import ConfusionMatrix

    cm = ConfusionMatrix(n_classes)
    tokens = token_slots(split.captions, n_classes, use_language)
    for lo in range(0, len(split), batch_size):
        hi = lo + batch_size
        pred = model.predict(split.images[lo:hi], tokens[lo:hi], params, fusion)
        cm.update(pred, split.labels[lo:hi])
    return cm


def token_slots(captions, n_classes, use_language=True):
    if not use_language:
        return np.full((len(captions), n_classes), n_classes, dtype=np.int64)
    return np.stack([model.caption_slots(c, n_classes) for c in captions]) if captions else np.zeros(
        (0, n_classes), dtype=np.int64
    )


class BatchStream:
    """Deterministic batch sampler mixing source and labeled-target images uniformly."""

    def __init__(self, dataset, rng, batch_labeled, batch_unlabeled, use_language=True):
        n_classes = dataset.target_spec.n_classes
        lab_sets = [s for s in (dataset.source, dataset.target_labeled) if len(s)]
        self.lab_images = np.concatenate([s.images for s in lab_sets])
        self.lab_labels = np.concatenate([s.labels for s in lab_sets])
        self.lab_tokens = token_slots([c for s in lab_sets for c in s.captions], n_classes, use_language)
        unl = dataset.target_unlabeled
        self.unl_images = unl.images
        self.unl_tokens = token_slots(unl.captions, n_classes, use_language)
        self.rng = rng
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled

    def next(self):
        labeled = unlabeled = None
        if self.batch_labeled and len(self.lab_images):
            i = self.rng.integers(0, len(self.lab_images), self.batch_labeled)
            labeled = (self.lab_images[i], self.lab_tokens[i], self.lab_labels[i])
        if self.batch_unlabeled and len(self.unl_images):
            j = self.rng.integers(0, len(self.unl_images), self.batch_unlabeled)
            unlabeled = (self.unl_images[j], self.unl_tokens[j])
        return SsdaBatch(labeled, unlabeled)


def train(state, stream, steps, log=None, log_every=1):
    """Run ``steps`` train steps; ``log`` is an optional writable text stream for JSON lines."""
    t0 = time.perf_counter()
    reports = []
    for _ in range(steps):
        state, rep = train_step(state, stream.next())
        reports.append(rep)
        if log is not None and rep.step % log_every == 0:
            log.write(rep.to_json(wall_time=round(time.perf_counter() - t0, 6)) + "\n")
    return state, reports
