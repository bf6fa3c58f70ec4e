"""Single SSDA run from an :class:`~dycelab.config.ExperimentConfig`."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, model, synthdata, trainer
from .losses import DyCEConfig
from .numkern import Rng


@dataclass
class RunResult:
    config: object
    state: trainer.TrainerState
    confusion: metrics.ConfusionMatrix
    iou: np.ndarray
    miou: float
    tail_miou: float
    reports: list

    def summary(self):
        sup = [r.supervised for r in self.reports]
        head = sup[: max(1, len(sup) // 10)]
        tail = sup[-max(1, len(sup) // 10):]
        return {
            "miou": self.miou,
            "tail_miou": self.tail_miou,
            "loss_start": float(np.mean(head)) if sup else float("nan"),
            "loss_end": float(np.mean(tail)) if sup else float("nan"),
        }


def tail_classes(n_classes, k=2):
    """Indices of the ``k`` rarest classes under the power-law class shares."""
    return list(range(n_classes - k, n_classes))


def build_dataset(cfg):
    d = cfg.data
    common = dict(
        h=d.h,
        w=d.w,
        raw_channels=d.raw_channels,
        n_classes=d.n_classes,
        tail_exponent=d.tail_exponent,
        noise=d.noise,
        separation=d.separation,
        world_seed=d.world_seed,
    )
    src = synthdata.DomainSpec(seed=cfg.seed * 2 + 1, shift=d.source_shift, n_images=d.n_source, **common)
    tgt = synthdata.DomainSpec(seed=cfg.seed * 2 + 2, shift=d.target_shift, n_images=d.n_test, **common)
    return synthdata.make_ssda(src, tgt, d.n_labeled, d.n_unlabeled, d.n_test)


def init_state(cfg):
    d, m, t = cfg.data, cfg.model, cfg.train
    # student and teacher share architecture but not initialization
    student = model.init_params(Rng(cfg.seed, stream=101), d.raw_channels, m.channels, d.n_classes)
    teacher = model.init_params(Rng(cfg.seed, stream=202), d.raw_channels, m.channels, d.n_classes)
    return trainer.TrainerState(
        student=student,
        teacher=teacher,
        alpha=t.alpha,
        threshold=t.threshold,
        lr=t.lr,
        lambda_ct=t.lambda_ct,
        dyce_cfg=DyCEConfig(t.omega, t.hard_fraction, allow_boundary=True),
        mode=t.mode,
        decay_interval=t.decay_interval,
        momentum=t.momentum,
        weight_decay=t.weight_decay,
        gate=t.gate,
        ct_normalize=t.ct_normalize,
        fusion=m.fusion,
        frozen=("enc_", "embed") if m.freeze_encoders else (),
    )


def run(cfg, log=None, dataset=None):
    dataset = dataset or build_dataset(cfg)
    state = init_state(cfg)
    t = cfg.train
    n_unl = t.batch_unlabeled if t.lambda_ct > 0 else 0
    stream = trainer.BatchStream(dataset, Rng(cfg.seed, stream=303), t.batch_labeled, n_unl, cfg.model.use_language)
    state, reports = trainer.train(state, stream, t.steps, log=log, log_every=t.log_every)
    params = state.student if t.eval_model == "student" else state.teacher
    cm = trainer.evaluate(params, dataset.target_test, cfg.data.n_classes, cfg.model.fusion, cfg.model.use_language)
    iou, m = metrics.miou(cm)
    tail = metrics.subset_mean(iou, tail_classes(cfg.data.n_classes))
    return RunResult(cfg, state, cm, iou, m, tail, reports)


def write_artifacts(result, out_dir):
    """Metrics CSV, checkpoint directory and summary JSON (log is streamed separately)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics.metrics_csv(result.confusion))
    cfg = result.config
    params = result.state.student if cfg.train.eval_model == "student" else result.state.teacher
    model.save_checkpoint(
        out / "checkpoint",
        params,
        {"seed": cfg.seed, "step": result.state.step, "config": cfg.to_dict(), "which": cfg.train.eval_model},
    )
    summary = dict(result.summary(), seed=cfg.seed, mode=cfg.train.mode, steps=result.state.step)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return out
