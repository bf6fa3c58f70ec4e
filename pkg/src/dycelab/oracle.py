"""Independent checks: central finite differences and scalar-loop
re-implementations of the vectorized forward passes.

Nothing in the brute-force functions calls into :mod:`dycelab.losses` or
:mod:`dycelab.dlg`; they are written from the defining sums directly.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import dlg, losses, model
from .losses import IGNORE_INDEX, BatchPrediction, DyCEConfig
from .numkern import ContractError, Rng


def finite_diff(f, x, eps=1e-6, floor=1e-8):
    """Central-difference gradient of scalar ``f`` at ``x``.

    The step for coordinate ``i`` is ``max(eps * |x_i|, floor)``.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = max(eps * abs(orig), floor)
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            coord = tuple(int(j) for j in np.unravel_index(i, x.shape))
            raise ContractError(f"non-finite evaluation at coordinate {coord}")
        grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(analytic, numeric, tiny=1e-12):
    """Norm-wise relative error ``max|a - n| / max(max|a|, max|n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), tiny)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def brute_force_ce(probs, labels):
    total, count = 0.0, 0
    for i in range(len(labels)):
        if labels[i] == IGNORE_INDEX:
            continue
        total -= math.log(max(probs[i][labels[i]], 1e-300))
        count += 1
    if count == 0:
        raise ContractError("empty effective batch")
    return total / count


def brute_force_dyce(probs, labels, omega, hard_fraction):
    n_classes = len(probs[0])
    # (1) per-instance CE
    inst = []
    for i in range(len(labels)):
        if labels[i] != IGNORE_INDEX:
            inst.append((-math.log(max(probs[i][labels[i]], 1e-300)), i))
    if not inst:
        raise ContractError("empty effective batch")
    # (2) hardest instances, lower index first on ties
    k = max(1, math.ceil(hard_fraction * len(inst) - 1e-9))
    inst.sort(key=lambda li: (-li[0], li[1]))
    H = sorted(i for _, i in inst[:k])
    # (3) class counts inside H
    f_c = [0] * n_classes
    for i in H:
        f_c[labels[i]] += 1
    f_H = len(H)
    # (4) weighted sum
    total = 0.0
    for c in range(n_classes):
        if f_c[c] == 0:
            continue
        inner = 0.0
        for i in H:
            if labels[i] == c:
                inner += math.log(max(probs[i][c], 1e-300))
        total += inner / f_c[c] ** (1.0 - omega)
    return -total / f_H**omega


def brute_force_contrastive(img, txt, tau):
    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    n = len(img)
    total = 0.0
    for i in range(n):
        sims = [cos(img[i], txt[j]) / tau for j in range(n)]
        m = max(sims)
        log_z = m + math.log(sum(math.exp(s - m) for s in sims))
        total -= sims[i] - log_z
    return total


def brute_force_dlg(fv, fl, params):
    """Scalar-loop DLG forward; ``fv`` is ``[h, w, c]``, returns ``[n_L, h, w]``."""
    h, w, c = fv.shape
    n_tok = fl.shape[0]
    P = h * w
    pix = [fv[r, q] for r in range(h) for q in range(w)]

    def lin(vec, W, b):
        return [sum(vec[i] * W[i][j] for i in range(c)) + b[j] for j in range(c)]

    vk = [lin(v, params.vk_W, params.vk_b) for v in pix]
    vv = [lin(v, params.vv_W, params.vv_b) for v in pix]
    lk = [lin(t, params.lk_W, params.lk_b) for t in fl]
    lv = [lin(t, params.lv_W, params.lv_b) for t in fl]
    A = [[sum(lk[t][j] * vk[p][j] for j in range(c)) / math.sqrt(c) for p in range(P)] for t in range(n_tok)]

    def smax(row):
        m = max(row)
        e = [math.exp(v - m) for v in row]
        s = sum(e)
        return [v / s for v in e]

    w_pix = [smax(A[t]) for t in range(n_tok)]
    w_tok = [smax([A[t][p] for t in range(n_tok)]) for p in range(P)]
    fva = [[sum(w_pix[t][p] * vv[p][j] for p in range(P)) for j in range(c)] for t in range(n_tok)]
    fla = [[sum(w_tok[p][t] * lv[t][j] for t in range(n_tok)) for j in range(c)] for p in range(P)]
    out = np.zeros((n_tok, h, w))
    for t in range(n_tok):
        for p in range(P):
            out[t, p // w, p % w] = sum(fva[t][j] * fla[p][j] for j in range(c))
    return out


# ---------------------------------------------------------------------------
# random desk-scale instances

def random_batch(rng, S=None, n_classes=None, lo=0.01, hi=0.99):
    """Random probability rows with every entry inside ``[lo, hi]``."""
    S = S or int(rng.integers(2, 9))
    n_classes = n_classes or int(rng.integers(2, 6))
    while True:
        raw = rng.uniform((S, n_classes), 0.05, 1.0)
        probs = raw / raw.sum(axis=1, keepdims=True)
        if probs.min() >= lo and probs.max() <= hi:
            break
    labels = rng.integers(0, n_classes, S)
    return BatchPrediction(probs, labels)


def _loss_fd(fn, batch):
    res = fn(batch)

    def f(p):
        return fn(BatchPrediction(p, batch.labels)).value

    return res.grad_probs, finite_diff(f, batch.probs)


def _check_ce(rng):
    return _loss_fd(losses.ce_loss, random_batch(rng))


def _check_wce(rng):
    b = random_batch(rng)
    wts = rng.uniform(b.n_classes, 0.2, 3.0)
    return _loss_fd(lambda bb: losses.wce_loss(bb, wts), b)


def _check_focal(rng):
    gamma = float(rng.uniform(None, 0.0, 3.0))
    return _loss_fd(lambda bb: losses.focal_loss(bb, gamma), random_batch(rng))


def _check_dyce(rng):
    cfg = DyCEConfig(omega=float(rng.uniform(None, 0.05, 0.95)), hard_fraction=float(rng.uniform(None, 0.2, 1.0)))
    return _loss_fd(lambda bb: losses.dyce_loss(bb, cfg), random_batch(rng))


def _check_contrastive(rng):
    n, d = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    v, t = rng.normal((n, d)), rng.normal((n, d))
    tau = float(rng.uniform(None, 0.2, 2.0))
    res = losses.contrastive_loss(v, t, tau)
    gv = finite_diff(lambda x: losses.contrastive_loss(x, t, tau).value, v)
    gt = finite_diff(lambda x: losses.contrastive_loss(v, x, tau).value, t)
    return np.concatenate([res.grad_img.ravel(), res.grad_txt.ravel()]), np.concatenate([gv.ravel(), gt.ravel()])


def _check_consistency(rng):
    B, h, w, n_classes = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))

    def pm():
        raw = rng.uniform((B, h, w, n_classes), 0.05, 1.0)
        return raw / raw.sum(axis=-1, keepdims=True)

    s, t = pm(), pm()
    # keep the student gate away from the threshold so differencing cannot cross it
    th = float(np.quantile(t.max(axis=-1), 0.5)) - 1e-3
    gate = "teacher" if rng.uniform() < 0.5 else "student"
    if gate == "student":
        smax = np.sort(s.max(axis=-1).ravel())
        gaps = np.diff(smax)
        k = int(np.argmax(gaps))
        th = float(smax[k] + gaps[k] / 2)
    norm = ("masked", "pixels", "images")[int(rng.integers(0, 3))]
    res = losses.consistency_loss(s, t, th, gate=gate, normalize=norm)
    num = finite_diff(lambda x: losses.consistency_loss(x, t, th, gate=gate, normalize=norm).value, s)
    return res.grad_probs, num


def _random_dlg_instance(rng):
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    c, n_tok = int(rng.integers(2, 9)), int(rng.integers(1, 5))
    fv = rng.normal((h, w, c))
    fl = rng.normal((n_tok, c))
    params = dlg.DlgParams.init(rng, c)
    for name, arr in params.items():
        if name.endswith("_b"):
            arr[:] = rng.normal(arr.shape, 0.3)
    return fv, fl, params


def _check_dlg(rng):
    fv, fl, params = _random_dlg_instance(rng)
    fm, cache = dlg.dlg_forward(fv, fl, params)
    weight = rng.normal(fm.shape)
    g_fv, g_fl, g_p = dlg.dlg_backward(weight, cache, params)

    def scalar(fv_, fl_, p_):
        return float((dlg.dlg_forward(fv_, fl_, p_)[0] * weight).sum())

    ana, num = [g_fv.ravel(), g_fl.ravel()], []
    num.append(finite_diff(lambda x: scalar(x, fl, params), fv).ravel())
    num.append(finite_diff(lambda x: scalar(fv, x, params), fl).ravel())
    for name, arr in params.items():
        ana.append(getattr(g_p, name).ravel())

        def f(x, name=name):
            p2 = dlg.DlgParams(**{k: (x if k == name else v) for k, v in params.items()})
            return scalar(fv, fl, p2)

        num.append(finite_diff(f, arr).ravel())
    return np.concatenate(ana), np.concatenate(num)


def random_model_instance(rng, fusion="dense"):
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    raw, c, n_classes = int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(2, 6))
    params = model.init_params(rng, raw, c, n_classes, n_tokens=int(rng.integers(1, 5)))
    for name, arr in params.tensors().items():
        if name.endswith("_b"):
            arr[:] = rng.normal(arr.shape, 0.3)
    B = int(rng.integers(1, 3))
    images = rng.normal((B, h, w, raw))
    tokens = rng.integers(0, params.vocab, (B, params.n_tokens))
    return images, tokens, params


def _conditioned_model_instance(rng, fusion, lo=0.01, hi=0.99):
    # resample until every target probability is unsaturated, as for the losses
    while True:
        images, tokens, params = random_model_instance(rng, fusion)
        probs, cache = model.forward_batch(images, tokens, params, fusion)
        labels = rng.integers(0, params.n_classes, probs.shape[:-1])
        pt = np.take_along_axis(probs, labels[..., None], -1)
        if pt.min() >= lo and pt.max() <= hi:
            return images, tokens, params, probs, cache, labels


def _check_model(rng, fusion="dense"):
    images, tokens, params, probs, cache, labels = _conditioned_model_instance(rng, fusion)
    res = losses.supervised_loss(probs, labels, "CE")
    grads = model.backward_batch(res.grad_probs, cache, params)
    ana, num = [], []
    tensors = params.tensors()
    for name, arr in tensors.items():

        def f(x, name=name):
            t2 = dict(tensors)
            t2[name] = x
            p, _ = model.forward_batch(images, tokens, model.ModelParams.from_tensors(t2), fusion)
            return losses.supervised_loss(p, labels, "CE").value

        ana.append(grads.tensors()[name].ravel())
        num.append(finite_diff(f, arr).ravel())
    return np.concatenate(ana), np.concatenate(num)


def _check_model_generic(rng):
    return _check_model(rng, fusion="generic")


# component -> (check, tolerance)
GRADCHECKS = {
    "ce": (_check_ce, 1e-6),
    "wce": (_check_wce, 1e-6),
    "focal": (_check_focal, 1e-6),
    "dyce": (_check_dyce, 1e-6),
    "contrastive": (_check_contrastive, 1e-6),
    "consistency": (_check_consistency, 1e-6),
    "dlg": (_check_dlg, 1e-6),
    "model": (_check_model, 1e-5),
    "model_generic": (_check_model_generic, 1e-5),
}


def run_gradcheck_suite(n_instances=100, seed=0, inject=None, components=None):
    """Run every registered gradient check ``n_instances`` times.

    ``inject`` names a component whose analytic gradient is sign-flipped
    before comparison (fault-injection mode). Returns a list of dicts with
    ``component``, ``worst_rel_error``, ``tolerance``, ``passed``,
    ``instances`` and ``seconds``.
    """
    report = []
    for k, name in enumerate(components or GRADCHECKS):
        check, tol = GRADCHECKS[name]
        rng = Rng(seed, stream=k)
        worst = 0.0
        t0 = time.perf_counter()
        for _ in range(n_instances):
            ana, num = check(rng)
            if name == inject:
                ana = -ana
            worst = max(worst, rel_error(ana, num))
        report.append(
            dict(
                component=name,
                worst_rel_error=worst,
                tolerance=tol,
                passed=worst <= tol,
                instances=n_instances,
                seconds=time.perf_counter() - t0,
            )
        )
    return report
