"""Dense language guidance: symmetric vision/language cross-attention.

Both modalities are projected to keys and values. The token-major attention
matrix ``A[t, p] = <lang_key[t], vis_key[p]> / sqrt(c)`` is normalized twice:
over pixels to pool vision values per token, and over tokens to pool
language values per pixel. The fused map is the token-by-pixel product of
the two attended feature sets.

The core functions accept arbitrary leading batch dimensions, i.e. vision
features ``[..., P, c]`` and language features ``[..., n_L, c]``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .numkern import ContractError, softmax, softmax_backward


@dataclass
class DlgParams:
    vk_W: np.ndarray
    vk_b: np.ndarray
    vv_W: np.ndarray
    vv_b: np.ndarray
    lk_W: np.ndarray
    lk_b: np.ndarray
    lv_W: np.ndarray
    lv_b: np.ndarray

    @property
    def channels(self):
        return self.vk_W.shape[0]

    @classmethod
    def identity(cls, c):
        eye, zero = np.eye(c), np.zeros(c)
        return cls(*(a.copy() for _ in range(4) for a in (eye, zero)))

    @classmethod
    def init(cls, rng, c, scale=None):
        scale = 1.0 / np.sqrt(c) if scale is None else scale
        arrs = []
        for _ in range(4):
            arrs.append(rng.normal((c, c), scale))
            arrs.append(np.zeros(c))
        return cls(*arrs)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def zeros_like(self):
        return DlgParams(*(np.zeros_like(a) for _, a in self.items()))


def _T(x):
    return np.swapaxes(x, -1, -2)


def _check_channels(fv, fl, params=None):
    if fv.shape[-1] != fl.shape[-1]:
        raise ContractError(f"channel mismatch: vision {fv.shape} vs language {fl.shape}")
    if params is not None and params.channels != fv.shape[-1]:
        raise ContractError(f"projection width {params.channels} does not match channels {fv.shape[-1]}")


def project_kv(fv, fl, params):
    """Return ``(vis_key, vis_value, lang_key, lang_value)``."""
    fv = np.asarray(fv, dtype=np.float64)
    fl = np.asarray(fl, dtype=np.float64)
    _check_channels(fv, fl, params)
    return (
        fv @ params.vk_W + params.vk_b,
        fv @ params.vv_W + params.vv_b,
        fl @ params.lk_W + params.lk_b,
        fl @ params.lv_W + params.lv_b,
    )


def attention_matrix(vis_key, lang_key):
    """Scaled token-by-pixel similarity, shape ``[..., n_L, P]``."""
    c = vis_key.shape[-1]
    if c == 0:
        raise ContractError("attention over zero channels")
    if lang_key.shape[-1] != c:
        raise ContractError(f"key width mismatch: {vis_key.shape} vs {lang_key.shape}")
    return (lang_key @ _T(vis_key)) / np.sqrt(c)


def attend(A, vis_value, lang_value):
    """Language-attended vision ``[n_L, c]`` and vision-attended language ``[P, c]``."""
    n_tok, n_pix = A.shape[-2:]
    if vis_value.shape[-2] != n_pix or lang_value.shape[-2] != n_tok:
        raise ContractError(
            f"attend shape mismatch: A {A.shape}, vision values {vis_value.shape}, "
            f"language values {lang_value.shape}"
        )
    w_pix = softmax(A, axis=-1)
    w_tok = softmax(_T(A), axis=-1)
    return w_pix @ vis_value, w_tok @ lang_value


def fuse(vis_att, lang_att):
    """Token-by-pixel product ``vis_att @ lang_att.T``."""
    if vis_att.shape[-1] != lang_att.shape[-1]:
        raise ContractError(f"fuse channel mismatch: {vis_att.shape} vs {lang_att.shape}")
    return vis_att @ _T(lang_att)


def dlg_core(fv, fl, params):
    """Forward on flattened inputs; returns ``(F_M, cache)``."""
    vk, vv, lk, lv = project_kv(fv, fl, params)
    A = attention_matrix(vk, lk)
    w_pix = softmax(A, axis=-1)
    w_tok = softmax(_T(A), axis=-1)
    fva = w_pix @ vv
    fla = w_tok @ lv
    fm = fva @ _T(fla)
    cache = dict(fv=fv, fl=fl, vk=vk, vv=vv, lk=lk, lv=lv, A=A, w_pix=w_pix, w_tok=w_tok, fva=fva, fla=fla)
    return fm, cache


def _linear_back(x, g, W):
    lead = tuple(range(g.ndim - 1))
    gW = (x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
    return g @ W.T, gW, g.sum(axis=lead)


def dlg_core_backward(grad_fm, cache, params):
    """Returns ``(grad_fv, grad_fl, DlgParams of gradients)``."""
    c = cache["vk"].shape[-1]
    fva, fla = cache["fva"], cache["fla"]
    g_fva = grad_fm @ fla
    g_fla = _T(grad_fm) @ fva
    g_wpix = g_fva @ _T(cache["vv"])
    g_vv = _T(cache["w_pix"]) @ g_fva
    g_wtok = g_fla @ _T(cache["lv"])
    g_lv = _T(cache["w_tok"]) @ g_fla
    g_A = softmax_backward(cache["w_pix"], g_wpix) + _T(softmax_backward(cache["w_tok"], g_wtok))
    g_lk = (g_A @ cache["vk"]) / np.sqrt(c)
    g_vk = (_T(g_A) @ cache["lk"]) / np.sqrt(c)
    return _project_back(cache, params, g_vk, g_vv, g_lk, g_lv)


def _project_back(cache, params, g_vk, g_vv, g_lk, g_lv):
    fv, fl = cache["fv"], cache["fl"]
    dfv1, gvkW, gvkb = _linear_back(fv, g_vk, params.vk_W)
    dfv2, gvvW, gvvb = _linear_back(fv, g_vv, params.vv_W)
    dfl1, glkW, glkb = _linear_back(fl, g_lk, params.lk_W)
    dfl2, glvW, glvb = _linear_back(fl, g_lv, params.lv_W)
    grads = DlgParams(gvkW, gvkb, gvvW, gvvb, glkW, glkb, glvW, glvb)
    return dfv1 + dfv2, dfl1 + dfl2, grads


def generic_core(fv, fl, params):
    """Single-modality comparator: language only shapes the attention weights.

    Each token pools vision values, and the fused map correlates the pooled
    vectors with each pixel's own vision value. The language value
    projection is unused. Used only by ablations and tests.
    """
    vk, vv, lk, lv = project_kv(fv, fl, params)
    A = attention_matrix(vk, lk)
    w_pix = softmax(A, axis=-1)
    fva = w_pix @ vv
    fm = fva @ _T(vv)
    cache = dict(fv=fv, fl=fl, vk=vk, vv=vv, lk=lk, lv=lv, A=A, w_pix=w_pix, fva=fva)
    return fm, cache


def generic_core_backward(grad_fm, cache, params):
    c = cache["vk"].shape[-1]
    fva, vv = cache["fva"], cache["vv"]
    g_fva = grad_fm @ vv
    g_vv = _T(grad_fm) @ fva + _T(cache["w_pix"]) @ g_fva
    g_A = softmax_backward(cache["w_pix"], g_fva @ _T(vv))
    g_lk = (g_A @ cache["vk"]) / np.sqrt(c)
    g_vk = (_T(g_A) @ cache["lk"]) / np.sqrt(c)
    return _project_back(cache, params, g_vk, g_vv, g_lk, np.zeros_like(cache["lv"]))


def dlg_forward(fv, fl, params):
    """Full fusion for one image.

    ``fv`` is ``[h, w, c]`` vision features and ``fl`` is ``[n_L, c]``
    language features. Returns ``F_M`` of shape ``[n_L, h, w]`` together with
    the intermediate tensors needed by :func:`dlg_backward`.
    """
    fv = np.asarray(fv, dtype=np.float64)
    fl = np.asarray(fl, dtype=np.float64)
    if fv.ndim != 3 or fl.ndim != 2:
        raise ContractError(f"expected [h, w, c] and [n_L, c], got {fv.shape} and {fl.shape}")
    h, w, c = fv.shape
    fm, cache = dlg_core(fv.reshape(h * w, c), fl, params)
    cache["hw"] = (h, w)
    return fm.reshape(fl.shape[0], h, w), cache


def dlg_backward(grad_fm, cache, params):
    """Gradients of a scalar loss w.r.t. ``fv`` ``[h, w, c]``, ``fl`` and params."""
    h, w = cache["hw"]
    g = np.asarray(grad_fm, dtype=np.float64).reshape(-1, h * w)
    gfv, gfl, gp = dlg_core_backward(g, cache, params)
    return gfv.reshape(h, w, -1), gfl, gp
