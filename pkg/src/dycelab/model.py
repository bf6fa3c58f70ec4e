"""Toy segmentation network: linear vision encoder, token embedding table,
dense language guidance, per-pixel linear decoder and softmax.

Captions arrive as sorted lists of present-class token ids. They are laid
out into a fixed number of slots (one per class, ``PAD`` where a class is
absent) so every image yields the same ``n_L`` and the decoder input width
stays constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dlg as dlg_mod
from .dlg import DlgParams
from .numkern import ContractError, as_tensor, load_tensor, save_tensor, softmax, softmax_backward

FUSIONS = ("dense", "generic")


@dataclass
class ModelParams:
    enc_W: np.ndarray
    enc_b: np.ndarray
    embed: np.ndarray
    dlg: DlgParams
    dec_W: np.ndarray
    dec_b: np.ndarray

    @property
    def raw_channels(self):
        return self.enc_W.shape[0]

    @property
    def channels(self):
        return self.enc_W.shape[1]

    @property
    def vocab(self):
        return self.embed.shape[0]

    @property
    def n_tokens(self):
        return self.dec_W.shape[0]

    @property
    def n_classes(self):
        return self.dec_W.shape[1]

    def tensors(self):
        """Flat ``name -> array`` view in a fixed order."""
        out = {"enc_W": self.enc_W, "enc_b": self.enc_b, "embed": self.embed}
        out.update({f"dlg.{k}": v for k, v in self.dlg.items()})
        out["dec_W"] = self.dec_W
        out["dec_b"] = self.dec_b
        return out

    @classmethod
    def from_tensors(cls, t):
        d = DlgParams(**{k[4:]: v for k, v in t.items() if k.startswith("dlg.")})
        return cls(t["enc_W"], t["enc_b"], t["embed"], d, t["dec_W"], t["dec_b"])

    def map(self, fn, *others):
        mine = self.tensors()
        rest = [o.tensors() for o in others]
        return ModelParams.from_tensors({k: fn(v, *(r[k] for r in rest)) for k, v in mine.items()})

    def copy(self):
        return self.map(np.copy)

    def validate(self):
        c = self.channels
        expect = {
            "enc_b": (c,),
            "embed": (self.vocab, c),
            "dec_b": (self.n_classes,),
        }
        for k, v in self.tensors().items():
            if k in expect and v.shape != expect[k]:
                raise ContractError(f"{k} has shape {v.shape}, expected {expect[k]}")
            if k.startswith("dlg.") and v.shape not in ((c, c), (c,)):
                raise ContractError(f"{k} has shape {v.shape}, expected width {c}")
            as_tensor(v, k)


def init_params(rng, raw_channels, channels, n_classes, n_tokens=None, vocab=None):
    n_tokens = n_classes if n_tokens is None else n_tokens
    vocab = n_classes + 1 if vocab is None else vocab
    return ModelParams(
        enc_W=rng.normal((raw_channels, channels), 1.0 / np.sqrt(raw_channels)),
        enc_b=np.zeros(channels),
        embed=rng.normal((vocab, channels), 1.0),
        dlg=DlgParams.init(rng, channels),
        dec_W=rng.normal((n_tokens, n_classes), 1.0 / np.sqrt(n_tokens)),
        dec_b=np.zeros(n_classes),
    )


def caption_slots(tokens, n_classes):
    """Slot layout: slot ``c`` holds token ``c`` if present, else ``PAD == n_classes``."""
    slots = np.full(n_classes, n_classes, dtype=np.int64)
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.size and (tok.min() < 0 or tok.max() >= n_classes):
        raise ContractError(f"caption token out of range for {n_classes} classes: {tokens}")
    slots[tok] = tok
    return slots


def encode_vision(image, params):
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-1] != params.raw_channels:
        raise ContractError(f"image has {image.shape[-1]} channels, encoder expects {params.raw_channels}")
    return image @ params.enc_W + params.enc_b


def embed_caption(tokens, params):
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim < 1 or tok.shape[-1] < 1:
        raise ContractError("caption needs at least one token")
    if tok.min() < 0 or tok.max() >= params.vocab:
        raise ContractError(f"token id out of range for vocabulary of {params.vocab}")
    return params.embed[tok]


def decode(fm, params):
    """``[n_L, h, w]`` multimodal map to ``[h, w, N_C]`` probabilities."""
    fm = np.asarray(fm, dtype=np.float64)
    if fm.shape[0] != params.n_tokens:
        raise ContractError(f"decoder expects {params.n_tokens} token channels, got {fm.shape[0]}")
    logits = np.moveaxis(fm, 0, -1) @ params.dec_W + params.dec_b
    return softmax(logits, axis=-1)


def forward_batch(images, tokens, params, fusion="dense"):
    """Batched forward.

    ``images`` is ``[B, h, w, raw]``, ``tokens`` is ``[B, n_L]``. Returns
    probabilities ``[B, h, w, N_C]`` and a cache for :func:`backward_batch`.
    """
    images = np.asarray(images, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if images.ndim != 4 or tokens.ndim != 2 or tokens.shape[0] != images.shape[0]:
        raise ContractError(f"expected [B,h,w,raw] images and [B,n_L] tokens, got {images.shape}, {tokens.shape}")
    if fusion not in FUSIONS:
        raise ContractError(f"unknown fusion {fusion!r}")
    B, h, w, raw = images.shape
    x = images.reshape(B, h * w, raw)
    fv = encode_vision(x, params)
    fl = embed_caption(tokens, params)
    core = dlg_mod.dlg_core if fusion == "dense" else dlg_mod.generic_core
    fm, dcache = core(fv, fl, params.dlg)
    fmT = np.swapaxes(fm, -1, -2)
    if fmT.shape[-1] != params.n_tokens:
        raise ContractError(f"decoder expects {params.n_tokens} token channels, got {fmT.shape[-1]}")
    probs = softmax(fmT @ params.dec_W + params.dec_b, axis=-1)
    cache = dict(x=x, tokens=tokens, fmT=fmT, probs=probs, dlg=dcache, fusion=fusion, shape=(B, h, w))
    return probs.reshape(B, h, w, -1), cache


def backward_batch(grad_probs, cache, params):
    """Gradient of a scalar loss w.r.t. every parameter, as a ``ModelParams``."""
    B, h, w = cache["shape"]
    probs = cache["probs"]
    g = np.asarray(grad_probs, dtype=np.float64).reshape(probs.shape)
    g_logits = softmax_backward(probs, g)
    fmT = cache["fmT"]
    n_tok, n_cls = params.dec_W.shape
    g_decW = fmT.reshape(-1, n_tok).T @ g_logits.reshape(-1, n_cls)
    g_decb = g_logits.reshape(-1, n_cls).sum(axis=0)
    g_fm = np.swapaxes(g_logits @ params.dec_W.T, -1, -2)
    back = dlg_mod.dlg_core_backward if cache["fusion"] == "dense" else dlg_mod.generic_core_backward
    g_fv, g_fl, g_dlg = back(g_fm, cache["dlg"], params.dlg)
    x = cache["x"]
    g_encW = x.reshape(-1, x.shape[-1]).T @ g_fv.reshape(-1, g_fv.shape[-1])
    g_encb = g_fv.reshape(-1, g_fv.shape[-1]).sum(axis=0)
    g_embed = np.zeros_like(params.embed)
    np.add.at(g_embed, cache["tokens"].ravel(), g_fl.reshape(-1, g_fl.shape[-1]))
    return ModelParams(g_encW, g_encb, g_embed, g_dlg, g_decW, g_decb)


def forward(image, tokens, params, fusion="dense"):
    """Single image ``[h, w, raw]`` with token slots ``[n_L]`` to ``[h, w, N_C]``."""
    probs, cache = forward_batch(np.asarray(image)[None], np.asarray(tokens)[None], params, fusion)
    return probs[0], cache


def backward(grad_probs, cache, params):
    return backward_batch(np.asarray(grad_probs)[None], cache, params)


def predict(images, tokens, params, fusion="dense"):
    probs, _ = forward_batch(images, tokens, params, fusion)
    return probs.argmax(axis=-1)


def save_checkpoint(directory, params, manifest=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, arr in params.tensors().items():
        save_tensor(d / f"{name}.dyct", arr)
        shapes[name] = list(arr.shape)
    meta = dict(manifest or {})
    meta["tensors"] = shapes
    (d / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(directory):
    d = Path(directory)
    meta = json.loads((d / "manifest.json").read_text())
    tensors = {name: load_tensor(d / f"{name}.dyct") for name in meta["tensors"]}
    return ModelParams.from_tensors(tensors), meta
