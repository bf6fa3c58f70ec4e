"""Synthetic two-domain, long-tailed segmentation tasks.

Pixel labels are drawn i.i.d. with class shares proportional to
``(c + 1) ** -tail_exponent``. Each pixel's raw feature is an isotropic
Gaussian around its class mean. Class means come from ``world_seed`` and
are shared by every domain; ``shift`` rotates and offsets them to create a
target domain. Captions are the sorted ids of classes present in an image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .numkern import ContractError, Rng, save_tensor


@dataclass(frozen=True)
class DomainSpec:
    seed: int = 0
    h: int = 8
    w: int = 8
    raw_channels: int = 4
    n_classes: int = 5
    tail_exponent: float = 2.0
    shift: float = 0.0
    n_images: int = 100
    noise: float = 1.0
    separation: float = 2.0
    world_seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractError("n_classes must be >= 2")
        if min(self.h, self.w, self.raw_channels) < 1:
            raise ContractError("grid and channel sizes must be positive")
        if self.tail_exponent <= 0 or self.shift < 0 or self.noise < 0 or self.n_images < 0:
            raise ContractError("tail_exponent must be > 0; shift, noise, n_images must be >= 0")

    def class_shares(self):
        w = (np.arange(self.n_classes) + 1.0) ** -self.tail_exponent
        return w / w.sum()

    def class_means(self):
        """``[N_C, raw]`` class means for this domain."""
        world = Rng(self.world_seed, stream=0xC1A55)
        base = world.normal((self.n_classes, self.raw_channels))
        base /= np.linalg.norm(base, axis=1, keepdims=True)
        base *= self.separation
        offset = world.normal(self.raw_channels)
        K = world.normal((self.raw_channels, self.raw_channels))
        K = (K - K.T) / 2
        if self.shift == 0:
            return base
        eye = np.eye(self.raw_channels)
        # Cayley transform: orthogonal, identity at shift == 0
        R = np.linalg.solve(eye - 0.5 * self.shift * K, eye + 0.5 * self.shift * K)
        return base @ R.T + self.shift * offset / np.linalg.norm(offset)


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray
    captions: list

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = list(idx)
        return ImageSet(self.images[idx], self.labels[idx], [self.captions[i] for i in idx])


def _draw_image(rng, spec, means, shares):
    labels = rng.choice(spec.n_classes, size=(spec.h, spec.w), p=shares)
    noise = rng.normal((spec.h, spec.w, spec.raw_channels), spec.noise)
    return means[labels] + noise, labels.astype(np.int64)


def caption_for(labels):
    return np.unique(np.asarray(labels)).astype(np.int64)


def generate(spec, first_index=0, count=None):
    """Draw ``count`` (default ``spec.n_images``) images from the domain.

    Image ``k`` uses RNG sub-stream ``first_index + k`` so disjoint index
    ranges give disjoint, scheduling-independent draws.
    """
    count = spec.n_images if count is None else count
    root = Rng(spec.seed)
    means, shares = spec.class_means(), spec.class_shares()
    images = np.zeros((count, spec.h, spec.w, spec.raw_channels))
    labels = np.zeros((count, spec.h, spec.w), dtype=np.int64)
    for k in range(count):
        images[k], labels[k] = _draw_image(root.spawn(first_index + k), spec, means, shares)
    return ImageSet(images, labels, [caption_for(lab) for lab in labels])


@dataclass
class SsdaDataset:
    source: ImageSet
    target_labeled: ImageSet
    target_unlabeled: ImageSet
    target_test: ImageSet
    class_shares: np.ndarray
    source_spec: DomainSpec
    target_spec: DomainSpec


def make_ssda(source_spec, target_spec, labeled_target_count, unlabeled_target_count=None, test_count=None):
    """Source split plus disjoint labeled / unlabeled / test target splits.

    ``unlabeled_target_count`` defaults to ten times the labeled count (or
    ``target_spec.n_images`` in the zero-label regime). ``test_count``
    defaults to ``target_spec.n_images``.
    """
    n_lab = int(labeled_target_count)
    if unlabeled_target_count is None:
        unlabeled_target_count = 10 * n_lab if n_lab else target_spec.n_images
    n_unl = int(unlabeled_target_count)
    n_test = target_spec.n_images if test_count is None else int(test_count)
    if min(n_lab, n_unl, n_test) < 0:
        raise ContractError("split sizes must be nonnegative")
    if source_spec.n_images + n_lab == 0:
        raise ContractError("no labeled data: source and labeled target are both empty")
    if (source_spec.n_classes, source_spec.raw_channels, source_spec.h, source_spec.w) != (
        target_spec.n_classes,
        target_spec.raw_channels,
        target_spec.h,
        target_spec.w,
    ):
        raise ContractError("source and target specs must share classes, channels and grid size")
    pool = generate(target_spec, count=n_lab + n_unl + n_test)
    return SsdaDataset(
        source=generate(source_spec),
        target_labeled=pool.subset(range(n_lab)),
        target_unlabeled=pool.subset(range(n_lab, n_lab + n_unl)),
        target_test=pool.subset(range(n_lab + n_unl, n_lab + n_unl + n_test)),
        class_shares=target_spec.class_shares(),
        source_spec=source_spec,
        target_spec=target_spec,
    )


def bayes_posterior(images, spec):
    """Exact class posterior ``[..., N_C]`` for pixels drawn from ``spec``."""
    x = np.asarray(images, dtype=np.float64)
    means = spec.class_means()
    d2 = ((x[..., None, :] - means) ** 2).sum(axis=-1)
    logit = np.log(spec.class_shares()) - d2 / (2 * spec.noise**2)
    logit -= logit.max(axis=-1, keepdims=True)
    p = np.exp(logit)
    return p / p.sum(axis=-1, keepdims=True)


def export_dataset(ds, directory):
    """Write each split as DYCT tensors plus an ``index.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {
        "source_spec": asdict(ds.source_spec),
        "target_spec": asdict(ds.target_spec),
        "class_shares": ds.class_shares.tolist(),
        "splits": {},
    }
    for name in ("source", "target_labeled", "target_unlabeled", "target_test"):
        split = getattr(ds, name)
        save_tensor(d / f"{name}_images.dyct", split.images)
        save_tensor(d / f"{name}_labels.dyct", split.labels.astype(np.float64))
        index["splits"][name] = {
            "count": len(split),
            "images": f"{name}_images.dyct",
            "labels": f"{name}_labels.dyct",
            "captions": [c.tolist() for c in split.captions],
        }
    (d / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return d / "index.json"


def with_shift(spec, shift, seed=None):
    return replace(spec, shift=shift, seed=spec.seed if seed is None else seed)
