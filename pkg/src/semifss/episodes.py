"""One-way k-shot episode construction.

Every episode holds k support (image, mask) pairs and one query pair drawn from a
single class, plus optionally ``u`` unlabeled images for the denoising task.

Episode ``i`` of a stream is sampled from its own generator seeded with
``derive_seed(base_seed, i)``: the first 64-bit word of
``numpy.random.SeedSequence([base_seed, i])``. Episodes can therefore be fetched in
any order, by any worker, and always come out the same.
"""
from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import ClassDataset
from .errors import EmptyAfterDownsample, EmptyUnlabeledPool, InsufficientEntries


def derive_seed(*words: int) -> int:
    """Mix integer words into one 64-bit seed (SeedSequence hashing)."""
    state = np.random.SeedSequence([int(w) for w in words]).generate_state(1, dtype=np.uint64)
    return int(state[0])


@dataclass
class Episode:
    class_id: str
    support: list[tuple[np.ndarray, np.ndarray]]
    query_image: np.ndarray
    query_mask: np.ndarray | None
    unlabeled: list[np.ndarray] | None = None
    seed: int | None = None
    support_indices: tuple[int, ...] = ()
    query_index: int | None = None
    unlabeled_indices: tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return len(self.support)

    def manifest(self, dataset: ClassDataset | None = None) -> dict:
        """Replayable description (dataset stems when ``dataset`` is given)."""
        if dataset is not None:
            support = [dataset.stem(self.class_id, i) for i in self.support_indices]
            query = dataset.stem(self.class_id, self.query_index)
        else:
            support, query = list(self.support_indices), self.query_index
        return {
            "class_id": self.class_id,
            "support": support,
            "query": query,
            "unlabeled": list(self.unlabeled_indices),
            "seed": self.seed,
        }


def color_transform(seed: int, channels: int):
    """Random hue rotation (RGB rotated about the grey axis) as a function of an image.

    Applied identically to every image of an episode it preserves which pixels match
    the support while making the colour a class is rendered in uniform over hue, so
    class identity cannot be memorized from colour. Non-RGB images are inverted with
    probability one half instead.
    """
    rng = np.random.default_rng(seed)
    if channels != 3:
        invert = rng.random() < 0.5
        return lambda image: (1.0 - np.asarray(image)) if invert else np.asarray(image)
    theta = rng.uniform(0.0, 2 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    # Rodrigues rotation about the unit vector (1, 1, 1) / sqrt(3)
    k = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / np.sqrt(3)
    rot = np.eye(3) + s * k + (1 - c) * (k @ k)

    def apply(image):
        image = np.asarray(image)
        return np.clip(image @ rot.T, 0.0, 1.0).astype(image.dtype)

    return apply


def _check_entries(dataset, allowed, k):
    for c in allowed:
        n = dataset.n_entries(c)
        if n < k + 1:
            raise InsufficientEntries(f"class {c!r} has {n} pairs, a {k}-shot episode needs {k + 1}")


def sample_episode(
    dataset: ClassDataset,
    allowed_classes,
    k: int,
    u: int = 0,
    rng_seed: int = 0,
    unlabeled_pool=None,
    fixed_support: dict | None = None,
    augment: bool = False,
) -> Episode:
    """Draw one class uniformly, then one query entry and k further support entries.

    ``fixed_support`` optionally maps class id to a tuple of k support indices; the
    query is then drawn among the remaining entries. ``augment`` recolours support and
    query with one shared ``color_transform`` (unlabeled images are left alone).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if u < 0:
        raise ValueError("u must be >= 0")
    allowed = sorted(allowed_classes)
    if not allowed:
        raise ValueError("allowed_classes is empty")
    missing = [c for c in allowed if c not in dataset.entries]
    if missing:
        raise KeyError(f"classes not in dataset: {missing}")
    _check_entries(dataset, allowed, k)
    if u > 0 and not unlabeled_pool:
        raise EmptyUnlabeledPool(f"u={u} unlabeled images requested but no pool is configured")

    rng = np.random.default_rng(rng_seed)
    class_id = allowed[rng.integers(len(allowed))]
    n = dataset.n_entries(class_id)
    if fixed_support is not None and class_id in fixed_support:
        support_idx = tuple(int(i) for i in fixed_support[class_id])
        rest = np.setdiff1d(np.arange(n), support_idx)
        query_idx = int(rest[rng.integers(len(rest))])
    else:
        # query first, then supports: for a fixed seed the class, the query and the
        # first supports do not depend on k, so k-shot episodes nest
        order = rng.permutation(n)
        query_idx = int(order[0])
        support_idx = tuple(int(i) for i in order[1:k + 1])

    unlabeled, unlabeled_idx = None, ()
    if u > 0:
        unlabeled_idx = tuple(int(i) for i in rng.choice(len(unlabeled_pool), size=u, replace=u > len(unlabeled_pool)))
        unlabeled = [unlabeled_pool[i] for i in unlabeled_idx]

    recolor = color_transform(derive_seed(rng_seed, 7), dataset.channels) if augment else (lambda im: im)
    return Episode(
        class_id=class_id,
        support=[(recolor(dataset.image(class_id, i)), dataset.mask(class_id, i)) for i in support_idx],
        query_image=recolor(dataset.image(class_id, query_idx)),
        query_mask=dataset.mask(class_id, query_idx),
        unlabeled=unlabeled,
        seed=int(rng_seed),
        support_indices=support_idx,
        query_index=query_idx,
        unlabeled_indices=unlabeled_idx,
    )


class EpisodeStream(Sequence):
    """Indexable, reproducible sequence of episodes.

    ``stream[i]`` is ``sample_episode(..., rng_seed=derive_seed(base_seed, i))``.
    """

    def __init__(self, dataset, allowed_classes, k, u=0, base_seed=0, length=None,
                 unlabeled_pool=None, fixed_support=False, augment=False):
        self.dataset = dataset
        self.allowed_classes = frozenset(allowed_classes)
        self.k = k
        self.u = u
        self.base_seed = int(base_seed)
        self.length = length
        self.unlabeled_pool = unlabeled_pool
        self.augment = augment
        _check_entries(dataset, self.allowed_classes, k)
        if u > 0 and not unlabeled_pool:
            raise EmptyUnlabeledPool(f"u={u} unlabeled images requested but no pool is configured")
        self.fixed_support = self._fixed_supports() if fixed_support else None

    def _fixed_supports(self):
        supports = {}
        for pos, c in enumerate(sorted(self.allowed_classes)):
            rng = np.random.default_rng(derive_seed(self.base_seed, 2**32 - 1, pos))
            picks = rng.choice(self.dataset.n_entries(c), size=self.k, replace=False)
            supports[c] = tuple(int(i) for i in picks)
        return supports

    def seed_for(self, index: int, attempt: int = 0) -> int:
        if attempt:
            return derive_seed(self.base_seed, index, attempt)
        return derive_seed(self.base_seed, index)

    def episode(self, index: int, attempt: int = 0) -> Episode:
        """Episode ``index``; ``attempt > 0`` gives a deterministic replacement draw."""
        return sample_episode(
            self.dataset, self.allowed_classes, self.k, self.u,
            rng_seed=self.seed_for(index, attempt),
            unlabeled_pool=self.unlabeled_pool,
            fixed_support=self.fixed_support,
            augment=self.augment,
        )

    def __len__(self):
        if self.length is None:
            raise TypeError("unbounded episode stream has no length")
        return self.length

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if index < 0 or (self.length is not None and index >= self.length):
            raise IndexError(index)
        return self.episode(index)

    def __iter__(self):
        i = 0
        while self.length is None or i < self.length:
            yield self.episode(i)
            i += 1


def episode_stream(dataset, allowed_classes, k, u=0, base_seed=0, length=None, **kwargs) -> EpisodeStream:
    return EpisodeStream(dataset, allowed_classes, k, u, base_seed, length, **kwargs)


def downsample_mask(mask, target) -> np.ndarray:
    """Nearest-neighbour downsampling: output pixel (i, j) copies input (i*H//H', j*W//W').

    Raises EmptyAfterDownsample when a non-empty mask loses every foreground pixel.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ValueError(f"target {th}x{tw} does not evenly divide mask {h}x{w}")
    rows = np.arange(th) * h // th
    cols = np.arange(tw) * w // tw
    out = (mask[np.ix_(rows, cols)] > 0).astype(np.uint8)
    if not out.any() and mask.any():
        raise EmptyAfterDownsample(f"mask with {int((mask > 0).sum())} foreground pixels is empty at {th}x{tw}")
    return out


def write_manifest(episodes, path, dataset=None) -> Path:
    """Line-delimited JSON, one episode per line (index, class, stems, seed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for i, ep in enumerate(episodes):
            record = {"index": i, **ep.manifest(dataset)}
            fh.write(json.dumps(record) + "\n")
    return path


def read_manifest(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
