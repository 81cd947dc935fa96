"""Denoising pretext task: Gaussian corruption of unlabeled images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyUnlabeledPool, NegativeSigma

DEFAULT_SIGMA = 0.1
TAIL = 4.0


@dataclass
class UnlabeledBatch:
    clean: list[np.ndarray]
    corrupted: list[np.ndarray]
    noise_meta: list[tuple[float, int]]  # (sigma, seed) per pair

    def __len__(self):
        return len(self.clean)

    def arrays(self):
        """Stacked (clean, corrupted) as N×H×W×Ch float32 arrays."""
        return (np.stack(self.clean).astype(np.float32),
                np.stack(self.corrupted).astype(np.float32))


def corrupt_image(image, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. N(0, sigma²) noise per pixel and channel, clamp to [0, 1].

    Noise draws are clipped to ±4 sigma (a 6e-5 tail), so the corruption never moves a
    pixel by more than 4 sigma.
    """
    if sigma < 0:
        raise NegativeSigma(f"sigma must be >= 0, got {sigma}")
    image = np.asarray(image)
    if sigma == 0:
        return image.copy()
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=image.shape)
    noise = np.clip(noise, -TAIL * sigma, TAIL * sigma)
    return np.clip(image + noise, 0.0, 1.0).astype(image.dtype)


def corrupt_batch(images, copies: int, sigma: float, seed: int) -> UnlabeledBatch:
    """``copies`` independently corrupted versions of each image, image-major order."""
    if copies < 1:
        raise ValueError("copies must be >= 1")
    seeds = np.random.SeedSequence(int(seed)).generate_state(len(images) * copies, dtype=np.uint64)
    clean, corrupted, meta = [], [], []
    for i, img in enumerate(images):
        for c in range(copies):
            s = int(seeds[i * copies + c])
            clean.append(img)
            corrupted.append(corrupt_image(img, sigma, s))
            meta.append((float(sigma), s))
    return UnlabeledBatch(clean, corrupted, meta)


def make_unlabeled_batch(pool, u: int, copies: int = 1, sigma: float = DEFAULT_SIGMA, seed: int = 0) -> UnlabeledBatch:
    """Sample ``u`` pool images and emit ``u * copies`` (clean, corrupted) pairs."""
    if not pool:
        raise EmptyUnlabeledPool("unlabeled pool is empty")
    if u < 1:
        raise ValueError("u must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=u, replace=u > len(pool))
    return corrupt_batch([pool[i] for i in idx], copies, sigma, int(rng.integers(2**63)))
