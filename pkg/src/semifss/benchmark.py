"""Desk-scale synthetic benchmark: regular vs episodic vs episodic + denoising.

Every arm trains the shipped ``tiny`` preset on a shapes corpus (8 training classes,
4 held-out classes) and is scored on held-out classes with the episode protocol.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import load_run_config
from .dataset import (
    class_names,
    generate_shapes_dataset,
    generate_unlabeled_pool,
    load_class_dataset,
    load_image_pool,
    split_classes,
)
from .evaluation import evaluate
from .trainer import Trainer

ARMS = {
    "regular": {"mode": "regular", "lam": 0.0, "u": 0},
    "episodic": {"mode": "episodic", "lam": 0.0, "u": 0},
    "episodic+denoise": {"mode": "episodic", "lam": 1.0, "u": 10},
}


@dataclass
class Corpus:
    dataset: object
    split: object
    pool: list
    root: Path


@dataclass
class ArmResult:
    arm: str
    seed: int
    dsc: dict  # k -> held-out mean DSC
    train_seconds: float
    records: list = field(repr=False, default_factory=list)
    trainer: object = field(repr=False, default=None)


def make_corpus(root, n_classes=12, per_class=40, size=(32, 32), seed=7, pool_per_class=10) -> Corpus:
    """Generate (or reuse) the labeled corpus and an unlabeled pool of the same domain."""
    root = Path(root)
    data, pool_dir = root / "shapes", root / "pool"
    if not data.exists():
        generate_shapes_dataset(n_classes, per_class, size, seed, data)
    if not pool_dir.exists():
        generate_unlabeled_pool(range(len(class_names(n_classes))), pool_per_class, size, seed, pool_dir)
    dataset = load_class_dataset(data, size)
    return Corpus(dataset, split_classes(dataset, 1 / 3, 0), load_image_pool(pool_dir, size, 3), root)


def run_arm(corpus: Corpus, arm: str, seed: int, shots=(1,), n_episodes=200, eval_seed=0,
            iterations=None, preset="tiny") -> ArmResult:
    cfg = replace(load_run_config(preset).train, seed=seed, data_root=None, pool_dir=None, **ARMS[arm])
    if iterations is not None:
        cfg = replace(cfg, iterations=iterations)
    start = time.process_time()
    trainer = Trainer(cfg, corpus.dataset, corpus.split, corpus.pool)
    records = trainer.train()
    elapsed = time.process_time() - start
    scores = {k: evaluate(trainer.model, corpus.dataset, corpus.split.test_classes, k, n_episodes,
                          seed=eval_seed).mean_dsc for k in shots}
    return ArmResult(arm, seed, scores, elapsed, records, trainer)


def run_benchmark(root, seeds=(0, 1, 2), arms=tuple(ARMS), shots=(1, 5), n_episodes=200, log=print):
    corpus = make_corpus(root)
    results = []
    for arm in arms:
        for seed in seeds:
            r = run_arm(corpus, arm, seed, shots, n_episodes)
            log(f"{arm:<18} seed {seed}: " + "  ".join(f"{k}-shot {v:.3f}" for k, v in r.dsc.items())
                + f"  ({r.train_seconds:.0f}s CPU)")
            results.append(r)
    return corpus, results
