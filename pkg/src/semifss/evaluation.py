"""Dice score and the N-episode evaluation protocol."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .episodes import EpisodeStream, derive_seed
from .errors import EmptyMask, NonBinaryInput, ShapeMismatch
from .trainer import episode_forward

THRESHOLD = 0.5


def dsc(a, b) -> float:
    """Dice similarity 2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    for m in (a, b):
        if m.size and not np.isin(m, (0, 1)).all():
            raise NonBinaryInput("masks must contain only 0 and 1")
    a, b = a.astype(bool), b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def predict_episode(model, episode) -> np.ndarray:
    """Binary query mask (uint8, query resolution) from the episode's k supports.

    Runs in inference mode and restores the model's previous train/eval flag.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            prob = episode_forward(model, episode)
    finally:
        model.train(was_training)
    return (prob.numpy() >= THRESHOLD).astype(np.uint8)


@dataclass
class EvalReport:
    per_episode: list[dict]
    mean_dsc: float
    std_dsc: float
    k: int
    n_episodes: int
    n_unscorable: int = 0
    checkpoint_id: str | None = None
    seed: int = 0
    label: str = ""
    additional_samples: int | None = None
    extra: dict = field(default_factory=dict)

    def scores(self) -> np.ndarray:
        return np.array([e["dsc"] for e in self.per_episode if e["dsc"] is not None])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def evaluate(model, dataset, allowed_classes, k: int, n_episodes: int, seed: int = 0,
             checkpoint_id=None, fixed_support=False, workers: int = 1) -> EvalReport:
    """Score ``n_episodes`` episodes over ``allowed_classes`` with Dice.

    Episode i comes from ``EpisodeStream(base_seed=derive_seed(seed, 4))``. Episodes whose
    supports all vanish at feature resolution are kept in ``per_episode`` with
    ``dsc=None`` and left out of the mean.
    """
    stream = EpisodeStream(dataset, allowed_classes, k, base_seed=derive_seed(seed, 4),
                           length=n_episodes, fixed_support=fixed_support)

    def score(i):
        ep = stream[i]
        try:
            pred = predict_episode(model, ep)
        except EmptyMask:
            return {"index": i, "class_id": ep.class_id, "dsc": None}
        return {"index": i, "class_id": ep.class_id, "dsc": dsc(pred, ep.query_mask)}

    was_training = model.training
    model.eval()
    try:
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as pool:
                per_episode = list(pool.map(score, range(n_episodes)))
        else:
            per_episode = [score(i) for i in range(n_episodes)]
    finally:
        model.train(was_training)
    per_episode.sort(key=lambda e: e["index"])
    values = np.array([e["dsc"] for e in per_episode if e["dsc"] is not None], dtype=np.float64)
    mean = float(values.mean()) if values.size else float("nan")
    std = float(values.std()) if values.size else float("nan")
    return EvalReport(
        per_episode=per_episode,
        mean_dsc=mean,
        std_dsc=std,
        k=k,
        n_episodes=n_episodes,
        n_unscorable=n_episodes - int(values.size),
        checkpoint_id=checkpoint_id,
        seed=seed,
    )


def summary_table(reports) -> str:
    """Plain-text table: model | additional samples | mean DSC (%) | std | k | episodes."""
    header = f"{'Model':<32} {'Additional samples':>18} {'Mean DSC (%)':>13} {'Std':>7} {'k':>3} {'Episodes':>9}"
    lines = [header, "-" * len(header)]
    for r in reports:
        extra = "---" if not r.additional_samples else str(r.additional_samples)
        lines.append(
            f"{(r.label or r.checkpoint_id or 'model'):<32} {extra:>18} "
            f"{100 * r.mean_dsc:>13.2f} {100 * r.std_dsc:>7.2f} {r.k:>3} {r.n_episodes:>9}"
        )
    return "\n".join(lines)


def save_overlays(model, dataset, allowed_classes, k, n, seed, out_dir) -> list[Path]:
    """Side-by-side PNGs (query | ground truth | prediction) for the first ``n`` episodes."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = EpisodeStream(dataset, allowed_classes, k, base_seed=derive_seed(seed, 4), length=n)
    paths = []
    for i in range(n):
        ep = stream[i]
        try:
            pred = predict_episode(model, ep)
        except EmptyMask:
            continue
        img = np.asarray(ep.query_image)
        if img.shape[-1] == 1:
            img = np.repeat(img, 3, axis=-1)
        gt = np.repeat(ep.query_mask[..., None], 3, axis=-1).astype(np.float32)
        pr = np.repeat(pred[..., None], 3, axis=-1).astype(np.float32)
        panel = np.concatenate([img, gt, pr], axis=1)
        path = out_dir / f"episode_{i:04d}_{ep.class_id}.png"
        Image.fromarray(np.round(panel * 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
