"""Episodic joint training (few-shot BCE + lambda * denoising BCE) and the regular baseline.

Randomness is a pure function of ``(seed, step)``:

* episode for step ``s`` (``e``-th of ``episodes_per_step``): stream index ``s * E + e``
  of an ``EpisodeStream`` with ``base_seed = derive_seed(seed, 1)``;
* unlabeled images for step ``s``: those of the step's first episode (``u`` per step);
* corruption noise for step ``s``: ``derive_seed(seed, 2, s)``;
* regular-mode batches: permutation of the training pairs per epoch, seeded by
  ``derive_seed(seed, 3, epoch)``;
* colour augmentation (``augment``): per episode from the episode seed (see
  ``sample_episode``); per regular-mode image ``j`` of the run, ``derive_seed(seed, 5, j)``;
* model initialisation: ``derive_seed(seed, 0)`` truncated to 63 bits.

Nothing depends on how many steps ran before in the same process, so a run resumed
from a checkpoint continues bit-identically.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import ClassDataset, DatasetSplit, load_class_dataset, load_image_pool, split_classes
from .episodes import EpisodeStream, color_transform, derive_seed, downsample_mask
from .errors import ConfigError, EmptyMask, ExhaustedResampling
from .network import (
    STRIDE,
    FewShotSegNet,
    ModelConfig,
    Prototype,
    aggregate_prototypes,
    images_to_tensor,
    load_checkpoint,
    load_encoder_weights,
    masked_average_pool,
    save_checkpoint,
)
from .objectives import LossReport, few_shot_loss, joint_loss, surrogate_loss
from .surrogate import DEFAULT_SIGMA, corrupt_batch

log = logging.getLogger(__name__)

MAX_RESAMPLES = 10
MODES = ("episodic", "regular")


@dataclass
class TrainConfig:
    mode: str = "episodic"
    k: int = 1
    u: int = 0
    lam: float = 1.0
    iterations: int = 30000
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    episodes_per_step: int = 1
    batch_size: int = 4  # regular mode only
    model: ModelConfig = field(default_factory=ModelConfig)
    data_root: str | None = None
    test_fraction: float = 1 / 3
    pool_dir: str | None = None
    sigma: float = DEFAULT_SIGMA
    copies: int = 1
    encoder_weights: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    log_path: str | None = None
    eval_every: int = 0
    eval_episodes: int = 50
    augment: bool = False  # per-episode (per-image in regular mode) colour_transform

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 1:
            raise ConfigError("iterations", "must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if self.lam < 0:
            raise ConfigError("lambda", f"must be >= 0, got {self.lam}")
        if self.u < 0:
            raise ConfigError("u", "must be >= 0")
        if self.k < 1:
            raise ConfigError("k", "must be >= 1")
        if self.sigma < 0:
            raise ConfigError("sigma", "must be >= 0")
        if self.copies < 1:
            raise ConfigError("copies", "must be >= 1")
        if self.episodes_per_step < 1:
            raise ConfigError("episodes_per_step", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction", "must lie in (0, 1)")
        if self.model.input_size[0] % STRIDE or self.model.input_size[1] % STRIDE:
            raise ConfigError("input_size", f"must be divisible by {STRIDE}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["betas"] = tuple(d["betas"])
        return cls(**d)


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas),
                            eps=cfg.adam_eps, foreach=False)


def _model_dtype(model):
    return next(model.parameters()).dtype


def support_prototype(model, features, masks, class_id=None) -> Prototype:
    """Average of per-shot prototypes; shots with no foreground at feature size are skipped."""
    fh, fw = features.shape[-2:]
    protos = []
    for feat, mask in zip(features, masks):
        try:
            protos.append(Prototype(masked_average_pool(feat, downsample_mask(mask, (fh, fw))), class_id))
        except EmptyMask:  # includes EmptyAfterDownsample
            continue
    if not protos:
        raise EmptyMask("every support mask is empty at feature resolution")
    return aggregate_prototypes(protos)


def episode_forward(model, episode):
    """Foreground probability map (H×W) for the episode's query."""
    return episodes_forward(model, [episode])[0]


def episodes_forward(model, episodes):
    """Query probability maps (E×H×W) for several episodes.

    All images share one encoder call and all queries one decoder call, so decoder
    batch-norm statistics are computed over the E queries.
    """
    dtype = _model_dtype(model)
    images, spans = [], []
    for ep in episodes:
        start = len(images)
        images += [img for img, _ in ep.support] + [ep.query_image]
        spans.append((start, len(images) - 1))
    feats = model.encode(images_to_tensor(images, dtype))
    protos, queries = [], []
    for ep, (start, q) in zip(episodes, spans):
        proto = support_prototype(model, feats[start:q], [m for _, m in ep.support], ep.class_id)
        protos.append(proto.values)
        queries.append(q)
    return model.fuse_and_decode(torch.stack(protos), feats[queries])


def train_step(model, optimizer, episode, batch=None, lam=1.0, resample=None) -> LossReport:
    """One Adam step on few-shot loss + lam * surrogate loss; returns pre-step losses.

    ``episode`` may be a list (several episodes per step, losses averaged over all
    query pixels). If a support set vanishes at feature resolution,
    ``resample(i, attempt)`` supplies a replacement for episode ``i``, at most
    MAX_RESAMPLES times.
    """
    episodes = episode if isinstance(episode, list) else [episode]
    model.train()
    optimizer.zero_grad(set_to_none=True)
    dtype = _model_dtype(model)
    for i in range(len(episodes)):
        attempt = 0
        while not _supports_survive(model, episodes[i]):
            attempt += 1
            if resample is None or attempt > MAX_RESAMPLES:
                raise ExhaustedResampling(f"{attempt} consecutive episodes had empty support masks")
            episodes[i] = resample(i, attempt)
    prob = episodes_forward(model, episodes)
    target = torch.as_tensor(np.stack([ep.query_mask for ep in episodes]), dtype=dtype)
    few = few_shot_loss(prob, target)
    sur = torch.zeros((), dtype=dtype)
    if batch is not None and len(batch) and lam > 0:
        clean, corrupted = batch.arrays()
        recon = model.denoise_forward(images_to_tensor(corrupted, dtype))
        sur = surrogate_loss(recon, images_to_tensor(clean, dtype))
    total = joint_loss(few, sur, lam)
    total.backward()
    optimizer.step()
    return LossReport(float(few.detach()), float(sur.detach()), float(total.detach()), float(lam))


def _supports_survive(model, episode):
    h, w = episode.query_image.shape[:2]
    target = (h // STRIDE, w // STRIDE)
    for _, mask in episode.support:
        try:
            if downsample_mask(mask, target).any():
                return True
        except EmptyMask:
            continue
    return False


def regular_step(model, optimizer, images, masks) -> LossReport:
    """Supervised step without prototypes: the prototype slot of the decoder input is zero."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    dtype = _model_dtype(model)
    feats = model.encode(images_to_tensor(images, dtype))
    zero = torch.zeros(feats.shape[0], feats.shape[1], dtype=dtype)
    prob = model.fuse_and_decode(zero, feats)
    loss = few_shot_loss(prob, torch.as_tensor(np.asarray(masks), dtype=dtype))
    loss.backward()
    optimizer.step()
    value = float(loss.detach())
    return LossReport(value, 0.0, value, 0.0)


class Trainer:
    """Runs ``cfg.iterations`` steps; datasets may be supplied directly or via config paths."""

    def __init__(self, cfg: TrainConfig, dataset: ClassDataset | None = None,
                 split: DatasetSplit | None = None, pool=None, dtype=torch.float32):
        self.cfg = cfg.validate()
        if dataset is None:
            if not cfg.data_root:
                raise ConfigError("data_root", "no dataset given")
            dataset = load_class_dataset(cfg.data_root, cfg.model.input_size, cfg.model.in_channels)
        self.dataset = dataset
        self.split = split or split_classes(dataset, cfg.test_fraction, cfg.seed)
        if pool is None and cfg.pool_dir and cfg.u > 0 and cfg.lam > 0:
            pool = load_image_pool(cfg.pool_dir, cfg.model.input_size, cfg.model.in_channels)
        self.pool = pool
        if cfg.mode == "regular" and (cfg.u or cfg.k != 1):
            log.warning("mode=regular ignores k=%d and u=%d", cfg.k, cfg.u)
        if cfg.mode == "episodic" and cfg.lam > 0 and cfg.u == 0:
            log.warning("lambda=%g with u=0: no unlabeled images, surrogate term is 0", cfg.lam)
        self.use_surrogate = cfg.mode == "episodic" and cfg.u > 0 and cfg.lam > 0
        model_seed = derive_seed(cfg.seed, 0) >> 1
        self.model = FewShotSegNet(cfg.model, seed=model_seed).to(dtype)
        if cfg.encoder_weights:
            load_encoder_weights(self.model, cfg.encoder_weights)
        self.optimizer = make_optimizer(self.model, cfg)
        self.step = 0
        self.train_classes = sorted(self.split.train_classes)
        if cfg.mode == "episodic":
            self.stream = EpisodeStream(
                dataset, self.split.train_classes, cfg.k,
                u=cfg.u if self.use_surrogate else 0,
                base_seed=derive_seed(cfg.seed, 1),
                unlabeled_pool=self.pool if self.use_surrogate else None,
                augment=cfg.augment,
            )
        else:
            self.pairs = [(c, i) for c in self.train_classes for i in range(dataset.n_entries(c))]

    # -- state ----------------------------------------------------------------------------
    def meta(self):
        return {
            "step": self.step,
            "train_config": self.cfg.to_dict(),
            "train_classes": sorted(self.split.train_classes),
            "test_classes": sorted(self.split.test_classes),
        }

    def save(self, path) -> Path:
        return save_checkpoint(self.model, path, optimizer=self.optimizer, meta=self.meta())

    def resume(self, path):
        ckpt = load_checkpoint(path, expected_config=self.cfg.model)
        self.model.load_state_dict(ckpt.model.state_dict())
        if ckpt.optimizer_state is not None:
            self.optimizer.load_state_dict(ckpt.optimizer_state)
        self.step = int(ckpt.meta.get("step", 0))
        return self

    # -- steps ----------------------------------------------------------------------------
    def _episodes(self, step):
        e = self.cfg.episodes_per_step
        return [self.stream.episode(step * e + j) for j in range(e)]

    def _regular_batch(self, step):
        bs, n = self.cfg.batch_size, len(self.pairs)
        start = step * bs
        chosen = []
        while len(chosen) < bs:
            epoch, offset = divmod(start + len(chosen), n)
            perm = np.random.default_rng(derive_seed(self.cfg.seed, 3, epoch)).permutation(n)
            chosen.append(self.pairs[perm[offset]])
        images = [self.dataset.image(c, i) for c, i in chosen]
        if self.cfg.augment:
            images = [color_transform(derive_seed(self.cfg.seed, 5, start + j), self.dataset.channels)(im)
                      for j, im in enumerate(images)]
        masks = [self.dataset.mask(c, i) for c, i in chosen]
        return chosen, images, masks

    def run_step(self) -> dict:
        step, cfg = self.step, self.cfg
        if cfg.mode == "episodic":
            episodes = self._episodes(step)
            batch = None
            if self.use_surrogate:
                # u unlabeled images per optimizer step, whatever episodes_per_step is
                unlabeled = episodes[0].unlabeled
                batch = corrupt_batch(unlabeled, cfg.copies, cfg.sigma, derive_seed(cfg.seed, 2, step))

            def resample(i, attempt):
                return self.stream.episode(step * cfg.episodes_per_step + i, attempt)

            report = train_step(self.model, self.optimizer, episodes, batch, cfg.lam, resample)
            episode_class = episodes[0].class_id
            seed = episodes[0].seed
        else:
            chosen, images, masks = self._regular_batch(step)
            report = regular_step(self.model, self.optimizer, images, masks)
            episode_class = chosen[0][0]
            seed = derive_seed(cfg.seed, 3, step * cfg.batch_size // len(self.pairs))
        self.step += 1
        return {"step": step, **report.as_record(), "episode_class": episode_class, "seed": seed}

    def train(self, until: int | None = None) -> list[dict]:
        """Run up to step ``until`` (default ``cfg.iterations``); returns the step records."""
        cfg = self.cfg
        until = cfg.iterations if until is None else until
        log_fh = None
        if cfg.log_path:
            Path(cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
            log_fh = open(cfg.log_path, "a" if self.step else "w")
        records = []
        try:
            while self.step < until:
                rec = self.run_step()
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if cfg.checkpoint_dir and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save(Path(cfg.checkpoint_dir) / f"step_{self.step:06d}.ckpt")
                if cfg.eval_every and self.step % cfg.eval_every == 0:
                    self._periodic_eval()
        finally:
            if log_fh:
                log_fh.close()
        return records

    def _periodic_eval(self):
        from .evaluation import evaluate

        report = evaluate(self.model, self.dataset, self.split.test_classes, self.cfg.k,
                          self.cfg.eval_episodes, seed=self.cfg.seed)
        log.info("step %d: held-out mean DSC %.4f over %d episodes",
                 self.step, report.mean_dsc, report.n_episodes)


def train(cfg: TrainConfig, dataset=None, split=None, pool=None, resume_from=None) -> Path:
    """Full training run; writes ``final.ckpt`` into ``cfg.checkpoint_dir`` and returns its path."""
    if not cfg.checkpoint_dir:
        raise ConfigError("checkpoint_dir", "required to write the final checkpoint")
    trainer = Trainer(cfg, dataset, split, pool)
    if resume_from:
        trainer.resume(resume_from)
    trainer.train()
    return trainer.save(Path(cfg.checkpoint_dir) / "final.ckpt")


def train_regular(cfg: TrainConfig, dataset=None, split=None) -> Path:
    """Batch-wise supervised baseline; evaluated afterwards with the same prototype harness."""
    return train(replace(cfg, mode="regular"), dataset, split)
