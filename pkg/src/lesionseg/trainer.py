"""Soft-Dice losses and the two-stage training procedure.

Stage 1 trains the nine path U-Nets independently on 2D slices (batches of
32, joint soft Dice over each batch). Stage 2 freezes the paths, caches the
18-channel stacks, and trains the 3D post-processor on whole volumes with
the two-channel complement loss. Binarization between the stages is what
forces the split: it has no useful gradient.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .engine import OptimizerConfig, Tensor, learning_rate, sgd_nesterov_step
from .errors import DataError, DimensionError
from .ninepath import NinePathModel, build_stack, predict_path_volume
from .preprocess import PATH_CONFIGS, PathConfig, flip_lr, normalize, slice_volume
from .unet import InputMode
from .volume_io import Manifest, ModelCheckpoint, read_volume


def dice_soft(p, r):
    """Soft Dice overlap 2*sum(p*r) / (sum(p^2) + sum(r^2)); empty-empty is 1.

    ``p`` may be a Tensor (gradients flow through it); ``r`` is a constant
    binary array of the same shape.
    """
    p = p if isinstance(p, Tensor) else Tensor(p)
    r = np.asarray(r, dtype=p.dtype)
    if p.shape != r.shape:
        raise DimensionError(f"dice_soft: shape mismatch {p.shape} vs {r.shape}")
    r_sq = float(np.sum(r * r, dtype=np.float64))
    overlap = eg.tensor_sum(eg.mul(p, Tensor(r)))
    p_sq = eg.tensor_sum(eg.mul(p, p))
    if r_sq == 0.0 and float(p_sq.data) == 0.0:
        return Tensor(np.asarray(1.0, dtype=p.dtype))
    return eg.div(eg.mul(overlap, 2.0), eg.add(p_sq, r_sq))


def loss_path(p, r):
    """Per-path training loss: 1 - dice_soft(p, r)."""
    return 1.0 - dice_soft(p, r)


def loss_post(p, q, r):
    """Two-channel loss 2 - (D(p, r) + D(q, 1-r)); zero iff both channels hard-match."""
    r = np.asarray(r)
    return 2.0 - dice_soft(p, r) - dice_soft(q, 1.0 - r)


@dataclass
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    mode: InputMode = InputMode.FLIP

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise DataError(f"epochs must be positive, got {self.epochs}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    label: str
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, epoch, mean_loss, lr, seconds):
        self.records.append(EpochRecord(epoch, float(mean_loss), float(lr), float(seconds)))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "lr", "seconds"])
            for rec in self.records:
                writer.writerow([rec.epoch, f"{rec.mean_loss:.8f}",
                                 f"{rec.lr:.10f}", f"{rec.seconds:.3f}"])


def _load_cases(manifest: Manifest, mode: InputMode):
    if not manifest.records:
        raise DataError("manifest has no records")
    cases = []
    dims = None
    for rec in manifest.records:
        t1 = read_volume(rec.input_volume_path)
        truth = read_volume(rec.truth_mask_path)
        flair = None
        if mode is InputMode.BIMODAL:
            if rec.second_input_path is None:
                raise DataError(f"case {rec.case_id!r}: bimodal mode needs second_input_path")
            flair = read_volume(rec.second_input_path)
            if flair.dims != t1.dims:
                raise DimensionError(f"case {rec.case_id!r}: modality dims differ")
        if truth.dims != t1.dims:
            raise DimensionError(f"case {rec.case_id!r}: truth dims differ from input")
        if dims is None:
            dims = t1.dims
            if any(d % 16 for d in dims):
                raise DimensionError(f"volume dims {dims} must be divisible by 16")
        elif t1.dims != dims:
            raise DimensionError(f"case {rec.case_id!r}: dims {t1.dims} != {dims}")
        cases.append((rec.case_id, t1, flair, truth))
    return cases


def build_slice_dataset(cases, config: PathConfig, mode: InputMode):
    """Normalized, plane-sliced arrays for one path: (primary, secondary, truth).

    Each array is [n_slices, 1, H, W] float32, pooled over all cases.
    """
    prim_all, sec_all, truth_all = [], [], []
    for _case_id, t1, flair, truth in cases:
        second_vol = flip_lr(t1) if mode is InputMode.FLIP else flair
        prim = normalize(t1, config.plane, config.norm)
        sec = normalize(second_vol, config.plane, config.norm)
        prim_all.extend(slice_volume(prim, config.plane))
        sec_all.extend(slice_volume(sec, config.plane))
        truth_all.extend(slice_volume(truth, config.plane))
    to_batch = lambda slices: np.stack(slices)[:, None, :, :].astype(np.float32)
    return to_batch(prim_all), to_batch(sec_all), to_batch(truth_all)


def _train_one_path(path, dataset, config: TrainConfig, rng, log: TrainLog):
    prim, sec, truth = dataset
    n = prim.shape[0]
    params = path.parameters()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out = path.forward(Tensor(prim[idx]), Tensor(sec[idx]))
            loss = loss_path(out, truth[idx])
            loss.backward()
            sgd_nesterov_step(params, config.optimizer, epoch)
            losses.append(float(loss.data))
        log.append(epoch, np.mean(losses), learning_rate(config.optimizer, epoch),
                   time.perf_counter() - t0)


def train_paths(manifest: Manifest, config: TrainConfig,
                model: NinePathModel | None = None):
    """Stage 1: train the nine path U-Nets independently.

    Returns ``(checkpoint, logs)``; the checkpoint holds all nine trained
    paths plus the still-untrained post-processor so stage 2 can resume
    from it. Deterministic given ``config.seed`` in reference mode.
    """
    cases = _load_cases(manifest, config.mode)
    if model is None:
        model = NinePathModel.create(seed=config.seed, mode=config.mode)
    logs = []
    for k, (path, path_cfg) in enumerate(zip(model.paths, PATH_CONFIGS)):
        dataset = build_slice_dataset(cases, path_cfg, config.mode)
        rng = np.random.default_rng([config.seed, 100 + k])
        log = TrainLog(label=f"path{k}")
        _train_one_path(path, dataset, config, rng, log)
        logs.append(log)
    return model.to_checkpoint(), logs


def train_post(manifest: Manifest, paths_checkpoint: ModelCheckpoint,
               config: TrainConfig):
    """Stage 2: freeze the paths, train the 3D post-processor on cached stacks.

    Returns ``(checkpoint, log)`` where the checkpoint carries the untouched
    path parameters plus the trained post-processor.
    """
    model = NinePathModel.from_checkpoint(paths_checkpoint)
    cases = _load_cases(manifest, model.mode)

    stacks, truths = [], []
    for _case_id, t1, flair, truth in cases:
        masks = model.predict_path_masks(t1, flair)
        stacks.append(build_stack(t1, masks))
        truths.append(truth.data.astype(np.float32))

    params = model.post.parameters()
    rng = np.random.default_rng([config.seed, 999])
    log = TrainLog(label="post")
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(stacks))
        losses = []
        for i in order:
            soft = eg.softmax_channels(model.post.forward(Tensor(stacks[i])))
            p, q = eg.split_pair(soft, axis=0)
            loss = loss_post(p, q, truths[i])
            loss.backward()
            sgd_nesterov_step(params, config.optimizer, epoch)
            losses.append(float(loss.data))
        log.append(epoch, np.mean(losses), learning_rate(config.optimizer, epoch),
                   time.perf_counter() - t0)
    return model.to_checkpoint(), log
