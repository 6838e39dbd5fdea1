"""Assembly of the nine U-Net paths into the full segmentation system.

Per-path volume prediction and binarization, the 18-channel stack (each
path's mask interleaved with the original input volume), and the three
aggregation back-ends: 3D CNN post-processor, majority vote, and union.
"""

from __future__ import annotations

import numpy as np

from . import engine as eg
from .errors import DataError, DimensionError
from .preprocess import PATH_CONFIGS, PathConfig, flip_lr, normalize, restack, slice_volume
from .unet import InputMode, PathModel, path_forward
from .volume_io import Modality, ModelCheckpoint, Volume

THRESHOLD = 0.5
STACK_CHANNELS = 18
_PREDICT_BATCH = 32

#: Post-processor layer widths: 18 -> 36 -> 9 -> 9 -> 2, all 3x3x3 pad 1.
_POST_WIDTHS = (STACK_CHANNELS, 36, 9, 9, 2)


class PostProcessor:
    """Four 3x3x3 conv layers (relu after the first three) ending in 2 channels."""

    def __init__(self, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        for i in range(4):
            c_in, c_out = _POST_WIDTHS[i], _POST_WIDTHS[i + 1]
            self.layers.append((
                eg.Parameter(f"post.l{i + 1}.w",
                             eg.uniform_init(rng, (c_out, c_in, 3, 3, 3), c_in * 27, dtype)),
                eg.Parameter(f"post.l{i + 1}.b", np.zeros(c_out, dtype)),
            ))

    def parameters(self):
        return [p for pair in self.layers for p in pair]

    def forward(self, x):
        """Logits over [2, D, H, W]; apply softmax_channels for probabilities."""
        x = x if isinstance(x, eg.Tensor) else eg.Tensor(x)
        for i, (w, b) in enumerate(self.layers):
            x = eg.conv3d(x, w.value, b.value)
            if i < 3:
                x = eg.relu(x)
        return x


def binarize(prob: np.ndarray) -> np.ndarray:
    """Values below 0.5 round to 0, everything else (including 0.5) to 1."""
    return (np.asarray(prob) >= THRESHOLD).astype(np.float32)


def predict_path_volume(model: PathModel, config: PathConfig, t1: Volume,
                        secondary: Volume | None, mode: InputMode) -> Volume:
    """Normalize, slice, run the path over every slice, restack, binarize."""
    dims = t1.dims
    ia, ib = config.plane.inplane_axes
    if dims[ia] % 16 or dims[ib] % 16:
        raise DimensionError(
            f"in-plane dims {dims[ia]}x{dims[ib]} of plane {config.plane.name} "
            "must be divisible by 16"
        )
    if mode is InputMode.FLIP:
        second_vol = flip_lr(t1)
    else:
        if secondary is None:
            raise DataError("BIMODAL prediction needs a second-modality volume")
        if secondary.dims != dims:
            raise DimensionError(f"secondary dims {secondary.dims} != input dims {dims}")
        second_vol = secondary

    prim = np.stack(slice_volume(normalize(t1, config.plane, config.norm), config.plane))
    sec = np.stack(slice_volume(normalize(second_vol, config.plane, config.norm), config.plane))
    prim = prim[:, None, :, :]
    sec = sec[:, None, :, :]

    probs = []
    for start in range(0, prim.shape[0], _PREDICT_BATCH):
        out = path_forward(model, prim[start:start + _PREDICT_BATCH],
                           sec[start:start + _PREDICT_BATCH], mode=mode)
        probs.append(out.data[:, 0])
    prob_slices = list(np.concatenate(probs))
    mask = binarize(np.stack(prob_slices, axis=config.plane.normal_axis))
    return Volume(data=mask, voxel_mm=t1.voxel_mm, modality=Modality.MASK)


def build_stack(t1: Volume, masks) -> np.ndarray:
    """Interleave the nine binary path masks with the original input volume.

    Channel 2k holds path k's mask, channel 2k+1 the (un-normalized) input,
    giving the 18-channel tensor the post-processor consumes.
    """
    masks = list(masks)
    if len(masks) != 9:
        raise DimensionError(f"build_stack: expected 9 masks, got {len(masks)}")
    dims = t1.dims
    for i, m in enumerate(masks):
        if m.dims != dims:
            raise DimensionError(f"build_stack: mask {i} dims {m.dims} != input dims {dims}")
    stack = np.empty((STACK_CHANNELS,) + dims, dtype=np.float32)
    for k, m in enumerate(masks):
        stack[2 * k] = m.data
        stack[2 * k + 1] = t1.data
    return stack


def post_forward(post: PostProcessor, stacked: np.ndarray) -> tuple[Volume, Volume]:
    """Softmax-normalized lesion and complement probability volumes."""
    stacked = np.asarray(stacked, dtype=np.float32)
    if stacked.ndim != 4 or stacked.shape[0] != STACK_CHANNELS:
        raise DimensionError(
            f"post_forward: expected [{STACK_CHANNELS},D,H,W] input, got {stacked.shape}"
        )
    soft = eg.softmax_channels(post.forward(eg.Tensor(stacked)))
    lesion, complement = soft.data[0], soft.data[1]
    make = lambda d: Volume(data=d, modality=Modality.T1)
    return make(lesion), make(complement)


def _check_mask_dims(masks, op):
    masks = list(masks)
    if not masks:
        raise DataError(f"{op}: empty mask list")
    dims = masks[0].dims
    for i, m in enumerate(masks):
        if m.dims != dims:
            raise DimensionError(f"{op}: mask {i} dims {m.dims} != {dims}")
    return masks, dims


def aggregate_majority(masks) -> Volume:
    """Voxel is lesion iff a strict majority of the paths say so (5 of 9)."""
    masks, _ = _check_mask_dims(masks, "aggregate_majority")
    votes = np.sum([m.data for m in masks], axis=0)
    out = (votes >= len(masks) // 2 + 1).astype(np.float32)
    return Volume(data=out, voxel_mm=masks[0].voxel_mm, modality=Modality.MASK)


def aggregate_union(masks) -> Volume:
    """Voxelwise OR across all path masks."""
    masks, _ = _check_mask_dims(masks, "aggregate_union")
    out = (np.sum([m.data for m in masks], axis=0) >= 1).astype(np.float32)
    return Volume(data=out, voxel_mm=masks[0].voxel_mm, modality=Modality.MASK)


class NinePathModel:
    """The nine path models plus post-processor, in canonical path order."""

    def __init__(self, paths, post: PostProcessor, mode: InputMode):
        if len(paths) != 9:
            raise DimensionError(f"expected 9 path models, got {len(paths)}")
        self.paths = list(paths)
        self.post = post
        self.mode = mode
        self.threshold = THRESHOLD

    @classmethod
    def create(cls, seed: int = 0, mode: InputMode = InputMode.FLIP, dtype=np.float32):
        paths = [
            PathModel(k, rng=np.random.default_rng([seed, k]), dtype=dtype) for k in range(9)
        ]
        post = PostProcessor(rng=np.random.default_rng([seed, 9]), dtype=dtype)
        return cls(paths, post, mode)

    def parameters(self):
        params = []
        for path in self.paths:
            params.extend(path.parameters())
        params.extend(self.post.parameters())
        return params

    def predict_path_masks(self, t1: Volume, secondary: Volume | None = None):
        return [
            predict_path_volume(path, cfg, t1, secondary, self.mode)
            for path, cfg in zip(self.paths, PATH_CONFIGS)
        ]

    def predict_volume(self, t1: Volume, secondary: Volume | None = None,
                       aggregation: str = "cnn") -> Volume:
        """Full-system mask prediction with the chosen aggregation back-end."""
        masks = self.predict_path_masks(t1, secondary)
        if aggregation == "majority":
            return aggregate_majority(masks)
        if aggregation == "union":
            return aggregate_union(masks)
        if aggregation != "cnn":
            raise DataError(f"unknown aggregation {aggregation!r}")
        lesion_prob, _ = post_forward(self.post, build_stack(t1, masks))
        return Volume(data=binarize(lesion_prob.data), voxel_mm=t1.voxel_mm,
                      modality=Modality.MASK)

    # -- checkpoint plumbing --------------------------------------------------

    def to_checkpoint(self, config_hash: bytes | None = None) -> ModelCheckpoint:
        entries = [(p.name, p.value.data) for p in self.parameters()]
        entries.append(("meta.mode", np.array([0.0 if self.mode is InputMode.FLIP else 1.0])))
        if config_hash is not None:
            entries.append(("meta.config_hash",
                            np.frombuffer(config_hash, dtype=np.uint8).astype(np.float32)))
        return ModelCheckpoint(entries=entries)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint):
        """Rebuild a model from named entries; unknown entries are ignored."""
        if "meta.mode" not in ckpt:
            raise DataError("checkpoint is missing the meta.mode entry")
        mode = InputMode.FLIP if float(ckpt.get("meta.mode")[0]) == 0.0 else InputMode.BIMODAL
        model = cls.create(seed=0, mode=mode)
        table = dict(ckpt.entries)
        for p in model.parameters():
            if p.name not in table:
                raise DataError(f"checkpoint is missing parameter {p.name!r}")
            tensor = table[p.name]
            if tensor.shape != p.value.shape:
                raise DataError(
                    f"checkpoint entry {p.name!r} has shape {tensor.shape}, "
                    f"expected {p.value.shape}"
                )
            p.value.data = tensor.astype(p.value.dtype).copy()
            p.velocity = np.zeros_like(p.value.data)
        return model
