"""Dual-encoder U-Net used by each of the nine (plane, normalization) paths.

Two five-block encoders (one for the primary slice, one for its left-right
flip or the second modality) feed per-level feature fusion through a 2x1x1
stacked convolution; a four-level decoder with additive skips and a sigmoid
head produces the per-slice lesion probability map.
"""

from __future__ import annotations

import enum

import numpy as np

from . import engine as eg
from .errors import DataError, DimensionError

CHANNELS = 32
LEVELS = 5


class InputMode(enum.Enum):
    FLIP = "flip"          # encoder B sees the left-right-flipped primary
    BIMODAL = "bimodal"    # encoder B sees the co-registered second modality


class ConvBlock:
    """Two 3x3 stride-1 pad-1 convolutions, relu after each."""

    def __init__(self, prefix: str, c_in: int, c_out: int, rng, dtype):
        self.w1 = eg.Parameter(f"{prefix}c1.w",
                               eg.uniform_init(rng, (c_out, c_in, 3, 3), c_in * 9, dtype))
        self.b1 = eg.Parameter(f"{prefix}c1.b", np.zeros(c_out, dtype))
        self.w2 = eg.Parameter(f"{prefix}c2.w",
                               eg.uniform_init(rng, (c_out, c_out, 3, 3), c_out * 9, dtype))
        self.b2 = eg.Parameter(f"{prefix}c2.b", np.zeros(c_out, dtype))

    def __call__(self, x):
        x = eg.relu(eg.conv2d(x, self.w1.value, self.b1.value))
        return eg.relu(eg.conv2d(x, self.w2.value, self.b2.value))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


class Encoder:
    """Five conv blocks with 2x2 average pooling after blocks 1-4."""

    def __init__(self, prefix: str, rng, dtype):
        self.blocks = [
            ConvBlock(f"{prefix}b{i + 1}", 1 if i == 0 else CHANNELS, CHANNELS, rng, dtype)
            for i in range(LEVELS)
        ]

    def parameters(self):
        return [p for block in self.blocks for p in block.parameters()]


def encode(x, encoder: Encoder):
    """Run the encoder; returns the five per-level feature tensors.

    For input H x W (both divisible by 16) the level-l features have shape
    32 x H/2^l x W/2^l for l = 0..4.
    """
    h, w = np.shape(x.data if isinstance(x, eg.Tensor) else x)[-2:]
    if h % 16 or w % 16:
        raise DimensionError(f"encoder input dims must be divisible by 16, got {h}x{w}")
    features = []
    for i, block in enumerate(encoder.blocks):
        if i > 0:
            x = eg.avg_pool2(x)
        x = block(x)
        features.append(x)
    return features


def fuse(feat_a, feat_b, kernel, bias):
    """Merge the two encoders' level features through a 2x1x1 3D convolution.

    The pair is stacked into an extra depth axis, convolved per channel with
    the shared two-tap kernel, and squeezed back to the feature shape.
    """
    if feat_a.shape != feat_b.shape:
        raise DimensionError(f"fuse: shape mismatch {feat_a.shape} vs {feat_b.shape}")
    stacked = eg.stack_pair(feat_a, feat_b)               # [..., C, 2, h, w]
    shape = stacked.shape
    h, w = shape[-2:]
    flat = eg.reshape(stacked, (-1, 1, 2, h, w))          # channels become the batch
    out = eg.conv3d(flat, kernel, bias)                   # [N*C, 1, 1, h, w]
    return eg.reshape(out, feat_a.shape)


class Decoder:
    """Four deconv+conv-block levels with additive skips, then a 1x1 sigmoid head."""

    def __init__(self, prefix: str, head_prefix: str, rng, dtype):
        self.deconvs = []
        self.blocks = []
        for level in (3, 2, 1, 0):
            self.deconvs.append((
                eg.Parameter(f"{prefix}d{level}.w",
                             eg.uniform_init(rng, (CHANNELS, CHANNELS, 2, 2), CHANNELS, dtype)),
                eg.Parameter(f"{prefix}d{level}.b", np.zeros(CHANNELS, dtype)),
            ))
            self.blocks.append(ConvBlock(f"{prefix}b{level}", CHANNELS, CHANNELS, rng, dtype))
        self.head_w = eg.Parameter(f"{head_prefix}c.w",
                                   eg.uniform_init(rng, (1, CHANNELS, 1, 1), CHANNELS, dtype))
        self.head_b = eg.Parameter(f"{head_prefix}c.b", np.zeros(1, dtype))

    def parameters(self):
        params = []
        for (w, b), block in zip(self.deconvs, self.blocks):
            params.extend([w, b])
            params.extend(block.parameters())
        params.extend([self.head_w, self.head_b])
        return params


def decode(fused, decoder: Decoder, combine: str = "add"):
    """Decode the five fused feature levels into a probability map.

    Starting from the level-4 features: four rounds of deconv (doubling),
    elementwise combination with the matching-level fused features (addition;
    ``combine="mul"`` is an ablation hook), and a conv block whose relus fire
    after the combination. A 1x1 convolution plus sigmoid finishes the map.
    """
    if len(fused) != LEVELS:
        raise DimensionError(f"decode: expected {LEVELS} fused levels, got {len(fused)}")
    if combine not in ("add", "mul"):
        raise DataError(f"decode: unknown combine mode {combine!r}")
    x = fused[4]
    for (dw, db), block, level in zip(decoder.deconvs, decoder.blocks, (3, 2, 1, 0)):
        x = eg.deconv2(x, dw.value, db.value)
        skip = fused[level]
        if x.shape != skip.shape:
            raise DimensionError(
                f"decode: level {level} shape {skip.shape} does not match upsampled {x.shape}"
            )
        x = eg.add(x, skip) if combine == "add" else eg.mul(x, skip)
        x = block(x)
    return eg.sigmoid(eg.conv2d(x, decoder.head_w.value, decoder.head_b.value))


class PathModel:
    """One of the nine U-Net paths; they differ only in input geometry."""

    def __init__(self, index: int, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(index)
        prefix = f"p{index}."
        self.index = index
        self.enc_a = Encoder(f"{prefix}encA.", rng, dtype)
        self.enc_b = Encoder(f"{prefix}encB.", rng, dtype)
        self.fusers = [
            (
                eg.Parameter(f"{prefix}fuse.l{level}.w",
                             eg.uniform_init(rng, (1, 1, 2, 1, 1), 2, dtype)),
                eg.Parameter(f"{prefix}fuse.l{level}.b", np.zeros(1, dtype)),
            )
            for level in range(LEVELS)
        ]
        self.decoder = Decoder(f"{prefix}dec.", f"{prefix}head.", rng, dtype)

    def parameters(self):
        params = self.enc_a.parameters() + self.enc_b.parameters()
        for w, b in self.fusers:
            params.extend([w, b])
        params.extend(self.decoder.parameters())
        return params

    def forward(self, primary, secondary, combine: str = "add"):
        return path_forward(self, primary, secondary, combine=combine)


def path_forward(model: PathModel, primary, secondary, mode: InputMode | None = None,
                 combine: str = "add"):
    """Encode both inputs, fuse per level, decode to the probability map.

    ``primary``/``secondary`` are ``[1,H,W]`` slices or ``[N,1,H,W]`` batches;
    in FLIP mode the secondary must be the volume-flipped slice, in BIMODAL
    the co-registered second-modality slice.
    """
    if secondary is None:
        raise DataError(
            "secondary slice missing"
            + (" (BIMODAL mode needs the second modality)" if mode is InputMode.BIMODAL else "")
        )
    primary = primary if isinstance(primary, eg.Tensor) else eg.Tensor(primary)
    secondary = secondary if isinstance(secondary, eg.Tensor) else eg.Tensor(secondary)
    if primary.shape != secondary.shape:
        raise DimensionError(
            f"primary/secondary shape mismatch: {primary.shape} vs {secondary.shape}"
        )
    feats_a = encode(primary, model.enc_a)
    feats_b = encode(secondary, model.enc_b)
    fused = [
        fuse(fa, fb, w.value, b.value)
        for fa, fb, (w, b) in zip(feats_a, feats_b, model.fusers)
    ]
    return decode(fused, model.decoder, combine=combine)
