"""Foreground-focused feature extraction.

A small convolutional encoder produces a feature map; adaptive pooling along
each spatial axis yields directional context maps whose broadcast sum forms a
coarse foreground activation map. Horizontal and vertical strip convolutions
refine it (residually, so zeroed strips are the identity), and a set of
learned query tokens aggregates the refined map into prior interaction tokens
via cross-attention plus a feed-forward layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .nn import Conv2d, LayerNorm, Mlp, MultiHeadAttention, ParamStore


def position_features(hf: int, wf: int, dim: int) -> np.ndarray:
    """Fixed 2D sine/cosine position features, one row per map position.

    Half the channels encode the row index, half the column index, each over
    a geometric frequency ladder. Without these the query aggregation is
    permutation-invariant over map positions and cannot express even a plain
    spatial pooling of the map.
    """
    half = dim // 2

    def axis(n: int, d: int) -> np.ndarray:
        pos = np.arange(n, dtype=float)[:, None]
        k = np.arange(d // 2, dtype=float)[None, :]
        ang = pos / (100.0 ** (2.0 * k / d))
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    rows = axis(hf, half)                      # hf x half
    cols = axis(wf, dim - half)                # wf x (dim - half)
    feat = np.concatenate([
        np.repeat(rows, wf, axis=0),
        np.tile(cols, (hf, 1)),
    ], axis=1)
    return feat


@dataclass
class PfeConfig:
    feature_dim: int = 64      # D, channel count of the shared feature map
    prior_tokens: int = 12     # P, must split evenly into the three parts
    strip_len: int = 7         # k, odd so same-padding is symmetric

    def validate(self) -> None:
        if self.prior_tokens % 3 != 0:
            raise ConfigError(f"prior_tokens must be a multiple of 3, got {self.prior_tokens}")
        if self.strip_len % 2 == 0:
            raise ConfigError(f"strip_len must be odd, got {self.strip_len}")
        if self.feature_dim < 4 or self.feature_dim % 4 != 0:
            raise ConfigError(
                f"feature_dim must be a positive multiple of 4 (position "
                f"features split sin/cos per axis), got {self.feature_dim}")


@dataclass
class ForegroundFeatures:
    z_img: Tensor          # D x H_f x W_f
    z_horizontal: Tensor   # D x H_f x 1
    z_vertical: Tensor     # D x 1 x W_f
    z_rec: Tensor          # D x H_f x W_f
    z_human: Tensor        # P x D


class ForegroundExtractor:
    STRIDE = 4  # two stride-2 encoder stages

    def __init__(self, ps: ParamStore, cfg: PfeConfig, heads: int = 4,
                 enabled: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.enabled = enabled
        d = cfg.feature_dim
        mid = max(d // 4, 4)
        k = cfg.strip_len
        pad = (k - 1) // 2
        # gain > 1 so the encoder output reaches unit-scale activations; the
        # output LayerNorm is scale-invariant, but normalizing a near-zero
        # signal makes its input-side derivatives (and so the training
        # dynamics of everything upstream) badly conditioned
        self.conv1 = Conv2d(ps, "pfe.encoder.conv1", 3, mid, (3, 3), stride=2,
                            padding=(1, 1), gain=8.0)
        self.conv2 = Conv2d(ps, "pfe.encoder.conv2", mid, d, (3, 3), stride=2,
                            padding=(1, 1), gain=8.0)
        self.strip_h = Conv2d(ps, "pfe.strip_h", d, d, (1, k), padding=(0, pad))
        self.strip_v = Conv2d(ps, "pfe.strip_v", d, d, (k, 1), padding=(pad, 0))
        self.queries = ps.param("pfe.queries", (cfg.prior_tokens, d), "glorot",
                                fan=(d, d))
        self.agg_attn = MultiHeadAttention(ps, "pfe.agg.attn", d, heads)
        # zero-initialized final layer: the query aggregation starts as a
        # no-op correction on top of the pooled tokens and has to earn its
        # contribution through training
        self.agg_ffn = Mlp(ps, "pfe.agg.ffn", d, 2 * d, d, zero_last=True)
        # output normalization: raw conv/attention features carry no scale
        # control, so normalize per token before anything consumes them
        self.norm_map = LayerNorm(ps, "pfe.ln_map", d)
        self.norm_tokens = LayerNorm(ps, "pfe.ln_tokens", d)

    # ---- stages ---------------------------------------------------------
    def encode_image(self, image: Tensor) -> Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"expected 3xHxW image, got {image.shape}")
        _, h, w = image.shape
        if h % self.STRIDE or w % self.STRIDE:
            raise DimensionError(
                f"image extents {h}x{w} not divisible by encoder stride {self.STRIDE}")
        return ag.gelu(self.conv2(ag.gelu(self.conv1(image))))

    def directional_context(self, z_img: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        _, hf, wf = z_img.shape
        z_horizontal = ag.adaptive_avg_pool(z_img, hf, 1)
        z_vertical = ag.adaptive_avg_pool(z_img, 1, wf)
        z_rec = z_horizontal + z_vertical
        return z_horizontal, z_vertical, z_rec

    def strip_refine(self, z_rec: Tensor) -> Tensor:
        return z_rec + self.strip_h(z_rec) + self.strip_v(z_rec)

    def aggregate_prior_tokens(self, refined: Tensor) -> Tensor:
        d, hf, wf = refined.shape
        keys = ag.transpose(ag.reshape(refined, (d, hf * wf)), (1, 0))
        return self.agg_ffn(self.agg_attn(self.queries, keys, keys))

    def position_tagged(self, refined: Tensor) -> Tensor:
        """Add the fixed position features to a refined map, channels-first.

        Aggregation attention is permutation-invariant over map positions;
        tagging the map with where each feature sits lets the queries select
        spatial regions, not just feature patterns.
        """
        d, hf, wf = refined.shape
        pe = position_features(hf, wf, d).T.reshape(d, hf, wf)
        return refined + Tensor(pe)

    def pooled_tokens(self, z_img: Tensor) -> Tensor:
        """Variant2 replacement: mean-pooled backbone tokens reshaped to P x D."""
        p = self.cfg.prior_tokens
        pooled = ag.adaptive_avg_pool(z_img, p, 1)  # D x P x 1
        return ag.transpose(ag.reshape(pooled, (self.cfg.feature_dim, p)), (1, 0))

    def normalize_map(self, z_img: Tensor) -> Tensor:
        d, hf, wf = z_img.shape
        tokens = ag.transpose(ag.reshape(z_img, (d, hf * wf)), (1, 0))
        normed = self.norm_map(tokens)
        return ag.reshape(ag.transpose(normed, (1, 0)), (d, hf, wf))

    def __call__(self, image: Tensor) -> ForegroundFeatures:
        z_img = self.normalize_map(self.encode_image(image))
        z_h, z_v, z_rec = self.directional_context(z_img)
        # pooled tokens carry the coarse spatial layout; the foreground query
        # aggregation refines them residually (exactly zero at initialization)
        z_human = self.pooled_tokens(z_img)
        if self.enabled:
            z_human = z_human + self.aggregate_prior_tokens(
                self.position_tagged(self.strip_refine(z_rec)))
        return ForegroundFeatures(z_img=z_img, z_horizontal=z_h, z_vertical=z_v,
                                  z_rec=z_rec, z_human=self.norm_tokens(z_human))
