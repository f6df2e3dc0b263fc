"""Part retrieval and bidirectional token interaction.

A box head predicts face / left-hand / right-hand boxes from the pooled
backbone tokens; each box is sampled on a small bilinear grid to retrieve
part tokens from the shared feature map (differentiable in both the map and
the box coordinates). The prior tokens are partitioned into three torso
segments, each part exchanges information with its segment through a pair of
attention-correction blocks, the refined segments are fused back into the
global body representation, and per-part MLP heads regress the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .nn import CorrBlock, LayerNorm, Linear, Mlp, ParamStore

BODY_JOINTS = 22
HAND_JOINTS = 15
JAW_JOINTS = 1
TOTAL_JOINTS = BODY_JOINTS + 2 * HAND_JOINTS + JAW_JOINTS  # 53


@dataclass
class PartBoxes:
    """Normalized (cx, cy, w, h) boxes, one per expressive part."""
    face: Tensor
    lhand: Tensor
    rhand: Tensor

    def flat(self) -> Tensor:
        return ag.concat([self.face, self.lhand, self.rhand], axis=0)

    def numpy(self) -> np.ndarray:
        return np.stack([self.face.data, self.lhand.data, self.rhand.data])


@dataclass
class PartFeatureSet:
    z_face: Tensor
    z_lhand: Tensor
    z_rhand: Tensor
    t_face: Tensor
    t_lhand: Tensor
    t_rhand: Tensor
    zt_face: Tensor | None = None    # refined counterparts
    zt_lhand: Tensor | None = None
    zt_rhand: Tensor | None = None
    tt_face: Tensor | None = None
    tt_lhand: Tensor | None = None
    tt_rhand: Tensor | None = None


@dataclass
class RegressionOutput:
    o_body: Tensor    # 22x3 pose + 10 shape + 3 camera = 79
    o_face: Tensor    # 1x3 jaw + 10 expression = 13
    o_lhand: Tensor   # 45
    o_rhand: Tensor   # 45


class BoxNet:
    def __init__(self, ps: ParamStore, dim: int, hidden: int | None = None):
        # raw backbone tokens have no scale control; normalize the pooled
        # vector so the sigmoid outputs are not born saturated
        self.norm = LayerNorm(ps, "boxnet.ln", dim)
        # zero-initialized final layer: every box starts at sigmoid(0) = 0.5
        self.mlp = Mlp(ps, "boxnet", dim, hidden or dim, 12, zero_last=True)

    def __call__(self, backbone_tokens: Tensor) -> PartBoxes:
        if backbone_tokens.ndim != 2 or backbone_tokens.shape[0] < 1:
            raise DimensionError(f"expected NxD tokens, got {backbone_tokens.shape}")
        pooled = self.norm(backbone_tokens.mean(axis=0, keepdims=True))
        raw = ag.reshape(ag.sigmoid(self.mlp(pooled)), (3, 4))
        return PartBoxes(face=raw[0], lhand=raw[1], rhand=raw[2])


def retrieve_part_features(feature_map: Tensor, boxes: PartBoxes,
                           grid: int = 4) -> tuple[Tensor, Tensor, Tensor]:
    """Sample each box on a grid x grid pattern of cell centers -> R x D tokens."""
    return (roi_tokens(feature_map, boxes.face, grid),
            roi_tokens(feature_map, boxes.lhand, grid),
            roi_tokens(feature_map, boxes.rhand, grid))


def roi_tokens(feature_map: Tensor, box: Tensor, grid: int) -> Tensor:
    d, hf, wf = feature_map.shape
    min_side = 2.0 / max(hf, wf)
    cx, cy = box[0], box[1]
    w = ag.where(box.data[2] >= min_side, box[2], Tensor(min_side))
    h = ag.where(box.data[3] >= min_side, box[3], Tensor(min_side))
    # cell centers, offsets in (-0.5, 0.5) box units
    off = (np.arange(grid) + 0.5) / grid - 0.5
    xs = cx + Tensor(off) * w                      # (g,)
    ys = cy + Tensor(off) * h
    ymat = ag.reshape(ys, (grid, 1)) + Tensor(np.zeros((grid, grid)))
    xmat = ag.reshape(xs, (1, grid)) + Tensor(np.zeros((grid, grid)))
    # normalized [0,1] -> pixel-center coordinates on the feature map
    py = ag.reshape(ymat * hf - 0.5, (grid * grid, 1))
    px = ag.reshape(xmat * wf - 0.5, (grid * grid, 1))
    points = ag.concat([py, px], axis=1)
    samples = ag.bilinear_sample(feature_map, points)   # D x R
    return ag.transpose(samples, (1, 0))


def partition_torso_tokens(z_human: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    p = z_human.shape[0]
    if p % 3 != 0:
        raise ConfigError(f"prior token count {p} not divisible by 3")
    third = p // 3
    return z_human[:third], z_human[third:2 * third], z_human[2 * third:]


class CollabEvolution:
    """Six correction blocks (two directions x three parts), RefineNet fusion,
    and the optional single self-attention block of the Variant1 ablation."""

    def __init__(self, ps: ParamStore, dim: int, heads: int, mode: str = "full"):
        if mode not in ("full", "variant1", "none"):
            raise ConfigError(f"unknown interaction mode: {mode}")
        self.mode = mode
        self.dim = dim
        self.blocks = {}
        for part in ("face", "lhand", "rhand"):
            self.blocks[f"z_{part}"] = CorrBlock(ps, f"cee.corr.z_{part}", dim, heads)
            self.blocks[f"t_{part}"] = CorrBlock(ps, f"cee.corr.t_{part}", dim, heads)
        self.variant1_block = CorrBlock(ps, "cee.variant1", dim, heads)
        self.refine = Mlp(ps, "cee.refinenet", dim, 2 * dim, dim, zero_last=True)

    def bidirectional_interact(self, parts: PartFeatureSet) -> PartFeatureSet:
        parts.zt_face = self.blocks["z_face"](parts.z_face, parts.t_face)
        parts.tt_face = self.blocks["t_face"](parts.t_face, parts.z_face)
        parts.zt_lhand = self.blocks["z_lhand"](parts.z_lhand, parts.t_lhand)
        parts.tt_lhand = self.blocks["t_lhand"](parts.t_lhand, parts.z_lhand)
        parts.zt_rhand = self.blocks["z_rhand"](parts.z_rhand, parts.t_rhand)
        parts.tt_rhand = self.blocks["t_rhand"](parts.t_rhand, parts.z_rhand)
        return parts

    def variant1_fuse(self, parts: PartFeatureSet) -> PartFeatureSet:
        groups = [parts.z_face, parts.z_lhand, parts.z_rhand,
                  parts.t_face, parts.t_lhand, parts.t_rhand]
        sizes = [g.shape[0] for g in groups]
        cat = ag.concat(groups, axis=0)
        fused = self.variant1_block(cat, cat)
        bounds = np.cumsum(sizes)
        (parts.zt_face, parts.zt_lhand, parts.zt_rhand,
         parts.tt_face, parts.tt_lhand, parts.tt_rhand) = (
            fused[0:bounds[0]], fused[bounds[0]:bounds[1]], fused[bounds[1]:bounds[2]],
            fused[bounds[2]:bounds[3]], fused[bounds[3]:bounds[4]], fused[bounds[4]:bounds[5]])
        return parts

    def interact(self, parts: PartFeatureSet) -> PartFeatureSet:
        if self.mode == "full":
            return self.bidirectional_interact(parts)
        if self.mode == "variant1":
            return self.variant1_fuse(parts)
        parts.zt_face, parts.zt_lhand, parts.zt_rhand = (
            parts.z_face, parts.z_lhand, parts.z_rhand)
        parts.tt_face, parts.tt_lhand, parts.tt_rhand = (
            parts.t_face, parts.t_lhand, parts.t_rhand)
        return parts

    def refine_fuse(self, tt_face: Tensor, tt_lhand: Tensor, tt_rhand: Tensor,
                    z_human: Tensor) -> Tensor:
        cat = ag.concat([tt_face, tt_lhand, tt_rhand], axis=0)
        return z_human + self.refine(cat)


class RegressionHeads:
    def __init__(self, ps: ParamStore, dim: int, hidden: int | None = None):
        hidden = hidden or 2 * dim
        # pooled features come out of a residual stack with no scale control;
        # normalizing them keeps the regression MLPs well conditioned
        self.norms = {part: LayerNorm(ps, f"heads.{part}.ln", dim)
                      for part in ("body", "face", "lhand", "rhand")}
        # zero-initialized final layers: the untrained model predicts the
        # neutral pose and mean shape
        self.body = Mlp(ps, "heads.body", dim, hidden, BODY_JOINTS * 3 + 10 + 3,
                        zero_last=True)
        self.face = Mlp(ps, "heads.face", dim, hidden, JAW_JOINTS * 3 + 10,
                        zero_last=True)
        self.lhand = Mlp(ps, "heads.lhand", dim, hidden, HAND_JOINTS * 3,
                         zero_last=True)
        self.rhand = Mlp(ps, "heads.rhand", dim, hidden, HAND_JOINTS * 3,
                         zero_last=True)

    def _pool(self, part: str, tokens: Tensor) -> Tensor:
        return self.norms[part](tokens.mean(axis=0, keepdims=True))

    def __call__(self, fused_body: Tensor, zt_face: Tensor, zt_lhand: Tensor,
                 zt_rhand: Tensor) -> RegressionOutput:
        return RegressionOutput(
            o_body=ag.reshape(self.body(self._pool("body", fused_body)), (-1,)),
            o_face=ag.reshape(self.face(self._pool("face", zt_face)), (-1,)),
            o_lhand=ag.reshape(self.lhand(self._pool("lhand", zt_lhand)), (-1,)),
            o_rhand=ag.reshape(self.rhand(self._pool("rhand", zt_rhand)), (-1,)),
        )
