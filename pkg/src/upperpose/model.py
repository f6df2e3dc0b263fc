"""Full pipeline: image -> foreground tokens -> part retrieval and
interaction -> parameter heads -> posed mesh and projected keypoints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .body import (BodyTemplate, MeshOutput, SmplxParams, build_template,
                   pose_mesh)
from .errors import ConfigError
from .foreground import ForegroundExtractor, ForegroundFeatures, PfeConfig
from .interaction import (BODY_JOINTS, BoxNet, CollabEvolution, PartBoxes,
                          PartFeatureSet, RegressionHeads, RegressionOutput,
                          partition_torso_tokens, retrieve_part_features)
from .nn import ParamStore


@dataclass
class ModelOutput:
    params: SmplxParams
    boxes: PartBoxes
    mesh: MeshOutput
    foreground: ForegroundFeatures
    parts: PartFeatureSet
    regression: RegressionOutput


def regression_to_params(reg: RegressionOutput) -> SmplxParams:
    """Raw head outputs -> parameter block; the camera scale goes through
    exp so it is positive for any raw value (zero raw -> unit scale)."""
    body_pose = ag.reshape(reg.o_body[:BODY_JOINTS * 3], (BODY_JOINTS, 3))
    beta = reg.o_body[BODY_JOINTS * 3:BODY_JOINTS * 3 + 10]
    raw_cam = reg.o_body[BODY_JOINTS * 3 + 10:]
    jaw = ag.reshape(reg.o_face[:3], (1, 3))
    phi = reg.o_face[3:]
    theta = ag.concat([body_pose,
                       ag.reshape(reg.o_lhand, (15, 3)),
                       ag.reshape(reg.o_rhand, (15, 3)),
                       jaw], axis=0)
    camera = ag.concat([ag.texp(raw_cam[0:1]), raw_cam[1:3]], axis=0)
    return SmplxParams(theta=theta, beta=beta, phi=phi, camera=camera)


class UpperBodyModel:
    def __init__(self, seed: int, pfe_cfg: PfeConfig | None = None,
                 heads: int = 4, roi_grid: int = 4, interaction: str = "full",
                 pfe_enabled: bool = True, template: BodyTemplate | None = None,
                 template_rings: int = 3):
        pfe_cfg = pfe_cfg or PfeConfig()
        if pfe_cfg.feature_dim % heads != 0:
            raise ConfigError(
                f"feature_dim {pfe_cfg.feature_dim} not divisible by {heads} heads")
        self.store = ParamStore(seed)
        self.cfg = pfe_cfg
        self.roi_grid = roi_grid
        self.pfe = ForegroundExtractor(self.store, pfe_cfg, heads=heads,
                                       enabled=pfe_enabled)
        self.boxnet = BoxNet(self.store, pfe_cfg.feature_dim)
        self.cee = CollabEvolution(self.store, pfe_cfg.feature_dim, heads,
                                   mode=interaction)
        self.heads = RegressionHeads(self.store, pfe_cfg.feature_dim)
        self.template = template if template is not None else build_template(
            seed, rings=template_rings)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def forward(self, image: Tensor) -> ModelOutput:
        fg = self.pfe(image)
        d, hf, wf = fg.z_img.shape
        tokens = ag.transpose(ag.reshape(fg.z_img, (d, hf * wf)), (1, 0))
        boxes = self.boxnet(tokens)
        z_face, z_lhand, z_rhand = retrieve_part_features(fg.z_img, boxes,
                                                          grid=self.roi_grid)
        t_face, t_lhand, t_rhand = partition_torso_tokens(fg.z_human)
        parts = PartFeatureSet(z_face=z_face, z_lhand=z_lhand, z_rhand=z_rhand,
                               t_face=t_face, t_lhand=t_lhand, t_rhand=t_rhand)
        parts = self.cee.interact(parts)
        fused = self.cee.refine_fuse(parts.tt_face, parts.tt_lhand,
                                     parts.tt_rhand, fg.z_human)
        reg = self.heads(fused, parts.zt_face, parts.zt_lhand, parts.zt_rhand)
        params = regression_to_params(reg)
        mesh = pose_mesh(self.template, params)
        return ModelOutput(params=params, boxes=boxes, mesh=mesh,
                           foreground=fg, parts=parts, regression=reg)
