"""Training objective (unweighted L1 sum of parameter, keypoint, and box
terms) and per-vertex evaluation metrics with and without Procrustes
alignment. Loss functions operate on autograd tensors; metrics are plain
numpy, evaluation never needs gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .body import SmplxParams
from .errors import ConfigError, DimensionError, NumericError
from .interaction import PartBoxes


@dataclass
class LossBreakdown:
    l_param: Tensor
    l_kpts: Tensor
    l_bbox: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return (self.l_param.item(), self.l_kpts.item(),
                self.l_bbox.item(), self.total.item())


@dataclass
class MetricReport:
    """Millimeter errors, All/Hand/Face x plain/Procrustes-aligned."""
    mpvpe_all: float
    mpvpe_hand: float
    mpvpe_face: float
    pa_mpvpe_all: float
    pa_mpvpe_hand: float
    pa_mpvpe_face: float

    FIELDS = ("mpvpe_all", "mpvpe_hand", "mpvpe_face",
              "pa_mpvpe_all", "pa_mpvpe_hand", "pa_mpvpe_face")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


# ---- loss terms -------------------------------------------------------------

def loss_param(pred: SmplxParams, gt: SmplxParams) -> Tensor:
    """Mean absolute difference over the 159 + 10 + 10 model parameters
    (camera is not a body-model parameter; it trains through the 2D term)."""
    flat_pred = ag.concat([ag.reshape(pred.theta, (-1,)), pred.beta, pred.phi], axis=0)
    flat_gt = ag.concat([ag.reshape(gt.theta, (-1,)), gt.beta, gt.phi], axis=0)
    return ag.tabs(flat_pred - flat_gt).mean()


def loss_kpts(pred3d: Tensor, gt3d: Tensor, pred2d: Tensor, gt2d: Tensor) -> Tensor:
    if pred3d.shape != gt3d.shape or pred2d.shape != gt2d.shape:
        raise DimensionError("keypoint shape mismatch between prediction and ground truth")
    return ag.tabs(pred3d - gt3d).mean() + ag.tabs(pred2d - gt2d).mean()


def loss_bbox(pred: PartBoxes, gt: PartBoxes) -> Tensor:
    return ag.tabs(pred.flat() - gt.flat()).mean()


def total_loss(pred_params: SmplxParams, gt_params: SmplxParams,
               pred3d: Tensor, gt3d: Tensor, pred2d: Tensor, gt2d: Tensor,
               pred_boxes: PartBoxes, gt_boxes: PartBoxes,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> LossBreakdown:
    lp = loss_param(pred_params, gt_params)
    lk = loss_kpts(pred3d, gt3d, pred2d, gt2d)
    lb = loss_bbox(pred_boxes, gt_boxes)
    total = weights[0] * lp + weights[1] * lk + weights[2] * lb
    return LossBreakdown(l_param=lp, l_kpts=lk, l_bbox=lb, total=total)


# ---- evaluation metrics ------------------------------------------------------

def mpvpe(pred_vertices: np.ndarray, gt_vertices: np.ndarray,
          region_mask: np.ndarray | None = None,
          pred_root: np.ndarray | None = None,
          gt_root: np.ndarray | None = None) -> float:
    """Mean per-vertex error in mm after root-translation alignment."""
    pred_vertices = np.asarray(pred_vertices, dtype=np.float64)
    gt_vertices = np.asarray(gt_vertices, dtype=np.float64)
    if pred_vertices.shape != gt_vertices.shape:
        raise DimensionError("vertex count mismatch between prediction and ground truth")
    if region_mask is not None:
        region_mask = np.asarray(region_mask, dtype=bool)
        if not region_mask.any():
            raise ConfigError("empty region mask for MPVPE")
    if pred_root is not None:
        pred_vertices = pred_vertices - np.asarray(pred_root).reshape(1, 3)
    if gt_root is not None:
        gt_vertices = gt_vertices - np.asarray(gt_root).reshape(1, 3)
    diff = pred_vertices - gt_vertices
    if region_mask is not None:
        diff = diff[region_mask]
    return float(np.linalg.norm(diff, axis=1).mean() * 1000.0)


def procrustes_align(pred: np.ndarray, gt: np.ndarray,
                     with_scale: bool = True) -> np.ndarray:
    """Similarity (or rigid) transform of pred minimizing squared error to gt."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise DimensionError("procrustes needs matching NxD point sets")
    if pred.shape[0] < 3:
        raise NumericError("procrustes needs at least 3 points")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    pc = pred - mu_p
    gc = gt - mu_g
    cov = gc.T @ pc / pred.shape[0]
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-12 * max(s[0], 1e-30):
        raise NumericError("degenerate (collinear) point configuration in procrustes")
    d = np.sign(np.linalg.det(u @ vt))
    diag = np.ones(pred.shape[1])
    diag[-1] = d
    rot = u @ np.diag(diag) @ vt
    if with_scale:
        var_p = (pc * pc).sum() / pred.shape[0]
        scale = (s[:-1].sum() + s[-1] * d) / var_p
    else:
        scale = 1.0
    t = mu_g - scale * rot @ mu_p
    return scale * pred @ rot.T + t


def pa_mpvpe(pred_vertices: np.ndarray, gt_vertices: np.ndarray,
             region_mask: np.ndarray | None = None,
             with_scale: bool = True) -> float:
    pred_vertices = np.asarray(pred_vertices, dtype=np.float64)
    gt_vertices = np.asarray(gt_vertices, dtype=np.float64)
    if region_mask is not None:
        region_mask = np.asarray(region_mask, dtype=bool)
        if region_mask.sum() < 3:
            raise NumericError("PA-MPVPE needs at least 3 masked vertices")
        pred_vertices = pred_vertices[region_mask]
        gt_vertices = gt_vertices[region_mask]
    aligned = procrustes_align(pred_vertices, gt_vertices, with_scale=with_scale)
    return float(np.linalg.norm(aligned - gt_vertices, axis=1).mean() * 1000.0)


def mesh_report(pairs, masks: dict, with_scale: bool = True) -> MetricReport:
    """Average metrics over (pred_vertices, gt_vertices, pred_root, gt_root)
    tuples. Hand errors are the mean of the left- and right-hand values."""
    acc = {f: [] for f in MetricReport.FIELDS}
    for pred_v, gt_v, pred_root, gt_root in pairs:
        acc["mpvpe_all"].append(mpvpe(pred_v, gt_v, None, pred_root, gt_root))
        acc["mpvpe_face"].append(mpvpe(pred_v, gt_v, masks["face"], pred_root, gt_root))
        acc["mpvpe_hand"].append(0.5 * (
            mpvpe(pred_v, gt_v, masks["lhand"], pred_root, gt_root)
            + mpvpe(pred_v, gt_v, masks["rhand"], pred_root, gt_root)))
        acc["pa_mpvpe_all"].append(pa_mpvpe(pred_v, gt_v, None, with_scale))
        acc["pa_mpvpe_face"].append(pa_mpvpe(pred_v, gt_v, masks["face"], with_scale))
        acc["pa_mpvpe_hand"].append(0.5 * (
            pa_mpvpe(pred_v, gt_v, masks["lhand"], with_scale)
            + pa_mpvpe(pred_v, gt_v, masks["rhand"], with_scale)))
    return MetricReport(**{f: float(np.mean(acc[f])) for f in MetricReport.FIELDS})
