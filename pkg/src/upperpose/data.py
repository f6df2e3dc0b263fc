"""Procedural training data: sample bounded body parameters, pose the
template, rasterize a flat-shaded color-coded rendering over a cluttered
background, and derive mutually consistent boxes and keypoints. Optionally
occlude the right arm/hand region at pixel level (labels are never
altered)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, no_grad
from .body import (LHAND_START, RHAND_START, BodyTemplate, SmplxParams,
                   pose_mesh, project_weak_perspective)
from .interaction import HAND_JOINTS, PartBoxes
from .utils import stream_rng

PART_COLORS = {
    0: np.array([0.35, 0.45, 0.75]),  # body
    1: np.array([0.95, 0.80, 0.30]),  # face
    2: np.array([0.90, 0.25, 0.25]),  # left hand
    3: np.array([0.30, 0.80, 0.35]),  # right hand
}

RIGHT_ARM_JOINTS = [19, 21] + list(range(RHAND_START, RHAND_START + HAND_JOINTS))


@dataclass
class OcclusionInfo:
    region: str
    rect: tuple[float, float, float, float]  # normalized (y0, x0, y1, x1)


@dataclass
class TrainSample:
    image: np.ndarray          # 3 x S x S in [0, 1]
    gt_params: SmplxParams
    gt_boxes: PartBoxes
    gt_joints3d: Tensor        # 53 x 3
    gt_kpts2d: Tensor          # 53 x 2
    gt_vertices: np.ndarray    # V x 3, for metrics
    occlusion: OcclusionInfo | None

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.image.tobytes())
        h.update(self.gt_params.theta.data.tobytes())
        return h.hexdigest()[:16]


def sample_params(seed: int, index: int) -> SmplxParams:
    rng = stream_rng(seed, "sample", index, "params")
    theta = rng.uniform(-0.6, 0.6, (53, 3))
    theta[LHAND_START:RHAND_START + HAND_JOINTS] = rng.uniform(
        -1.0, 0.2, (2 * HAND_JOINTS, 3))
    beta = rng.uniform(-2.0, 2.0, 10)
    phi = rng.uniform(-2.0, 2.0, 10)
    s = rng.uniform(0.35, 0.5)
    t = 0.5 + rng.uniform(-0.04, 0.04, 2)
    camera = np.array([s, t[0], t[1]])
    return SmplxParams(theta=Tensor(theta), beta=Tensor(beta),
                       phi=Tensor(phi), camera=Tensor(camera))


def _part_box(points2d: np.ndarray, margin: float = 0.10) -> np.ndarray:
    lo = points2d.min(axis=0)
    hi = points2d.max(axis=0)
    size = (hi - lo) * (1.0 + margin)
    center = (hi + lo) / 2.0
    box = np.array([center[0], center[1], size[0], size[1]])
    return np.clip(box, 0.0, 1.0)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Base color plus grayscale distractor rectangles, as an S x S x 3 image.

    The clutter is grayscale (r = g = b) so no background pixel ever matches
    the saturated part colors: labels stay decodable from color alone, while
    spatial pooling cannot ignore the distractors without looking at content.
    """
    img = np.empty((size, size, 3))
    img[:] = rng.uniform(0.05, 0.25, 3)
    for _ in range(int(rng.integers(3, 7))):
        v = rng.uniform(0.0, 0.9)
        cy, cx = rng.uniform(0.0, 1.0, 2)
        h, w = rng.uniform(0.10, 0.45, 2)
        r0 = int(np.clip(cy - h / 2, 0.0, 1.0) * size)
        r1 = int(np.ceil(np.clip(cy + h / 2, 0.0, 1.0) * size))
        c0 = int(np.clip(cx - w / 2, 0.0, 1.0) * size)
        c1 = int(np.ceil(np.clip(cx + w / 2, 0.0, 1.0) * size))
        img[r0:r1, c0:c1] = v
    return img


def _rasterize(verts2d: np.ndarray, depth: np.ndarray, faces: np.ndarray,
               face_regions: np.ndarray, background: np.ndarray,
               size: int) -> np.ndarray:
    img = background.copy()
    pix = verts2d * size
    order = np.argsort(depth[faces].mean(axis=1))  # far (small z: camera at -z) first
    for fi in order:
        tri = pix[faces[fi]]
        color = PART_COLORS[int(face_regions[fi])]
        x0 = max(int(np.floor(tri[:, 0].min())), 0)
        x1 = min(int(np.ceil(tri[:, 0].max())) + 1, size)
        y0 = max(int(np.floor(tri[:, 1].min())), 0)
        y1 = min(int(np.ceil(tri[:, 1].max())) + 1, size)
        if x0 >= x1 or y0 >= y1:
            continue
        a, b, c = tri
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-12:
            continue
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        w0 = ((b[0] - a[0]) * (gy - a[1]) - (gx - a[0]) * (b[1] - a[1])) / det
        w1 = ((gx - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (gy - a[1])) / det
        inside = (w0 >= 0) & (w1 >= 0) & (w0 + w1 <= 1)
        region = img[y0:y1, x0:x1]
        region[inside] = color
    return img.transpose(2, 0, 1)


def synth_sample(seed: int, index: int, occlusion_prob: float = 0.0,
                 template: BodyTemplate | None = None,
                 image_size: int = 64) -> TrainSample:
    from .body import build_template  # local import to avoid cycle at module load
    if template is None:
        template = build_template(seed)
    params = sample_params(seed, index)
    with no_grad():
        mesh = pose_mesh(template, params)
        verts2d = project_weak_perspective(mesh.vertices, params.camera).data
    vertices = mesh.vertices.data
    joints3d = mesh.joints3d.data
    kpts2d = mesh.keypoints2d.data

    masks = template.part_vertex_masks
    gt_boxes = PartBoxes(
        face=Tensor(_part_box(verts2d[masks["face"]])),
        lhand=Tensor(_part_box(verts2d[masks["lhand"]])),
        rhand=Tensor(_part_box(verts2d[masks["rhand"]])),
    )

    rng_img = stream_rng(seed, "sample", index, "image")
    background = _background(rng_img, image_size)
    image = _rasterize(verts2d, vertices[:, 2], template.faces,
                       template.face_regions, background, image_size)

    occlusion = None
    rng_occ = stream_rng(seed, "sample", index, "occlusion")
    if occlusion_prob > 0.0 and rng_occ.random() < occlusion_prob:
        pts = kpts2d[RIGHT_ARM_JOINTS]
        margin = 0.03
        y0 = float(np.clip(pts[:, 1].min() - margin, 0.0, 1.0))
        y1 = float(np.clip(pts[:, 1].max() + margin, 0.0, 1.0))
        x0 = float(np.clip(pts[:, 0].min() - margin, 0.0, 1.0))
        x1 = float(np.clip(pts[:, 0].max() + margin, 0.0, 1.0))
        r0, r1 = int(y0 * image_size), int(np.ceil(y1 * image_size))
        c0, c1 = int(x0 * image_size), int(np.ceil(x1 * image_size))
        # fill with the background content at those pixels (the subject's
        # arm disappears; whatever clutter was behind it shows through)
        image[:, r0:r1, c0:c1] = background.transpose(2, 0, 1)[:, r0:r1, c0:c1]
        occlusion = OcclusionInfo(region="right_arm", rect=(y0, x0, y1, x1))

    return TrainSample(image=image, gt_params=params, gt_boxes=gt_boxes,
                       gt_joints3d=Tensor(joints3d), gt_kpts2d=Tensor(kpts2d),
                       gt_vertices=vertices, occlusion=occlusion)


def synth_dataset(seed: int, count: int, occlusion_prob: float = 0.0,
                  template: BodyTemplate | None = None,
                  image_size: int = 64) -> list[TrainSample]:
    from .body import build_template
    if template is None:
        template = build_template(seed)
    return [synth_sample(seed, i, occlusion_prob, template, image_size)
            for i in range(count)]
