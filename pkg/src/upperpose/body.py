"""Parameter-compatible lightweight body model.

53-joint kinematic tree (22 body incl. global root, 15 per hand, 1 jaw),
procedural capsule mesh, shape/expression blendshapes, Rodrigues forward
kinematics, linear blend skinning with at most two bone weights per vertex,
and weak-perspective projection. The template is deterministic in its seed
and serializes into checkpoints so evaluation reproduces training geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError, NumericError
from .interaction import BODY_JOINTS, HAND_JOINTS, TOTAL_JOINTS
from .utils import stream_rng

# joint index blocks in canonical order: body, lhand, rhand, jaw
LHAND_START = BODY_JOINTS                    # 22
RHAND_START = BODY_JOINTS + HAND_JOINTS      # 37
JAW_INDEX = TOTAL_JOINTS - 1                 # 52

REGION_BODY, REGION_FACE, REGION_LHAND, REGION_RHAND = 0, 1, 2, 3
REGION_NAMES = ("body", "face", "lhand", "rhand")


@dataclass
class SmplxParams:
    theta: Tensor    # 53x3 axis-angle
    beta: Tensor     # 10 shape coefficients
    phi: Tensor      # 10 expression coefficients
    camera: Tensor   # (s, tx, ty), s > 0

    def __post_init__(self):
        if tuple(self.theta.shape) != (TOTAL_JOINTS, 3):
            raise DimensionError(f"theta must be {TOTAL_JOINTS}x3, got {self.theta.shape}")
        if self.beta.shape != (10,) or self.phi.shape != (10,):
            raise DimensionError("beta and phi must both have 10 entries")
        if self.camera.shape != (3,):
            raise DimensionError(f"camera must be (s, tx, ty), got {self.camera.shape}")


@dataclass
class BodyTemplate:
    parents: np.ndarray            # (53,) int, root = -1
    rest_joints: np.ndarray        # (53, 3) meters
    template_vertices: np.ndarray  # (V, 3) meters
    skin_weights: np.ndarray       # (V, 53) row-stochastic, <= 2 nonzero per row
    shape_dirs: np.ndarray         # (V, 3, 10)
    expr_dirs: np.ndarray          # (V, 3, 10), face-region support only
    faces: np.ndarray              # (F, 3) int triangle indices
    face_regions: np.ndarray       # (F,) int region code per triangle
    part_vertex_masks: dict = field(default_factory=dict)  # region -> (V,) bool
    # derived, filled in __post_init__
    skin_idx: np.ndarray = field(default=None, repr=False)
    skin_w2: np.ndarray = field(default=None, repr=False)
    rest_global_inv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        order = np.argsort(-self.skin_weights, axis=1)[:, :2]
        self.skin_idx = order
        self.skin_w2 = np.take_along_axis(self.skin_weights, order, axis=1)
        inv = np.tile(np.eye(4), (TOTAL_JOINTS, 1, 1))
        inv[:, :3, 3] = -self.rest_joints
        self.rest_global_inv = inv

    @property
    def vertex_count(self) -> int:
        return self.template_vertices.shape[0]


def _kinematic_tree() -> tuple[np.ndarray, np.ndarray]:
    """Fixed parents and rest joint positions (y up, subject's left = +x)."""
    rest = np.zeros((TOTAL_JOINTS, 3))
    parents = np.full(TOTAL_JOINTS, -1, dtype=np.int64)

    body = {
        0: (-1, (0.00, 0.00, 0.00)),    # pelvis (root)
        1: (0, (0.09, -0.08, 0.00)),    # left hip
        2: (0, (-0.09, -0.08, 0.00)),   # right hip
        3: (0, (0.00, 0.10, 0.00)),     # spine1
        4: (1, (0.10, -0.45, 0.00)),    # left knee
        5: (2, (-0.10, -0.45, 0.00)),   # right knee
        6: (3, (0.00, 0.22, 0.00)),     # spine2
        7: (4, (0.10, -0.82, 0.00)),    # left ankle
        8: (5, (-0.10, -0.82, 0.00)),   # right ankle
        9: (6, (0.00, 0.32, 0.00)),     # spine3
        10: (7, (0.12, -0.88, 0.08)),   # left foot
        11: (8, (-0.12, -0.88, 0.08)),  # right foot
        12: (9, (0.00, 0.45, 0.00)),    # neck
        13: (9, (0.06, 0.40, 0.00)),    # left clavicle
        14: (9, (-0.06, 0.40, 0.00)),   # right clavicle
        15: (12, (0.00, 0.56, 0.00)),   # head
        16: (13, (0.18, 0.40, 0.00)),   # left shoulder
        17: (14, (-0.18, 0.40, 0.00)),  # right shoulder
        18: (16, (0.42, 0.40, 0.00)),   # left elbow
        19: (17, (-0.42, 0.40, 0.00)),  # right elbow
        20: (18, (0.64, 0.40, 0.00)),   # left wrist
        21: (19, (-0.64, 0.40, 0.00)),  # right wrist
    }
    for j, (p, pos) in body.items():
        parents[j] = p
        rest[j] = pos

    for side, start, wrist, sx in (("l", LHAND_START, 20, 1.0),
                                   ("r", RHAND_START, 21, -1.0)):
        for f in range(5):  # five fingers, three joints each
            base = start + 3 * f
            z = (f - 2) * 0.016
            for k in range(3):
                j = base + k
                parents[j] = wrist if k == 0 else j - 1
                rest[j] = rest[wrist] + np.array(
                    [sx * (0.045 + 0.03 * k), 0.0, z])

    parents[JAW_INDEX] = 15
    rest[JAW_INDEX] = rest[15] + np.array([0.0, -0.045, 0.045])
    return parents, rest


def _bone_list(parents: np.ndarray, rest: np.ndarray):
    """(drive_joint, p0, p1, radius, region) capsules, including virtual tips
    so leaf-joint rotations move geometry."""
    arm_joints = {16, 17, 18, 19, 20, 21}
    leg_joints = {1, 2, 4, 5, 7, 8, 10, 11}
    bones = []
    for j in range(TOTAL_JOINTS):
        p = parents[j]
        if p < 0:
            continue
        if LHAND_START <= j < RHAND_START:
            region, radius = REGION_LHAND, 0.010
        elif RHAND_START <= j < JAW_INDEX:
            region, radius = REGION_RHAND, 0.010
        elif j == JAW_INDEX or j == 15:
            region, radius = REGION_FACE, 0.030 if j == JAW_INDEX else 0.055
        elif j in arm_joints:
            region, radius = REGION_BODY, 0.040
        elif j in leg_joints:
            region, radius = REGION_BODY, 0.055
        else:
            region, radius = REGION_BODY, 0.070
        bones.append((p, rest[p], rest[j], radius, region))
    # virtual tips driven by leaf joints
    for side_start, sx, region in ((LHAND_START, 1.0, REGION_LHAND),
                                   (RHAND_START, -1.0, REGION_RHAND)):
        for f in range(5):
            j = side_start + 3 * f + 2
            bones.append((j, rest[j], rest[j] + np.array([sx * 0.025, 0, 0]),
                          0.010, region))
    for j, sx in ((10, 1.0), (11, -1.0)):  # toe tips so foot joints drive geometry
        bones.append((j, rest[j], rest[j] + np.array([sx * 0.01, 0.0, 0.05]),
                      0.025, REGION_BODY))
    bones.append((JAW_INDEX, rest[JAW_INDEX],
                  rest[JAW_INDEX] + np.array([0.0, -0.03, 0.02]), 0.025, REGION_FACE))
    bones.append((15, rest[15], rest[15] + np.array([0.0, 0.11, 0.0]),
                  0.065, REGION_FACE))
    return bones


def _segment_distances(points: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    d = p1 - p0
    denom = max(float(d @ d), 1e-12)
    t = np.clip((points - p0) @ d / denom, 0.0, 1.0)
    proj = p0 + t[:, None] * d
    return np.linalg.norm(points - proj, axis=1)


def build_template(seed: int, rings: int = 3, ring_pts: int = 3) -> BodyTemplate:
    """Deterministic capsule-mesh template (default V = 64 bones * 9 = 576)."""
    parents, rest = _kinematic_tree()
    bones = _bone_list(parents, rest)

    verts, faces, face_regions, vert_regions = [], [], [], []
    for p, p0, p1, radius, region in bones:
        axis = p1 - p0
        norm = np.linalg.norm(axis)
        axis = axis / norm if norm > 1e-9 else np.array([0.0, 1.0, 0.0])
        helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        base = len(verts)
        for ti in np.linspace(0.1, 0.9, rings):
            center = p0 + ti * (p1 - p0)
            for a in range(ring_pts):
                ang = 2 * np.pi * a / ring_pts
                verts.append(center + radius * (np.cos(ang) * u + np.sin(ang) * v))
                vert_regions.append(region)
        for r in range(rings - 1):
            for a in range(ring_pts):
                a2 = (a + 1) % ring_pts
                i00 = base + r * ring_pts + a
                i01 = base + r * ring_pts + a2
                i10 = base + (r + 1) * ring_pts + a
                i11 = base + (r + 1) * ring_pts + a2
                faces.append((i00, i01, i10))
                faces.append((i01, i11, i10))
                face_regions.extend([region, region])

    verts = np.array(verts)
    vert_regions = np.array(vert_regions)
    n_verts = verts.shape[0]

    # two-bone inverse-distance skinning
    dists = np.stack([_segment_distances(verts, p0, p1) for _, p0, p1, _, _ in bones],
                     axis=1)  # (V, B)
    drive = np.array([b[0] for b in bones])
    weights = np.zeros((n_verts, TOTAL_JOINTS))
    nearest = np.argsort(dists, axis=1)
    for i in range(n_verts):
        picked: dict[int, float] = {}
        for b in nearest[i]:
            j = int(drive[b])
            if j not in picked:
                picked[j] = 1.0 / (dists[i, b] + 1e-4)
            if len(picked) == 2:
                break
        total = sum(picked.values())
        for j, w in picked.items():
            weights[i, j] = w / total

    rng_shape = stream_rng(seed, "template", "shape_dirs")
    shape_dirs = rng_shape.normal(0.0, 0.01, (n_verts, 3, 10))
    rng_expr = stream_rng(seed, "template", "expr_dirs")
    expr_dirs = rng_expr.normal(0.0, 0.006, (n_verts, 3, 10))
    expr_dirs[vert_regions != REGION_FACE] = 0.0

    masks = {
        "face": vert_regions == REGION_FACE,
        "lhand": vert_regions == REGION_LHAND,
        "rhand": vert_regions == REGION_RHAND,
    }
    return BodyTemplate(parents=parents, rest_joints=rest, template_vertices=verts,
                        skin_weights=weights, shape_dirs=shape_dirs,
                        expr_dirs=expr_dirs, faces=np.array(faces, dtype=np.int64),
                        face_regions=np.array(face_regions, dtype=np.int64),
                        part_vertex_masks=masks)


# ---- kinematics ------------------------------------------------------------

def rodrigues(theta: Tensor) -> Tensor:
    """Batch axis-angle (J, 3) -> rotation matrices (J, 3, 3).

    Small-angle Taylor branch below 1e-8 keeps gradients finite at zero pose.
    """
    j = theta.shape[0]
    s = (theta * theta).sum(axis=1)                    # squared angles
    mask = s.data > 1e-16
    safe = ag.where(mask, s, Tensor(np.ones(j)))
    ang = ag.tsqrt(safe)
    sinc = ag.where(mask, ag.tsin(ang) / ang, 1.0 - s / 6.0)
    cosc = ag.where(mask, (1.0 - ag.tcos(ang)) / safe, 0.5 - s / 24.0)

    wx, wy, wz = theta[:, 0], theta[:, 1], theta[:, 2]
    zero = wx * 0.0
    k = ag.stack([ag.stack([zero, -wz, wy], axis=1),
                  ag.stack([wz, zero, -wx], axis=1),
                  ag.stack([-wy, wx, zero], axis=1)], axis=1)   # (J, 3, 3)
    k2 = ag.matmul(k, k)
    eye = Tensor(np.broadcast_to(np.eye(3), (j, 3, 3)).copy())
    return eye + ag.reshape(sinc, (j, 1, 1)) * k + ag.reshape(cosc, (j, 1, 1)) * k2


def forward_kinematics(template: BodyTemplate, theta: Tensor) -> tuple[Tensor, Tensor]:
    """Returns (joints3d (53,3), global transforms (53,4,4))."""
    j = TOTAL_JOINTS
    rots = rodrigues(theta)
    offsets = template.rest_joints.copy()
    has_parent = template.parents >= 0
    offsets[has_parent] -= template.rest_joints[template.parents[has_parent]]
    top = ag.concat([rots, Tensor(offsets.reshape(j, 3, 1))], axis=2)   # (J,3,4)
    bottom = Tensor(np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0]), (j, 1, 4)).copy())
    locals_ = ag.concat([top, bottom], axis=1)                          # (J,4,4)
    globals_ = ag.fk_compose(locals_, template.parents)
    joints3d = globals_[:, :3, 3]
    return joints3d, globals_


def skin_mesh(template: BodyTemplate, theta: Tensor, beta: Tensor,
              phi: Tensor) -> tuple[Tensor, Tensor]:
    """Blendshape + LBS. Returns (vertices (V,3), joints3d (53,3))."""
    shaped = (Tensor(template.template_vertices)
              + ag.blend_dirs(template.shape_dirs, beta)
              + ag.blend_dirs(template.expr_dirs, phi))
    joints3d, globals_ = forward_kinematics(template, theta)
    rel = ag.matmul(globals_, Tensor(template.rest_global_inv))         # (J,4,4)
    t0 = rel[template.skin_idx[:, 0]]                                   # (V,4,4)
    t1 = rel[template.skin_idx[:, 1]]
    w0 = Tensor(template.skin_w2[:, 0].reshape(-1, 1, 1))
    w1 = Tensor(template.skin_w2[:, 1].reshape(-1, 1, 1))
    eff = w0 * t0 + w1 * t1
    n_verts = template.vertex_count
    homo = ag.concat([shaped, Tensor(np.ones((n_verts, 1)))], axis=1)
    out = ag.matmul(eff, ag.reshape(homo, (n_verts, 4, 1)))
    return out[:, :3, 0], joints3d


def project_weak_perspective(points3d: Tensor, camera: Tensor) -> Tensor:
    """(x, y) = s * (X, Y) + (tx, ty); Z discarded."""
    if float(camera.data[0]) <= 0.0:
        raise NumericError(f"weak-perspective scale must be positive, got {camera.data[0]}")
    xy = points3d[:, :2]
    s = ag.reshape(camera[0:1], (1, 1))
    t = ag.reshape(camera[1:3], (1, 2))
    return xy * s + t


@dataclass
class MeshOutput:
    vertices: Tensor      # V x 3
    joints3d: Tensor      # 53 x 3
    keypoints2d: Tensor   # 53 x 2 normalized image coords


def pose_mesh(template: BodyTemplate, params: SmplxParams) -> MeshOutput:
    vertices, joints3d = skin_mesh(template, params.theta, params.beta, params.phi)
    keypoints2d = project_weak_perspective(joints3d, params.camera)
    return MeshOutput(vertices=vertices, joints3d=joints3d, keypoints2d=keypoints2d)


def export_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
