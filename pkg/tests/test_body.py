"""Kinematic tree, Rodrigues rotations, blendshapes, skinning, projection."""

import numpy as np
import pytest

from upperpose.autograd import Tensor, no_grad
from upperpose.body import (JAW_INDEX, LHAND_START, RHAND_START, SmplxParams,
                            build_template, export_obj, forward_kinematics,
                            pose_mesh, project_weak_perspective, rodrigues,
                            skin_mesh)
from upperpose.errors import DimensionError, NumericError
from upperpose.interaction import TOTAL_JOINTS


@pytest.fixture(scope="module")
def template():
    return build_template(11, rings=2, ring_pts=3)


def rodrigues_oracle(w):
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        return np.eye(3)
    axis = w / angle
    kx = np.array([[0, -axis[2], axis[1]],
                   [axis[2], 0, -axis[0]],
                   [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


# ---------------------------------------------------------------- template

def test_template_deterministic():
    a = build_template(5, rings=2, ring_pts=3)
    b = build_template(5, rings=2, ring_pts=3)
    np.testing.assert_array_equal(a.template_vertices, b.template_vertices)
    np.testing.assert_array_equal(a.skin_weights, b.skin_weights)
    np.testing.assert_array_equal(a.shape_dirs, b.shape_dirs)


def test_skin_weights_row_stochastic(template):
    sums = template.skin_weights.sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)
    nonzero = (template.skin_weights > 0).sum(axis=1)
    assert nonzero.max() <= 2


def test_tree_root_first_and_acyclic(template):
    assert template.parents[0] == -1
    for j in range(1, TOTAL_JOINTS):
        assert 0 <= template.parents[j] < j  # topological order
    # every joint reaches the root
    for j in range(TOTAL_JOINTS):
        seen = set()
        while j >= 0:
            assert j not in seen
            seen.add(j)
            j = template.parents[j]


def test_every_joint_drives_geometry(template):
    driven = (template.skin_weights > 0).any(axis=0)
    assert driven.all(), np.where(~driven)[0]


def test_expr_dirs_face_support_only(template):
    face = template.part_vertex_masks["face"]
    assert np.abs(template.expr_dirs[~face]).max() == 0.0
    assert np.abs(template.expr_dirs[face]).max() > 0.0


# ---------------------------------------------------------------- rodrigues

def test_rodrigues_zero_is_identity():
    with no_grad():
        r = rodrigues(Tensor(np.zeros((4, 3)))).data
    np.testing.assert_allclose(r, np.broadcast_to(np.eye(3), (4, 3, 3)),
                               atol=1e-12)


def test_rodrigues_matches_oracle(rng):
    w = rng.uniform(-1.5, 1.5, size=(10, 3))
    with no_grad():
        got = rodrigues(Tensor(w)).data
    for i in range(10):
        np.testing.assert_allclose(got[i], rodrigues_oracle(w[i]), atol=1e-10)


def test_rodrigues_orthonormal(rng):
    w = rng.normal(size=(6, 3))
    with no_grad():
        r = rodrigues(Tensor(w)).data
    for m in r:
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-10)
        assert abs(np.linalg.det(m) - 1.0) < 1e-10


# ---------------------------------------------------------------- fk

def test_fk_zero_pose_is_rest(template):
    with no_grad():
        joints, _ = forward_kinematics(template, Tensor(np.zeros((53, 3))))
    np.testing.assert_allclose(joints.data, template.rest_joints, atol=1e-12)


def test_fk_root_rotation_rigid(template, rng):
    w = rng.normal(size=3) * 0.8
    theta = np.zeros((53, 3))
    theta[0] = w
    with no_grad():
        joints, _ = forward_kinematics(template, Tensor(theta))
    r = rodrigues_oracle(w)
    root = template.rest_joints[0]
    want = (template.rest_joints - root) @ r.T + root
    np.testing.assert_allclose(joints.data, want, atol=1e-9)


def test_fk_matrix_chain_oracle(template, rng):
    theta = rng.uniform(-0.6, 0.6, size=(53, 3))
    with no_grad():
        joints, globals_ = forward_kinematics(template, Tensor(theta))
    # explicit 4x4 chain, joint by joint
    g = np.zeros((53, 4, 4))
    for j in range(53):
        p = template.parents[j]
        local = np.eye(4)
        local[:3, :3] = rodrigues_oracle(theta[j])
        off = template.rest_joints[j] - (template.rest_joints[p] if p >= 0 else 0)
        local[:3, 3] = off
        g[j] = local if p < 0 else g[p] @ local
    np.testing.assert_allclose(globals_.data, g, atol=1e-10)
    np.testing.assert_allclose(joints.data, g[:, :3, 3], atol=1e-10)


# ---------------------------------------------------------------- skinning

def test_skin_rest_pose_is_template(template):
    with no_grad():
        verts, _ = skin_mesh(template, Tensor(np.zeros((53, 3))),
                             Tensor(np.zeros(10)), Tensor(np.zeros(10)))
    np.testing.assert_allclose(verts.data, template.template_vertices,
                               atol=1e-12)


def test_skin_loop_oracle(template, rng):
    theta = rng.uniform(-0.5, 0.5, size=(53, 3))
    beta = rng.uniform(-1, 1, size=10)
    phi = rng.uniform(-1, 1, size=10)
    with no_grad():
        got, _ = skin_mesh(template, Tensor(theta), Tensor(beta), Tensor(phi))
        _, globals_ = forward_kinematics(template, Tensor(theta))
    g = globals_.data
    shaped = (template.template_vertices
              + template.shape_dirs @ beta + template.expr_dirs @ phi)
    want = np.zeros_like(shaped)
    for i in range(shaped.shape[0]):
        acc = np.zeros(3)
        for j in range(53):
            w = template.skin_weights[i, j]
            if w == 0.0:
                continue
            rel = g[j].copy()
            rel[:3, 3] -= rel[:3, :3] @ template.rest_joints[j]
            acc += w * (rel[:3, :3] @ shaped[i] + rel[:3, 3])
        want[i] = acc
    np.testing.assert_allclose(got.data, want, atol=1e-10)


def test_skin_global_rotation_equivariance(template, rng):
    w = rng.normal(size=3) * 0.7
    theta = np.zeros((53, 3))
    theta[0] = w
    zeros = Tensor(np.zeros(10))
    with no_grad():
        rotated, _ = skin_mesh(template, Tensor(theta), zeros, zeros)
        base, _ = skin_mesh(template, Tensor(np.zeros((53, 3))), zeros, zeros)
    r = rodrigues_oracle(w)
    root = template.rest_joints[0]
    want = (base.data - root) @ r.T + root
    np.testing.assert_allclose(rotated.data, want, atol=1e-9)


def test_left_right_hand_independence(template, rng):
    zeros = Tensor(np.zeros(10))
    theta = np.zeros((53, 3))
    theta[LHAND_START:RHAND_START] = rng.uniform(-0.8, 0.3, size=(15, 3))
    with no_grad():
        moved, _ = skin_mesh(template, Tensor(theta), zeros, zeros)
        base, _ = skin_mesh(template, Tensor(np.zeros((53, 3))), zeros, zeros)
    rmask = template.part_vertex_masks["rhand"]
    lmask = template.part_vertex_masks["lhand"]
    np.testing.assert_array_equal(moved.data[rmask], base.data[rmask])
    assert np.abs(moved.data[lmask] - base.data[lmask]).max() > 1e-4


def test_phi_changes_only_face_vertices(template, rng):
    zeros = Tensor(np.zeros(10))
    zero_pose = Tensor(np.zeros((53, 3)))
    phi = Tensor(rng.uniform(-2, 2, size=10))
    with no_grad():
        base, _ = skin_mesh(template, zero_pose, zeros, zeros)
        expr, _ = skin_mesh(template, zero_pose, zeros, phi)
    face = template.part_vertex_masks["face"]
    np.testing.assert_array_equal(expr.data[~face], base.data[~face])
    assert np.abs(expr.data[face] - base.data[face]).max() > 1e-6


# ---------------------------------------------------------------- projection

def test_projection_identity():
    pts = Tensor(np.arange(9, dtype=float).reshape(3, 3))
    cam = Tensor(np.array([1.0, 0.0, 0.0]))
    with no_grad():
        out = project_weak_perspective(pts, cam)
    np.testing.assert_array_equal(out.data, pts.data[:, :2])


def test_projection_scale_linearity(rng):
    pts = Tensor(rng.normal(size=(5, 3)))
    with no_grad():
        one = project_weak_perspective(pts, Tensor(np.array([1.0, 0.0, 0.0])))
        two = project_weak_perspective(pts, Tensor(np.array([2.0, 0.0, 0.0])))
    np.testing.assert_allclose(two.data, 2 * one.data, atol=1e-12)


def test_projection_rejects_nonpositive_scale(rng):
    pts = Tensor(rng.normal(size=(4, 3)))
    with pytest.raises(NumericError):
        project_weak_perspective(pts, Tensor(np.array([0.0, 0.1, 0.1])))


# ---------------------------------------------------------------- params / obj

def test_params_shape_validation():
    ok = SmplxParams(theta=Tensor(np.zeros((53, 3))), beta=Tensor(np.zeros(10)),
                     phi=Tensor(np.zeros(10)), camera=Tensor(np.array([1., 0., 0.])))
    assert ok.theta.shape == (53, 3)
    with pytest.raises(DimensionError):
        SmplxParams(theta=Tensor(np.zeros((52, 3))), beta=Tensor(np.zeros(10)),
                    phi=Tensor(np.zeros(10)), camera=Tensor(np.array([1., 0., 0.])))


def test_pose_mesh_shapes(template):
    params = SmplxParams(theta=Tensor(np.zeros((53, 3))),
                         beta=Tensor(np.zeros(10)), phi=Tensor(np.zeros(10)),
                         camera=Tensor(np.array([0.5, 0.5, 0.5])))
    with no_grad():
        out = pose_mesh(template, params)
    assert out.vertices.shape == (template.vertex_count, 3)
    assert out.joints3d.shape == (53, 3)
    assert out.keypoints2d.shape == (53, 2)


def test_export_obj_one_indexed(template, tmp_path):
    path = tmp_path / "mesh.obj"
    export_obj(path, template.template_vertices, template.faces)
    lines = path.read_text().splitlines()
    v_lines = [l for l in lines if l.startswith("v ")]
    f_lines = [l for l in lines if l.startswith("f ")]
    assert len(v_lines) == template.vertex_count
    assert len(f_lines) == len(template.faces)
    idx = [int(tok) for l in f_lines for tok in l.split()[1:]]
    assert min(idx) >= 1 and max(idx) <= template.vertex_count
