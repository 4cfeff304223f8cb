"""Geometry core tests: forward kinematics, skinning, projection.

Random cases are checked against independent numpy oracles that compose explicit
4x4 homogeneous matrices, never against the torch implementation itself.
"""

import math

import numpy as np
import pytest
import torch

from quadmotion.errors import ValidationError
from quadmotion.skeleton import (
    Camera,
    MotionSequence,
    Pose,
    SkinnedMesh,
    Skeleton,
    axis_angle_to_matrix,
    forward_kinematics,
    keypoints2d,
    linear_blend_skinning,
    project,
    save_obj,
)


# ---------------------------------------------------------------------------
# oracle: explicit homogeneous-matrix kinematics in float64 numpy


def rodrigues_np(aa):
    theta = np.linalg.norm(aa)
    if theta < 1e-12:
        return np.eye(3)
    axis = aa / theta
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)


def homogeneous(rot, trans):
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = trans
    return m


def oracle_bone_matrices(rest, parents, rigid_rot, rigid_trans, bone_rot):
    """4x4 world matrix per bone: chain of rotate-about-parent-rest-joint, rigid last."""
    b_total = len(parents)
    mats = [np.eye(4)]
    for b in range(1, b_total):
        pivot = rest[parents[b]]
        local = (
            homogeneous(np.eye(3), pivot)
            @ homogeneous(rodrigues_np(bone_rot[b - 1]), np.zeros(3))
            @ homogeneous(np.eye(3), -pivot)
        )
        mats.append(mats[parents[b]] @ local)
    rigid = homogeneous(rodrigues_np(rigid_rot), rigid_trans)
    return [rigid @ m for m in mats]


def oracle_fk(rest, parents, rigid_rot, rigid_trans, bone_rot):
    mats = oracle_bone_matrices(rest, parents, rigid_rot, rigid_trans, bone_rot)
    out = []
    for b, m in enumerate(mats):
        p = np.append(rest[b], 1.0)
        out.append((m @ p)[:3])
    return np.stack(out)


def random_tree(rng, joints):
    parents = [-1] + [int(rng.integers(0, j)) for j in range(1, joints)]
    rest = rng.normal(size=(joints, 3))
    return rest, parents


def random_pose(rng, joints, scale=1.0):
    return (
        rng.normal(size=3) * scale,
        rng.normal(size=3) * scale,
        rng.normal(size=(joints - 1, 3)) * scale,
    )


# ---------------------------------------------------------------------------
# rotation conversion


def test_axis_angle_identity():
    r = axis_angle_to_matrix(torch.zeros(3))
    assert torch.allclose(r, torch.eye(3))


def test_axis_angle_quarter_turn_z():
    r = axis_angle_to_matrix(torch.tensor([0.0, 0.0, math.pi / 2]))
    expected = torch.tensor([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert torch.allclose(r, expected, atol=1e-6)


def test_axis_angle_matches_oracle_and_is_orthonormal():
    rng = np.random.default_rng(0)
    aa = rng.normal(size=(50, 3)) * 2.0
    got = axis_angle_to_matrix(torch.tensor(aa)).numpy()
    for i in range(50):
        np.testing.assert_allclose(got[i], rodrigues_np(aa[i]), atol=1e-10)
        np.testing.assert_allclose(got[i] @ got[i].T, np.eye(3), atol=1e-10)
        assert np.linalg.det(got[i]) == pytest.approx(1.0, abs=1e-10)


def test_axis_angle_gradient_smooth_at_zero():
    aa = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    axis_angle_to_matrix(aa).sum().backward()
    assert torch.isfinite(aa.grad).all()


# ---------------------------------------------------------------------------
# forward kinematics


def two_joint_chain():
    return Skeleton(rest_joints=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], parents=(-1, 0))


def test_fk_identity_is_rest():
    rng = np.random.default_rng(1)
    rest, parents = random_tree(rng, 6)
    skel = Skeleton(rest, parents)
    posed = forward_kinematics(skel, Pose.identity(6))
    assert torch.allclose(posed, skel.rest_joints, atol=1e-7)


def test_fk_child_rotation_about_parent():
    skel = two_joint_chain()
    pose = Pose(
        rigid_rot=torch.zeros(3),
        rigid_trans=torch.zeros(3),
        bone_rot=torch.tensor([[0.0, 0.0, math.pi / 2]]),
    )
    posed = forward_kinematics(skel, pose)
    assert torch.allclose(posed[0], torch.zeros(3), atol=1e-6)
    assert torch.allclose(posed[1], torch.tensor([0.0, 1.0, 0.0]), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_fk_matches_homogeneous_oracle(seed):
    rng = np.random.default_rng(seed)
    rest, parents = random_tree(rng, 5)
    skel = Skeleton(torch.tensor(rest), parents)
    rr, rt, br = random_pose(rng, 5)
    pose = Pose(torch.tensor(rr), torch.tensor(rt), torch.tensor(br))
    got = forward_kinematics(skel, pose).numpy()
    want = oracle_fk(rest, parents, rr, rt, br)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_fk_rejects_mismatched_joint_count():
    skel = two_joint_chain()
    with pytest.raises(ValidationError):
        forward_kinematics(skel, Pose.identity(5))


def test_fk_batched_matches_per_frame():
    rng = np.random.default_rng(7)
    rest, parents = random_tree(rng, 5)
    skel = Skeleton(torch.tensor(rest), parents)
    frames = [random_pose(rng, 5) for _ in range(4)]
    seq = MotionSequence(
        rigid_rot=torch.tensor(np.stack([f[0] for f in frames])),
        rigid_trans=torch.tensor(np.stack([f[1] for f in frames])),
        bone_rot=torch.tensor(np.stack([f[2] for f in frames])),
    )
    batched = forward_kinematics(skel, seq)
    for t, (rr, rt, br) in enumerate(frames):
        single = forward_kinematics(skel, Pose(torch.tensor(rr), torch.tensor(rt), torch.tensor(br)))
        assert torch.allclose(batched[t], single, atol=1e-12)


def test_rigid_invariance():
    # applying an extra global rotation to the rigid pose rotates all outputs by it
    rng = np.random.default_rng(3)
    rest, parents = random_tree(rng, 6)
    skel = Skeleton(torch.tensor(rest), parents)
    rr, rt, br = random_pose(rng, 6)
    extra = rng.normal(size=3)

    base = Pose(torch.zeros(3, dtype=torch.float64), torch.tensor(rt), torch.tensor(br))
    base.rigid_rot = base.rigid_rot.double()
    rotated = Pose(torch.tensor(extra), torch.tensor(rt), torch.tensor(br))

    r = torch.tensor(rodrigues_np(extra))
    joints_base = forward_kinematics(skel, base)
    joints_rot = forward_kinematics(skel, rotated)
    want = (r @ (joints_base - base.rigid_trans).unsqueeze(-1)).squeeze(-1) + base.rigid_trans
    assert torch.allclose(joints_rot, want, atol=1e-6)

    mesh = _random_mesh(rng, skel.joint_count, 12)
    verts_base = linear_blend_skinning(mesh, skel, base)
    verts_rot = linear_blend_skinning(mesh, skel, rotated)
    want_v = (r @ (verts_base - base.rigid_trans).unsqueeze(-1)).squeeze(-1) + base.rigid_trans
    assert torch.allclose(verts_rot, want_v, atol=1e-6)


# ---------------------------------------------------------------------------
# linear blend skinning


def _random_mesh(rng, joints, n):
    verts = rng.normal(size=(n, 3))
    w = rng.uniform(0.0, 1.0, size=(n, joints))
    w /= w.sum(axis=1, keepdims=True)
    return SkinnedMesh(vertices=torch.tensor(verts), skinning_weights=torch.tensor(w))


def test_lbs_identity_pose_returns_vertices():
    rng = np.random.default_rng(4)
    rest, parents = random_tree(rng, 5)
    skel = Skeleton(torch.tensor(rest), parents)
    mesh = _random_mesh(rng, 5, 20)
    out = linear_blend_skinning(mesh, skel, Pose.identity(5, dtype=torch.float64))
    assert torch.allclose(out, mesh.vertices, atol=1e-9)


def test_lbs_one_hot_weight_follows_bone():
    rng = np.random.default_rng(5)
    rest, parents = random_tree(rng, 5)
    skel = Skeleton(torch.tensor(rest), parents)
    rr, rt, br = random_pose(rng, 5)
    pose = Pose(torch.tensor(rr), torch.tensor(rt), torch.tensor(br))

    vert = rng.normal(size=(1, 3))
    for bone in range(5):
        w = np.zeros((1, 5))
        w[0, bone] = 1.0
        mesh = SkinnedMesh(torch.tensor(vert), torch.tensor(w))
        got = linear_blend_skinning(mesh, skel, pose).numpy()[0]
        m = oracle_bone_matrices(rest, parents, rr, rt, br)[bone]
        want = (m @ np.append(vert[0], 1.0))[:3]
        np.testing.assert_allclose(got, want, atol=1e-8)


def test_lbs_half_half_weights_average_bone_transforms():
    rng = np.random.default_rng(6)
    rest, parents = random_tree(rng, 4)
    skel = Skeleton(torch.tensor(rest), parents)
    rr, rt, br = random_pose(rng, 4)
    pose = Pose(torch.tensor(rr), torch.tensor(rt), torch.tensor(br))
    vert = rng.normal(size=3)
    mesh = SkinnedMesh(torch.tensor(vert[None]), torch.tensor([[0.0, 0.5, 0.5, 0.0]]))
    got = linear_blend_skinning(mesh, skel, pose).numpy()[0]
    mats = oracle_bone_matrices(rest, parents, rr, rt, br)
    hom = np.append(vert, 1.0)
    want = 0.5 * (mats[1] @ hom)[:3] + 0.5 * (mats[2] @ hom)[:3]
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_lbs_random_matches_dense_transform_oracle():
    rng = np.random.default_rng(8)
    rest, parents = random_tree(rng, 6)
    skel = Skeleton(torch.tensor(rest), parents)
    rr, rt, br = random_pose(rng, 6)
    pose = Pose(torch.tensor(rr), torch.tensor(rt), torch.tensor(br))
    mesh = _random_mesh(rng, 6, 15)
    got = linear_blend_skinning(mesh, skel, pose).numpy()
    mats = oracle_bone_matrices(rest, parents, rr, rt, br)
    w = mesh.skinning_weights.numpy()
    v = mesh.vertices.numpy()
    for i in range(15):
        hom = np.append(v[i], 1.0)
        want = sum(w[i, b] * (mats[b] @ hom)[:3] for b in range(6))
        np.testing.assert_allclose(got[i], want, atol=1e-6)


def test_lbs_rejects_unnormalized_weights():
    with pytest.raises(ValidationError):
        SkinnedMesh(vertices=torch.zeros(1, 3), skinning_weights=torch.tensor([[0.5, 0.2]]))
    with pytest.raises(ValidationError):
        SkinnedMesh(vertices=torch.zeros(1, 3), skinning_weights=torch.tensor([[1.5, -0.5]]))


def test_lbs_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    rest, parents = random_tree(rng, 4)
    skel = Skeleton(torch.tensor(rest), parents)
    mesh = _random_mesh(rng, 4, 6)
    rr, rt, br = random_pose(rng, 4, scale=0.5)
    params0 = np.concatenate([rr, rt, br.reshape(-1)])
    proj = rng.normal(size=(6, 3))

    def loss_at(params):
        pose = Pose(
            torch.tensor(params[0:3]), torch.tensor(params[3:6]),
            torch.tensor(params[6:].reshape(-1, 3)),
        )
        out = linear_blend_skinning(mesh, skel, pose)
        return (out * torch.tensor(proj)).sum()

    p = torch.tensor(params0, requires_grad=True)
    pose = Pose(p[0:3], p[3:6], p[6:].reshape(-1, 3))
    (linear_blend_skinning(mesh, skel, pose) * torch.tensor(proj)).sum().backward()
    grad = p.grad.numpy()

    h = 1e-5
    for i in range(len(params0)):
        step = np.zeros_like(params0)
        step[i] = h
        fd = (loss_at(params0 + step) - loss_at(params0 - step)).item() / (2 * h)
        denom = max(abs(fd), abs(grad[i]), 1e-8)
        assert abs(fd - grad[i]) / denom < 1e-3


# ---------------------------------------------------------------------------
# projection


def test_project_origin_hits_image_center():
    cam = Camera(scale=1.0, image_size=(64, 128))
    out = project(torch.zeros(3), cam)
    assert torch.allclose(out, torch.tensor([64.0, 32.0]))


def test_project_is_depth_invariant():
    cam = Camera(scale=100.0, image_size=(64, 64))
    for z in (-5.0, 0.0, 7.5):
        out = project(torch.tensor([1.0, 0.0, z]), cam)
        assert torch.allclose(out, torch.tensor([32.0 + 100.0, 32.0]))


def test_project_batch_matches_scalar_loop():
    rng = np.random.default_rng(10)
    pts = rng.normal(size=(30, 3))
    cam = Camera(scale=17.0, image_size=(48, 80), principal_point=(3.0, 4.0))
    got = project(torch.tensor(pts), cam).numpy()
    for i in range(30):
        want = np.array([pts[i, 0] * 17.0 + 3.0, pts[i, 1] * 17.0 + 4.0])
        np.testing.assert_allclose(got[i], want, atol=1e-12)


def test_camera_validation():
    with pytest.raises(ValidationError):
        Camera(scale=0.0, image_size=(64, 64))
    with pytest.raises(ValidationError):
        Camera(scale=1.0, image_size=(0, 64))


def test_keypoints2d_composes_fk_and_project():
    rng = np.random.default_rng(11)
    rest, parents = random_tree(rng, 5)
    skel = Skeleton(torch.tensor(rest), parents)
    cam = Camera(scale=20.0, image_size=(64, 64))

    # identity pose projects the rest joints
    got = keypoints2d(skel, Pose.identity(5, dtype=torch.float64), cam)
    want = project(skel.rest_joints.double(), cam)
    assert torch.allclose(got, want, atol=1e-7)

    rr, rt, br = random_pose(rng, 5)
    pose = Pose(torch.tensor(rr), torch.tensor(rt), torch.tensor(br))
    got = keypoints2d(skel, pose, cam).numpy()
    joints = oracle_fk(rest, parents, rr, rt, br)
    want = joints[:, :2] * 20.0 + np.array([32.0, 32.0])
    np.testing.assert_allclose(got, want, atol=1e-6)


# ---------------------------------------------------------------------------
# types and export


def test_skeleton_rejects_bad_topology():
    with pytest.raises(ValidationError):
        Skeleton(rest_joints=[[0, 0, 0], [1, 0, 0]], parents=(0, 0))  # root not -1
    with pytest.raises(ValidationError):
        Skeleton(rest_joints=[[0, 0, 0], [1, 0, 0]], parents=(-1, 1))  # self-parent
    with pytest.raises(ValidationError):
        Skeleton(rest_joints=[[0, 0, 0]], parents=(-1,))  # too few joints
    with pytest.raises(ValidationError):
        Skeleton(rest_joints=[[0, 0, 0], [np.inf, 0, 0]], parents=(-1, 0))


def test_motion_sequence_parameters_roundtrip():
    rng = np.random.default_rng(12)
    seq = MotionSequence(
        rigid_rot=torch.tensor(rng.normal(size=(7, 3))),
        rigid_trans=torch.tensor(rng.normal(size=(7, 3))),
        bone_rot=torch.tensor(rng.normal(size=(7, 4, 3))),
    )
    back = MotionSequence.from_parameters(seq.parameters(), joint_count=5)
    assert torch.equal(back.rigid_rot, seq.rigid_rot)
    assert torch.equal(back.rigid_trans, seq.rigid_trans)
    assert torch.equal(back.bone_rot, seq.bone_rot)


def test_save_obj_roundtrip(tmp_path):
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    faces = np.array([[0, 1, 2]])
    path = tmp_path / "tri.obj"
    save_obj(path, verts, faces)
    text = path.read_text().strip().splitlines()
    assert text[0].startswith("v ") and text[-1] == "f 1 2 3"
