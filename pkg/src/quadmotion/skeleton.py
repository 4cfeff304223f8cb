"""Articulated skeleton core: forward kinematics, linear blend skinning, weak-perspective
projection, and OBJ export.

Conventions used throughout the package:

- A skeleton with ``B`` joints is a tree rooted at joint 0. Bone ``b`` (for
  ``b in 1..B-1``) connects joint ``b`` to ``parents[b]`` and carries one rotation,
  stored as an axis-angle 3-vector. Rotating bone ``b`` rotates its whole subtree
  about the rest position of its parent joint.
- The root carries a separate rigid transform (axis-angle rotation + translation)
  applied last to everything; it is predicted by a separate head and is not part
  of the bone chain.
- All geometry functions are pure, differentiable torch ops; they accept arbitrary
  leading batch dimensions on pose parameters and respect the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .errors import ValidationError


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float32)


# ---------------------------------------------------------------------------
# rotations


def axis_angle_to_matrix(aa: Tensor) -> Tensor:
    """Rodrigues formula, (..., 3) axis-angle -> (..., 3, 3) rotation matrix.

    Uses a second-order Taylor expansion of sin(t)/t and (1-cos t)/t^2 below
    t=1e-4 so the map stays smooth and NaN-free at zero rotation.
    """
    theta_sq = (aa * aa).sum(-1)
    theta = theta_sq.clamp_min(1e-32).sqrt()
    small = theta < 1e-4
    theta_safe = theta.clamp_min(1e-8)  # keeps the unselected branch finite
    sin_over = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta_safe) / theta_safe)
    cos_term = torch.where(
        small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta_safe)) / theta_safe.square()
    )

    zero = torch.zeros_like(theta)
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    k = torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
    ).reshape(aa.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    return eye + sin_over[..., None, None] * k + cos_term[..., None, None] * (k @ k)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Skeleton:
    """Rest-pose joint positions plus parent topology.

    rest_joints: (B, 3) canonical-space joint positions.
    parents: parent index per joint; the root (joint 0) has parent -1.
    """

    rest_joints: Tensor
    parents: tuple[int, ...]

    def __post_init__(self):
        joints = _as_tensor(self.rest_joints)
        object.__setattr__(self, "rest_joints", joints)
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        b = joints.shape[0]
        if joints.ndim != 2 or joints.shape[1] != 3:
            raise ValidationError(f"rest_joints must be (B, 3), got {tuple(joints.shape)}")
        if b < 2:
            raise ValidationError("a skeleton needs at least 2 joints")
        if not torch.isfinite(joints).all():
            raise ValidationError("rest_joints must be finite")
        if len(self.parents) != b:
            raise ValidationError("parents length must equal joint count")
        if self.parents[0] != -1:
            raise ValidationError("joint 0 is the root and must have parent -1")
        for j, p in enumerate(self.parents[1:], start=1):
            if p == j:
                raise ValidationError(f"joint {j} is its own parent")
            if not 0 <= p < j:
                # topological order: parents precede children, which also rules out cycles
                raise ValidationError(f"joint {j} must have a parent in [0, {j}), got {p}")

    @property
    def joint_count(self) -> int:
        return self.rest_joints.shape[0]

    @property
    def bone_count(self) -> int:
        """Number of rotating bones (every joint except the root)."""
        return self.joint_count - 1


@dataclass
class Pose:
    """One frame of pose parameters: rigid root transform + per-bone rotations.

    rigid_rot: (3,) axis-angle rotation of the rigid transform.
    rigid_trans: (3,) translation of the rigid transform.
    bone_rot: (B-1, 3) axis-angle rotation per bone, bone b at row b-1.
    """

    rigid_rot: Tensor
    rigid_trans: Tensor
    bone_rot: Tensor

    def __post_init__(self):
        self.rigid_rot = _as_tensor(self.rigid_rot)
        self.rigid_trans = _as_tensor(self.rigid_trans)
        self.bone_rot = _as_tensor(self.bone_rot)
        if self.rigid_rot.shape[-1] != 3 or self.rigid_trans.shape[-1] != 3:
            raise ValidationError("rigid_rot and rigid_trans must end in dim 3")
        if self.bone_rot.shape[-1] != 3:
            raise ValidationError("bone_rot must be (..., B-1, 3)")
        for t in (self.rigid_rot, self.rigid_trans, self.bone_rot):
            if not torch.isfinite(t).all():
                raise ValidationError("pose parameters must be finite")

    @property
    def joint_count(self) -> int:
        return self.bone_rot.shape[-2] + 1

    @classmethod
    def identity(cls, joint_count: int, dtype=torch.float32) -> "Pose":
        return cls(
            rigid_rot=torch.zeros(3, dtype=dtype),
            rigid_trans=torch.zeros(3, dtype=dtype),
            bone_rot=torch.zeros(joint_count - 1, 3, dtype=dtype),
        )

    def parameters(self) -> Tensor:
        """Flat (6 + 3*(B-1),) parameter vector: rigid rot, rigid trans, bone rotations."""
        return torch.cat(
            [self.rigid_rot, self.rigid_trans, self.bone_rot.reshape(-1)], dim=-1
        )


@dataclass
class MotionSequence:
    """A time-ordered sequence of poses over one skeleton, stored as stacked tensors.

    Fields may carry extra leading batch dimensions; the time axis is always the
    one shown below. Frame interval is fixed and implicit.

    rigid_rot: (..., T, 3), rigid_trans: (..., T, 3), bone_rot: (..., T, B-1, 3).
    """

    rigid_rot: Tensor
    rigid_trans: Tensor
    bone_rot: Tensor

    def __post_init__(self):
        self.rigid_rot = _as_tensor(self.rigid_rot)
        self.rigid_trans = _as_tensor(self.rigid_trans)
        self.bone_rot = _as_tensor(self.bone_rot)
        if self.bone_rot.ndim < 3:
            raise ValidationError("bone_rot must be (..., T, B-1, 3)")
        t = self.bone_rot.shape[-3]
        if self.rigid_rot.shape[-2:] != (t, 3) or self.rigid_trans.shape[-2:] != (t, 3):
            raise ValidationError("rigid fields must be (..., T, 3) with matching T")

    @property
    def length(self) -> int:
        return self.bone_rot.shape[-3]

    @property
    def joint_count(self) -> int:
        return self.bone_rot.shape[-2] + 1

    def pose(self, t: int) -> Pose:
        if self.bone_rot.ndim != 3:
            raise ValidationError("pose(t) is only defined for unbatched sequences")
        return Pose(self.rigid_rot[t], self.rigid_trans[t], self.bone_rot[t])

    def parameters(self) -> Tensor:
        """(..., T, 6 + 3*(B-1)) flat pose parameters per frame."""
        flat_bones = self.bone_rot.reshape(self.bone_rot.shape[:-2] + (-1,))
        return torch.cat([self.rigid_rot, self.rigid_trans, flat_bones], dim=-1)

    @classmethod
    def from_parameters(cls, params: Tensor, joint_count: int) -> "MotionSequence":
        """Inverse of parameters(): split (..., T, 6+3*(B-1)) back into fields."""
        expect = 6 + 3 * (joint_count - 1)
        if params.shape[-1] != expect:
            raise ValidationError(
                f"expected parameter width {expect} for {joint_count} joints, got {params.shape[-1]}"
            )
        bones = params[..., 6:].reshape(params.shape[:-1] + (joint_count - 1, 3))
        return cls(params[..., 0:3], params[..., 3:6], bones)

    @classmethod
    def rest(cls, joint_count: int, length: int, dtype=torch.float32) -> "MotionSequence":
        return cls(
            rigid_rot=torch.zeros(length, 3, dtype=dtype),
            rigid_trans=torch.zeros(length, 3, dtype=dtype),
            bone_rot=torch.zeros(length, joint_count - 1, 3, dtype=dtype),
        )

    def detach_clone(self) -> "MotionSequence":
        return MotionSequence(
            self.rigid_rot.detach().clone(),
            self.rigid_trans.detach().clone(),
            self.bone_rot.detach().clone(),
        )


@dataclass
class SkinnedMesh:
    """Canonical-space vertices with per-bone skinning weights.

    vertices: (N, 3); skinning_weights: (N, B), nonnegative rows summing to 1.
    Column 0 binds to the root rigid transform, column b to bone b.
    faces: optional (F, 3) int triangles, used only for OBJ export.
    """

    vertices: Tensor
    skinning_weights: Tensor
    faces: Tensor | None = None

    def __post_init__(self):
        self.vertices = _as_tensor(self.vertices)
        self.skinning_weights = _as_tensor(self.skinning_weights)
        if self.faces is not None:
            self.faces = _as_tensor(self.faces, dtype=torch.int64)
        w = self.skinning_weights
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValidationError("vertices must be (N, 3)")
        if w.ndim != 2 or w.shape[0] != self.vertices.shape[0]:
            raise ValidationError("skinning_weights must be (N, B)")
        if (w < 0).any():
            raise ValidationError("skinning weights must be nonnegative")
        rowsum = w.sum(dim=1)
        if (rowsum - 1.0).abs().max() > 1e-6:
            raise ValidationError("each skinning weight row must sum to 1 within 1e-6")

    @property
    def joint_count(self) -> int:
        return self.skinning_weights.shape[1]


@dataclass(frozen=True)
class Camera:
    """Weak-perspective camera: drop depth, scale x/y by `scale`, shift by principal point."""

    scale: float
    image_size: tuple[int, int]  # (h, w) in pixels
    principal_point: tuple[float, float] = field(default=None)  # (px, py); defaults to center

    def __post_init__(self):
        h, w = self.image_size
        if self.scale <= 0:
            raise ValidationError("camera scale must be > 0")
        if h < 1 or w < 1:
            raise ValidationError("image size must be at least 1x1")
        if self.principal_point is None:
            object.__setattr__(self, "principal_point", (w / 2.0, h / 2.0))

    @property
    def max_extent(self) -> float:
        return float(max(self.image_size))


# ---------------------------------------------------------------------------
# kinematics


def _check_joint_count(skel: Skeleton, bone_rot: Tensor):
    if bone_rot.shape[-2] != skel.bone_count:
        raise ValidationError(
            f"pose has {bone_rot.shape[-2] + 1} joints but skeleton has {skel.joint_count}"
        )


def bone_transforms(
    skel: Skeleton, rigid_rot: Tensor, rigid_trans: Tensor, bone_rot: Tensor
) -> tuple[Tensor, Tensor]:
    """World affine transform per bone, rigid transform composed last.

    Accepts leading batch dims on the pose tensors. Returns (rot, trans) with
    shapes (..., B, 3, 3) and (..., B, 3); entry 0 is the bare rigid transform,
    entry b maps canonical space to bone b's posed frame. Applying entry b to
    rest joint b gives the posed joint position.
    """
    _check_joint_count(skel, bone_rot)
    rest = skel.rest_joints.to(bone_rot.dtype)
    local_rot = axis_angle_to_matrix(bone_rot)  # (..., B-1, 3, 3)
    batch = bone_rot.shape[:-2]

    eye = torch.eye(3, dtype=bone_rot.dtype, device=bone_rot.device).expand(batch + (3, 3))
    rots = [eye]
    trans = [torch.zeros(batch + (3,), dtype=bone_rot.dtype, device=bone_rot.device)]
    for b in range(1, skel.joint_count):
        p = skel.parents[b]
        pivot = rest[p]
        rb = local_rot[..., b - 1, :, :]
        # local map: x -> rb (x - pivot) + pivot, composed onto the parent chain
        rot_b = rots[p] @ rb
        offset = pivot - (rb @ pivot)
        trans_b = trans[p] + (rots[p] @ offset.unsqueeze(-1)).squeeze(-1)
        rots.append(rot_b)
        trans.append(trans_b)

    chain_rot = torch.stack(rots, dim=-3)  # (..., B, 3, 3)
    chain_trans = torch.stack(trans, dim=-2)  # (..., B, 3)

    root_rot = axis_angle_to_matrix(rigid_rot)  # (..., 3, 3)
    full_rot = root_rot.unsqueeze(-3) @ chain_rot
    full_trans = (
        root_rot.unsqueeze(-3) @ chain_trans.unsqueeze(-1)
    ).squeeze(-1) + rigid_trans.unsqueeze(-2)
    return full_rot, full_trans


def forward_kinematics(skel: Skeleton, pose: Pose | MotionSequence) -> Tensor:
    """Posed 3D joint positions, (..., B, 3).

    Identity pose returns the rest joints exactly.
    """
    rot, trans = bone_transforms(skel, pose.rigid_rot, pose.rigid_trans, pose.bone_rot)
    rest = skel.rest_joints.to(pose.bone_rot.dtype)
    return (rot @ rest.unsqueeze(-1)).squeeze(-1) + trans


def linear_blend_skinning(mesh: SkinnedMesh, skel: Skeleton, pose: Pose | MotionSequence) -> Tensor:
    """Pose mesh vertices as the weight-blended sum of per-bone rigid transforms.

    Returns (..., N, 3). Differentiable in all pose parameters.
    """
    if mesh.joint_count != skel.joint_count:
        raise ValidationError(
            f"mesh binds {mesh.joint_count} bones but skeleton has {skel.joint_count} joints"
        )
    rot, trans = bone_transforms(skel, pose.rigid_rot, pose.rigid_trans, pose.bone_rot)
    v = mesh.vertices.to(pose.bone_rot.dtype)
    w = mesh.skinning_weights.to(pose.bone_rot.dtype)
    # per-bone transform of every vertex: (..., B, N, 3)
    per_bone = torch.einsum("...bij,nj->...bni", rot, v) + trans.unsqueeze(-2)
    return torch.einsum("nb,...bni->...ni", w, per_bone)


def project(points3d: Tensor, cam: Camera) -> Tensor:
    """Weak-perspective projection, (..., 3) -> (..., 2) pixel coordinates."""
    if not torch.isfinite(points3d).all():
        raise ValidationError("points must be finite")
    px, py = cam.principal_point
    offset = torch.tensor([px, py], dtype=points3d.dtype, device=points3d.device)
    return points3d[..., :2] * cam.scale + offset


def keypoints2d(skel: Skeleton, pose: Pose | MotionSequence, cam: Camera) -> Tensor:
    """Projected posed joints, (..., B, 2): forward_kinematics composed with project."""
    return project(forward_kinematics(skel, pose), cam)


# ---------------------------------------------------------------------------
# OBJ export


def save_obj(path, vertices, faces=None):
    """Write vertices (and triangles, if given) as a Wavefront OBJ file."""
    v = np.asarray(vertices.detach().cpu() if isinstance(vertices, Tensor) else vertices)
    lines = [f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for p in v]
    if faces is not None:
        f = np.asarray(faces.detach().cpu() if isinstance(faces, Tensor) else faces)
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]  # OBJ is 1-indexed
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
