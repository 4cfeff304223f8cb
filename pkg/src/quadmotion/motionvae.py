"""Spatio-temporal transformer VAE over bone rotations.

The encoder fuses per-bone feature descriptors of each frame into one pose
feature (spatial stage), then compresses the sequence of pose features into a
diagonal Gaussian over a single motion latent (temporal stage). The decoder is
symmetric: timestamp queries cross-attend to the latent to recover per-frame
features, then bone-index queries cross-attend to each frame feature to emit
one axis-angle rotation per bone.

Token layout follows the (tokens, batch, dim) convention so intermediate shapes
can be read off directly; shape_trace() exposes them for verification. The root
rigid transform is intentionally outside the VAE and comes from a separate
small head, as does the single-frame pose head used in the first training phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .errors import ValidationError
from .skeleton import Camera, Pose, Skeleton, keypoints2d


@dataclass
class ModelConfig:
    """Transformer and descriptor hyperparameters.

    descriptor_dim must equal global_dim + local_dim + 6 (bone-index scalar,
    3D rest joint, 2D projected joint). latent_dim must be divisible by heads.
    """

    latent_dim: int = 256
    blocks: int = 4
    heads: int = 4
    ffn_dim: int = 1024
    dropout: float = 0.0
    global_dim: int = 512
    local_dim: int = 119
    bone_count: int = 20
    descriptor_dim: int = 640
    max_seq_len: int = 512
    zero_init_output: bool = True
    spatial_transformer: bool = True

    def __post_init__(self):
        if self.latent_dim % self.heads != 0:
            raise ValidationError("latent_dim must be divisible by heads")
        if self.latent_dim % 2 != 0:
            raise ValidationError("latent_dim must be even (sinusoidal position pairs)")
        expect = self.global_dim + self.local_dim + 6
        if self.descriptor_dim != expect:
            raise ValidationError(
                f"descriptor_dim must be global_dim + local_dim + 6 = {expect}, "
                f"got {self.descriptor_dim}"
            )
        if self.bone_count < 1 or self.blocks < 1:
            raise ValidationError("bone_count and blocks must be positive")


# ---------------------------------------------------------------------------
# features and descriptors


@dataclass
class FrameFeatures:
    """Per-frame image features: one global vector plus a local map queryable at pixels.

    The local map is parametrized by 2D anchor points (at desk scale, the
    frame's keypoints): a query pixel is embedded together with its displacement
    to the nearest anchor, plus a per-frame additive noise vector. `extent` is
    the pixel normalization scale, max(h, w) of the source image.
    """

    global_feat: Tensor  # (global_dim,)
    anchors: Tensor  # (A, 2) pixel positions
    local_noise: Tensor  # (local_dim,)
    extent: float

    def local(self, pixels: Tensor) -> Tensor:
        """Sample the local feature map, (..., 2) pixels -> (..., local_dim)."""
        anchors = self.anchors.to(pixels.dtype)
        delta = pixels.unsqueeze(-2) - anchors  # (..., A, 2)
        nearest = (delta**2).sum(-1).argmin(-1)  # (...,)
        disp = torch.take_along_dim(delta, nearest[..., None, None].expand(*nearest.shape, 1, 2), dim=-2)
        disp = disp.squeeze(-2)
        query = torch.cat([pixels / self.extent, disp / self.extent], dim=-1)
        emb = sinusoidal_embedding(query, self.local_noise.shape[-1])
        return emb + self.local_noise.to(pixels.dtype)


def sinusoidal_embedding(values: Tensor, dim: int) -> Tensor:
    """Embed (..., n) scalars into (..., dim) with a geometric sin/cos frequency ladder.

    Layout is frequency-major ([sin(f0*x), cos(f0*x), sin(f1*x), ...] with x the
    full scalar block), so truncating to `dim` sheds the highest frequencies
    while every scalar keeps its low-frequency components. dim < 2n would drop
    scalars entirely and is rejected.
    """
    n = values.shape[-1]
    if dim < 2 * n:
        raise ValidationError(
            f"embedding dim {dim} cannot hold sin+cos of {n} scalars (needs >= {2 * n})"
        )
    pairs = -(-dim // (2 * n))  # ceil
    freqs = (2.0 ** torch.arange(pairs, dtype=values.dtype, device=values.device)) * math.pi
    angles = values.unsqueeze(-2) * freqs.unsqueeze(-1)  # (..., pairs, n)
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., pairs, 2n)
    return emb.reshape(*values.shape[:-1], -1)[..., :dim]


def positional_encoding(positions: Tensor, dim: int) -> Tensor:
    """Classic transformer sinusoidal encoding, (...,) positions -> (..., dim)."""
    half = dim // 2
    idx = torch.arange(half, dtype=positions.dtype, device=positions.device)
    rates = torch.exp(-math.log(10000.0) * (2 * idx) / dim)
    angles = positions.unsqueeze(-1) * rates
    pe = torch.zeros(*positions.shape, dim, dtype=positions.dtype, device=positions.device)
    pe[..., 0::2] = torch.sin(angles)
    pe[..., 1::2] = torch.cos(angles[..., : dim - half])
    return pe


def build_bone_descriptors(
    features: FrameFeatures,
    skel: Skeleton,
    pose: Pose,
    cam: Camera,
    config: ModelConfig,
) -> Tensor:
    """Per-bone fused descriptors for one frame, (B-1, descriptor_dim).

    Concatenation order: global feature, local feature sampled at the bone's
    projected pixel, normalized bone index, rest joint, projected pixel.
    """
    if skel.bone_count != config.bone_count:
        raise ValidationError(
            f"skeleton has {skel.bone_count} bones but model expects {config.bone_count}"
        )
    if features.global_feat.shape[-1] != config.global_dim:
        raise ValidationError(
            f"global feature dim {features.global_feat.shape[-1]} != configured {config.global_dim}"
        )
    pixels = keypoints2d(skel, pose, cam)[1:]  # (B-1, 2), root excluded
    local = features.local(pixels)
    if local.shape[-1] != config.local_dim:
        raise ValidationError(
            f"local feature dim {local.shape[-1]} != configured {config.local_dim}"
        )
    b_total = skel.joint_count
    dtype = local.dtype
    index_enc = (
        torch.arange(1, b_total, dtype=dtype, device=local.device).unsqueeze(-1) / b_total
    )
    rest = skel.rest_joints[1:].to(dtype)
    glob = features.global_feat.to(dtype).expand(b_total - 1, -1)
    return torch.cat([glob, local, index_enc, rest, pixels.to(dtype)], dim=-1)


# ---------------------------------------------------------------------------
# latent distribution


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over motion latents; variance stored as log-variance."""

    mean: Tensor  # (..., D)
    logvar: Tensor  # (..., D)

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ValidationError("mean and logvar must have identical shapes")
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.logvar).all()):
            raise ValidationError("latent distribution parameters must be finite")

    @classmethod
    def from_variance(cls, mean: Tensor, variance: Tensor) -> "LatentDistribution":
        if (variance <= 0).any():
            raise ValidationError("variance must be strictly positive")
        return cls(mean, variance.log())

    def variance(self) -> Tensor:
        return self.logvar.exp()

    def stddev(self) -> Tensor:
        return (0.5 * self.logvar).exp()


def reparameterize(dist: LatentDistribution, noise: Tensor) -> Tensor:
    """z = mean + std * noise; gradients flow to both distribution parameters."""
    if noise.shape != dist.mean.shape:
        raise ValidationError("noise must match the distribution shape")
    return dist.mean + dist.stddev() * noise


# ---------------------------------------------------------------------------
# model


def _transformer_encoder(cfg: ModelConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=cfg.latent_dim,
        nhead=cfg.heads,
        dim_feedforward=cfg.ffn_dim,
        dropout=cfg.dropout,
        norm_first=True,
    )
    return nn.TransformerEncoder(
        layer, cfg.blocks, norm=nn.LayerNorm(cfg.latent_dim), enable_nested_tensor=False
    )


def _transformer_decoder(cfg: ModelConfig) -> nn.TransformerDecoder:
    layer = nn.TransformerDecoderLayer(
        d_model=cfg.latent_dim,
        nhead=cfg.heads,
        dim_feedforward=cfg.ffn_dim,
        dropout=cfg.dropout,
        norm_first=True,
    )
    return nn.TransformerDecoder(layer, cfg.blocks, norm=nn.LayerNorm(cfg.latent_dim))


def _mlp_head(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class MotionVAE(nn.Module):
    """Motion VAE plus the separate rigid-pose and single-frame pose heads.

    With `zero_init_output` every output projection starts at zero, so the
    freshly constructed model predicts the rest pose (identity rotations,
    identity rigid transform) and a standard-normal latent for any input.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.latent_dim

        if config.spatial_transformer:
            self.input_proj = nn.Linear(config.descriptor_dim, d)
            self.bone_query = nn.Parameter(torch.randn(d) * 0.02)
            self.spatial_encoder = _transformer_encoder(config)
            self.spatial_decoder = _transformer_decoder(config)
            self.rotation_head = nn.Linear(d, 3)
        else:
            # ablation: global features feed the temporal encoder directly and a
            # fixed set of bone rotations is decoded per frame feature
            self.global_proj = nn.Linear(config.global_dim, d)
            self.direct_rotation_head = nn.Linear(d, config.bone_count * 3)

        self.mu_query = nn.Parameter(torch.randn(d) * 0.02)
        self.sigma_query = nn.Parameter(torch.randn(d) * 0.02)
        self.temporal_encoder = _transformer_encoder(config)
        self.mu_head = nn.Linear(d, d)
        self.logvar_head = nn.Linear(d, d)
        self.temporal_decoder = _transformer_decoder(config)

        self.rigid_head = _mlp_head(config.global_dim, d, 6)
        self.frame_pose_head = _mlp_head(d, d, config.bone_count * 3)

        if config.zero_init_output:
            outputs = [self.mu_head, self.logvar_head, self.rigid_head[-1], self.frame_pose_head[-1]]
            outputs.append(self.rotation_head if config.spatial_transformer else self.direct_rotation_head)
            for lin in outputs:
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    # -- encoding ------------------------------------------------------------

    def encode_spatial(self, descriptors: Tensor) -> Tensor:
        """Fuse one frame's bone tokens into a pose feature, (K, F, width) -> (F, D).

        F frames ride along the batch axis. A learnable query token is
        prepended and its output is the pose feature.
        """
        k = self.config.bone_count
        if descriptors.shape[0] != k:
            raise ValidationError(f"expected {k} bone tokens, got {descriptors.shape[0]}")
        x = self.input_proj(descriptors)  # (K, F, D)
        query = self.bone_query.to(x.dtype).expand(1, x.shape[1], -1)
        x = torch.cat([query, x], dim=0)  # (K+1, F, D)
        return self.spatial_encoder(x)[0]

    def encode_temporal(self, pose_features: Tensor) -> LatentDistribution:
        """(T, N, D) pose features -> latent distribution with mean/logvar (N, D).

        Appends the learnable mean and variance query tokens, adds sinusoidal
        positions over all T+2 tokens, and reads the two query outputs.
        """
        t = pose_features.shape[0]
        if not 1 <= t <= self.config.max_seq_len:
            raise ValidationError(f"sequence length {t} outside [1, {self.config.max_seq_len}]")
        n = pose_features.shape[1]
        queries = torch.stack([self.mu_query, self.sigma_query]).to(pose_features.dtype)
        tokens = torch.cat([pose_features, queries.unsqueeze(1).expand(2, n, -1)], dim=0)
        pos = torch.arange(t + 2, dtype=pose_features.dtype, device=pose_features.device)
        tokens = tokens + positional_encoding(pos, self.config.latent_dim).unsqueeze(1)
        out = self.temporal_encoder(tokens)
        return LatentDistribution(self.mu_head(out[-2]), self.logvar_head(out[-1]))

    def encode(self, descriptors: Tensor) -> LatentDistribution:
        """Full sequence encoding, (N, T, K, width) or (T, K, width) -> distribution."""
        unbatched = descriptors.ndim == 3
        if unbatched:
            descriptors = descriptors.unsqueeze(0)
        n, t, k, w = descriptors.shape
        flat = descriptors.permute(2, 0, 1, 3).reshape(k, n * t, w)
        pose_feats = self.encode_spatial(flat).reshape(n, t, -1).permute(1, 0, 2)
        dist = self.encode_temporal(pose_feats)
        if unbatched:
            return LatentDistribution(dist.mean[0], dist.logvar[0])
        return dist

    def encode_global(self, global_feats: Tensor) -> LatentDistribution:
        """Ablation path: (N, T, global_dim) global features straight to the temporal encoder."""
        if self.config.spatial_transformer:
            raise ValidationError("encode_global is only available without the spatial transformer")
        x = self.global_proj(global_feats).permute(1, 0, 2)  # (T, N, D)
        return self.encode_temporal(x)

    # -- decoding ------------------------------------------------------------

    def decode_temporal(self, z: Tensor, length: int) -> Tensor:
        """Query the temporal decoder with timestamps, -> (T, N, D) frame features.

        Queries are the sinusoidal encodings of the timestamps; the latent is
        the single key/value token.
        """
        if length < 1:
            raise ValidationError("sequence length must be >= 1")
        if z.ndim != 2:
            raise ValidationError("z must be (N, latent_dim)")
        n = z.shape[0]
        pos = torch.arange(length, dtype=z.dtype, device=z.device)
        queries = positional_encoding(pos, self.config.latent_dim)
        queries = queries.unsqueeze(1).expand(length, n, -1)
        return self.temporal_decoder(tgt=queries, memory=z.unsqueeze(0))

    def decode_spatial(self, frame_features: Tensor) -> Tensor:
        """Query the spatial decoder with bone indices, (T, N, D) -> (N, T, K, 3).

        Each frame feature is the single key/value token for that frame's
        bone-rotation queries; the final linear maps to axis-angle vectors.
        """
        t, n, d = frame_features.shape
        k = self.config.bone_count
        memory = frame_features.reshape(1, t * n, d)
        pos = torch.arange(k, dtype=frame_features.dtype, device=frame_features.device)
        queries = positional_encoding(pos, d).unsqueeze(1).expand(k, t * n, d)
        out = self.spatial_decoder(tgt=queries, memory=memory)  # (K, T*N, D)
        rot = self.rotation_head(out)
        return rot.reshape(k, t, n, 3).permute(2, 1, 0, 3)

    def decode(self, z: Tensor, length: int) -> Tensor:
        """Latent to bone rotations, (N, D) or (D,) -> (N, T, K, 3) or (T, K, 3)."""
        unbatched = z.ndim == 1
        if unbatched:
            z = z.unsqueeze(0)
        frame_feats = self.decode_temporal(z, length)
        if self.config.spatial_transformer:
            rot = self.decode_spatial(frame_feats)
        else:
            flat = self.direct_rotation_head(frame_feats)  # (T, N, K*3)
            rot = flat.reshape(length, z.shape[0], self.config.bone_count, 3).permute(1, 0, 2, 3)
        return rot[0] if unbatched else rot

    def sample_prior(self, length: int, count: int = 1, generator=None) -> Tensor:
        """Draw standard-normal latents and decode them, -> (count, T, K, 3) rotations.

        The rigid transform is not sampled; callers supply it externally.
        """
        device = next(self.parameters()).device
        dtype = next(self.parameters()).dtype
        z = torch.randn(count, self.config.latent_dim, generator=generator, dtype=dtype, device=device)
        with torch.no_grad():
            return self.decode(z, length)

    # -- separate heads --------------------------------------------------------

    def predict_rigid_pose(self, global_feat: Tensor) -> Tensor:
        """Rigid root transform from the global feature, (..., global_dim) -> (..., 6).

        First three components are the axis-angle rotation, last three the
        translation.
        """
        return self.rigid_head(global_feat)

    def predict_pose_singleframe(self, descriptors: Tensor, global_feat: Tensor):
        """Single-frame pose prediction used in the first training phase.

        descriptors: (K, F, width); global_feat: (F, global_dim).
        Returns (rigid (F, 6), bone rotations (F, K, 3)).
        """
        if self.config.spatial_transformer:
            pose_feat = self.encode_spatial(descriptors)  # (F, D)
        else:
            pose_feat = self.global_proj(global_feat)
        bones = self.frame_pose_head(pose_feat).reshape(-1, self.config.bone_count, 3)
        rigid = self.predict_rigid_pose(global_feat)
        return rigid, bones

    # -- verification ----------------------------------------------------------

    def shape_trace(self, descriptors: Tensor, noise: Tensor) -> list[tuple[str, tuple]]:
        """Run the full pipeline on one sequence recording every intermediate shape.

        descriptors: (K, T, width); noise: (latent_dim,). Entries follow the
        stage order of the architecture; shapes are (tokens, batch, dim).
        """
        if not self.config.spatial_transformer:
            raise ValidationError("shape_trace requires the spatial transformer path")
        k, t, w = descriptors.shape
        d = self.config.latent_dim
        trace: list[tuple[str, tuple]] = [("bone_descriptors", (k, t, w))]

        x = self.input_proj(descriptors)
        trace.append(("input_projection", tuple(x.shape)))
        x = torch.cat([self.bone_query.to(x.dtype).expand(1, t, -1), x], dim=0)
        trace.append(("concat_bone_query", tuple(x.shape)))
        pose_feats = self.spatial_encoder(x)[:1]
        trace.append(("spatial_encoder", tuple(pose_feats.shape)))
        pose_feats = pose_feats[0].reshape(t, 1, d)
        trace.append(("reshape_frames", tuple(pose_feats.shape)))

        queries = torch.stack([self.mu_query, self.sigma_query]).to(pose_feats.dtype)
        tokens = torch.cat([pose_feats, queries.unsqueeze(1)], dim=0)
        trace.append(("concat_latent_queries", tuple(tokens.shape)))
        pos = torch.arange(t + 2, dtype=tokens.dtype, device=tokens.device)
        tokens = tokens + positional_encoding(pos, d).unsqueeze(1)
        trace.append(("positional_encoding", tuple(tokens.shape)))
        out = self.temporal_encoder(tokens)[-2:]
        trace.append(("temporal_encoder", tuple(out.shape)))

        dist = LatentDistribution(self.mu_head(out[0]), self.logvar_head(out[1]))
        z = reparameterize(dist, noise.unsqueeze(0))
        trace.append(("reparameterize", (1,) + tuple(z.shape)))

        frame_feats = self.decode_temporal(z, t)
        trace.append(("temporal_decoder", tuple(frame_feats.shape)))
        memory = frame_feats.reshape(1, t, d)
        trace.append(("reshape_memory", tuple(memory.shape)))
        qpos = torch.arange(k, dtype=z.dtype, device=z.device)
        bone_queries = positional_encoding(qpos, d).unsqueeze(1).expand(k, t, d)
        decoded = self.spatial_decoder(tgt=bone_queries, memory=memory)
        trace.append(("spatial_decoder", tuple(decoded.shape)))
        decoded = decoded.permute(1, 0, 2)
        trace.append(("reshape_bones", tuple(decoded.shape)))
        rot = self.rotation_head(decoded)
        trace.append(("rotation_head", tuple(rot.shape)))
        return trace
