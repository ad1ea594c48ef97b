"""Encoder, generator, verification head and the two discriminators.

Tensors are NCHW; images live in [-1, 1]. Every probability head ends in a
sigmoid squeezed into ``[PROB_EPS, 1 - PROB_EPS]`` so scores never hit 0 or
1 exactly in float32.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from .pose import NUM_JOINTS

PROB_EPS = 1e-6
GROUPS = ("E", "G", "V", "D_id", "D_pd")


@dataclass
class ModelConfig:
    preset: str = "desk"
    embed_dim: int = 128
    pose_dim: int = 32
    noise_dim: int = 64
    height: int = 64
    width: int = 32
    encoder_channels: int = 16
    pose_channels: int = 16
    generator_channels: int = 128
    disc_channels: int = 16
    dropout: float = 0.5
    share_encoder_with_did: bool = False
    single_branch_classifier: bool = False
    num_identities: int = 0

    def __post_init__(self):
        if self.preset not in ("desk", "full"):
            raise ValueError(f"unknown preset {self.preset!r}")
        for f in ("embed_dim", "pose_dim", "noise_dim", "height", "width", "encoder_channels",
                  "pose_channels", "generator_channels", "disc_channels"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.height % 32 or self.width % 32:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by 32")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.single_branch_classifier and self.num_identities < 2:
            raise ValueError("single_branch_classifier needs num_identities >= 2")

    @classmethod
    def desk(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides):
        base = dict(preset="full", embed_dim=2048, pose_dim=128, noise_dim=256, height=256,
                    width=128, pose_channels=64, generator_channels=512, disc_channels=64)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        preset = d.get("preset", "desk")
        return (cls.full if preset == "full" else cls.desk)(**d)

    def to_dict(self):
        return asdict(self)


def squeezed_sigmoid(logits):
    return PROB_EPS + (1.0 - 2.0 * PROB_EPS) * torch.sigmoid(logits)


def _check(cond, msg):
    if not cond:
        raise ValueError(msg)


def _conv_bn_relu(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class DeskBackbone(nn.Module):
    """Four stride-2 stages of two 3x3 convs each, then global average pooling."""

    def __init__(self, out_dim, base=16):
        super().__init__()
        widths = [base, base * 2, base * 4, out_dim]
        layers, cin = [], 3
        for w in widths:
            layers += [_conv_bn_relu(cin, w, 2), _conv_bn_relu(w, w, 1)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


class ResNetBackbone(nn.Module):
    def __init__(self, out_dim):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.fc = nn.Identity()
        self.net = net
        self.proj = nn.Identity() if out_dim == 2048 else nn.Linear(2048, out_dim)

    def forward(self, x):
        return self.proj(self.net(x))


def make_backbone(cfg):
    if cfg.preset == "full":
        return ResNetBackbone(cfg.embed_dim)
    return DeskBackbone(cfg.embed_dim, cfg.encoder_channels)


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.backbone = make_backbone(cfg)

    def forward(self, images):
        cfg = self.cfg
        _check(images.dim() == 4 and tuple(images.shape[1:]) == (3, cfg.height, cfg.width),
               f"expected images N x 3 x {cfg.height} x {cfg.width}, got {tuple(images.shape)}")
        return self.backbone(images)


class PoseEncoder(nn.Module):
    """Five stride-2 Conv-BN-ReLU blocks, flattened and projected to ``pose_dim``."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.pose_channels
        widths = [c, c * 2, c * 4, c * 4, c * 4]
        blocks, cin = [], NUM_JOINTS
        for w in widths:
            blocks += [nn.Conv2d(cin, w, 4, 2, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            cin = w
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(cin * (cfg.height // 32) * (cfg.width // 32), cfg.pose_dim)

    def forward(self, pose_maps):
        return self.fc(self.blocks(pose_maps).flatten(1))


class Generator(nn.Module):
    """Pose encoder plus five Conv-BN-Dropout-ReLU upsampling blocks."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.pose_encoder = PoseEncoder(cfg)
        c = cfg.generator_channels
        widths = [c, c, c // 2, c // 4, c // 8]
        self.seed_hw = (cfg.height // 32, cfg.width // 32)
        self.fc = nn.Sequential(
            nn.Linear(cfg.embed_dim + cfg.pose_dim + cfg.noise_dim, c * self.seed_hw[0] * self.seed_hw[1]),
            nn.BatchNorm1d(c * self.seed_hw[0] * self.seed_hw[1]),
            nn.ReLU(inplace=True),
        )
        blocks, cin = [], c
        for w in widths:
            blocks += [
                nn.ConvTranspose2d(cin, w, 4, 2, 1, bias=False),
                nn.BatchNorm2d(w),
                nn.Dropout(cfg.dropout),
                nn.ReLU(inplace=True),
            ]
            cin = w
        self.up = nn.Sequential(*blocks)
        self.to_rgb = nn.Sequential(nn.Conv2d(cin, 3, 3, 1, 1), nn.Tanh())

    def forward(self, embedding, pose_feature, noise):
        z = torch.cat([embedding, pose_feature, noise], dim=1)
        h = self.fc(z).view(-1, self.cfg.generator_channels, *self.seed_hw)
        return self.to_rgb(self.up(h))


class VerificationHead(nn.Module):
    """(e1 - e2)^2 -> BatchNorm -> Linear -> sigmoid."""

    def __init__(self, dim):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)
        self.fc = nn.Linear(dim, 1)

    def logits(self, e1, e2):
        return self.fc(self.bn((e1 - e2).pow(2))).squeeze(1)

    def forward(self, e1, e2):
        return squeezed_sigmoid(self.logits(e1, e2))


class IdentityDiscriminator(nn.Module):
    """Verification-style head on its own backbone.

    With ``backbone=None`` the caller supplies features (shared-encoder
    ablation).
    """

    def __init__(self, cfg, own_backbone=True):
        super().__init__()
        self.backbone = Encoder(cfg) if own_backbone else None
        self.head = VerificationHead(cfg.embed_dim)


class PoseDiscriminator(nn.Module):
    """PatchGAN over the image/heatmap concatenation: four stride-2 Conv-ReLU blocks."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.disc_channels
        widths = [c, c * 2, c * 4, c * 8]
        layers, cin = [], 3 + NUM_JOINTS
        for w in widths:
            layers += [nn.Conv2d(cin, w, 4, 2, 1), nn.ReLU(inplace=True)]
            cin = w
        layers.append(nn.Conv2d(cin, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, image, pose_map):
        return squeezed_sigmoid(self.net(torch.cat([image, pose_map], dim=1)).squeeze(1))


def _gan_init(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


class FDGAN(nn.Module):
    """Container for the five blocks plus an optional identity classifier."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.E = Encoder(cfg)
        self.G = Generator(cfg)
        self.V = VerificationHead(cfg.embed_dim)
        self.D_id = IdentityDiscriminator(cfg, own_backbone=not cfg.share_encoder_with_did)
        self.D_pd = PoseDiscriminator(cfg)
        if cfg.single_branch_classifier:
            self.C = nn.Linear(cfg.embed_dim, cfg.num_identities)
        _gan_init(self.G)

    def groups(self):
        out = {name: getattr(self, name) for name in GROUPS}
        if self.cfg.single_branch_classifier:
            out["C"] = self.C
        return out

    # -- checked entry points ------------------------------------------------

    def _check_images(self, images, what="images"):
        cfg = self.cfg
        _check(isinstance(images, torch.Tensor) and images.dim() == 4
               and tuple(images.shape[1:]) == (3, cfg.height, cfg.width),
               f"{what}: expected N x 3 x {cfg.height} x {cfg.width}, got {tuple(getattr(images, 'shape', ()))}")

    def encode(self, images):
        self._check_images(images)
        return self.E(images)

    def encode_pose(self, pose_maps):
        cfg = self.cfg
        _check(pose_maps.dim() == 4 and tuple(pose_maps.shape[1:]) == (NUM_JOINTS, cfg.height, cfg.width),
               f"pose maps: expected N x {NUM_JOINTS} x {cfg.height} x {cfg.width}, got {tuple(pose_maps.shape)}")
        return self.G.pose_encoder(pose_maps)

    def generate(self, embedding, pose_feature, noise):
        cfg = self.cfg
        n = embedding.shape[0]
        _check(tuple(embedding.shape) == (n, cfg.embed_dim), f"embedding must be N x {cfg.embed_dim}")
        _check(tuple(pose_feature.shape) == (n, cfg.pose_dim), f"pose feature must be N x {cfg.pose_dim}")
        _check(tuple(noise.shape) == (n, cfg.noise_dim), f"noise must be N x {cfg.noise_dim}")
        return self.G(embedding, pose_feature, noise)

    def verify(self, e1, e2):
        _check(e1.shape == e2.shape and e1.dim() == 2 and e1.shape[1] == self.cfg.embed_dim,
               f"embeddings must both be N x {self.cfg.embed_dim}")
        return self.V(e1, e2)

    def identity_features(self, images):
        backbone = self.D_id.backbone if self.D_id.backbone is not None else self.E
        return backbone(images)

    def discriminate_identity(self, anchor, candidate, anchor_features=None):
        self._check_images(candidate, "candidate")
        if anchor_features is None:
            self._check_images(anchor, "anchor")
            anchor_features = self.identity_features(anchor)
        return self.D_id.head(anchor_features, self.identity_features(candidate))

    def discriminate_pose(self, image, pose_map):
        self._check_images(image)
        _check(pose_map.dim() == 4 and pose_map.shape[1] == NUM_JOINTS
               and pose_map.shape[2:] == image.shape[2:] and pose_map.shape[0] == image.shape[0],
               f"pose map {tuple(pose_map.shape)} does not match image {tuple(image.shape)}")
        return self.D_pd(image, pose_map)

    def classify_identity(self, embedding):
        return self.C(embedding)
