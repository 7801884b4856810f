"""Feature interaction fusion network.

Two encoders (same structure, separate parameters) produce four feature
levels per modality.  At every level a :class:`FIFB` merges the visible and
infrared features using channel attention, cross attention between the
modalities and spatial enhancement.  A U-Net style decoder upsamples the
deepest fused level back to the input resolution, concatenating the fused
feature of the matching scale before each upconv block.

All image tensors are (B, 1, H, W); H and W must be divisible by 16.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionMismatchError, ShapeNotDivisibleError

CHECKPOINT_FORMAT = "ivfuse-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    levels: int = 4
    attention_token_downsample: int = 1
    channel_mlp_ratio: float = 0.5
    spatial_hidden_ratio: float = 0.5
    use_se: bool = True  # spatial enhancement
    use_cc: bool = True  # cross-channel (channel) attention
    use_ca: bool = True  # cross attention

    def __post_init__(self):
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        if self.levels != 4:
            raise ConfigError("levels is fixed at 4")
        if self.attention_token_downsample < 1:
            raise ConfigError("attention_token_downsample must be >= 1")

    def channels(self, level: int) -> int:
        """Channel count of 1-based ``level``."""
        return self.base_channels * 2 ** (level - 1)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown net config keys: {sorted(unknown)}")
        return cls(**d)


def _hidden(c: int, ratio: float) -> int:
    return max(1, int(round(c * ratio)))


class ConvUnit(nn.Sequential):
    def __init__(self, c_in, c_out):
        super().__init__(nn.Conv2d(c_in, c_out, 3, padding=1),
                         nn.BatchNorm2d(c_out), nn.ReLU())


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        blocks, c_in = [], 1
        for level in range(1, cfg.levels + 1):
            c = cfg.channels(level)
            blocks.append(nn.Sequential(ConvUnit(c_in, c), ConvUnit(c, c)))
            c_in = c
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats


class ChannelAttention(nn.Module):
    """Joint channel weights for both modalities.

    Max- and average-pooled descriptors are concatenated in the order
    ``[max_vi, avg_vi, max_ir, avg_ir]``; the sigmoid output is split into
    the visible half followed by the infrared half.
    """

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(4 * channels, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 2 * channels))

    def forward(self, phi_vi, phi_ir):
        c = phi_vi.shape[1]
        pooled = torch.cat([phi_vi.amax(dim=(2, 3)), phi_vi.mean(dim=(2, 3)),
                            phi_ir.amax(dim=(2, 3)), phi_ir.mean(dim=(2, 3))], dim=1)
        weights = torch.sigmoid(self.mlp(pooled))
        w_vi, w_ir = weights[:, :c], weights[:, c:]
        return (w_vi[:, :, None, None] * phi_vi, w_ir[:, :, None, None] * phi_ir,
                w_vi, w_ir)


def _fused_attention(q, k, v):
    # a head axis is needed for the memory-efficient CPU kernel to be picked
    out = F.scaled_dot_product_attention(q[:, None], k[:, None], v[:, None], scale=1.0)
    return out[:, 0]


class CrossAttention(nn.Module):
    """Spatial tokens (length H*W, width C) attend across modalities.

    ``attn_vi_ir = softmax(Q_vi K_ir^T)`` produces ``varphi_ir = attn_vi_ir V_ir``
    and symmetrically for ``varphi_vi``.  Every projection has its own
    parameters.  With ``downsample > 1`` the features are average pooled
    before projection and the result is upsampled back (nearest).

    When ``return_maps`` is false the same product is computed by the fused
    attention kernel, which never materialises the (HW, HW) map; full-size
    images need this.
    """

    def __init__(self, channels: int, dim: int | None = None, downsample: int = 1):
        super().__init__()
        dim = dim or channels
        self.downsample = downsample
        self.q_vi, self.k_vi, self.v_vi = (nn.Linear(channels, dim) for _ in range(3))
        self.q_ir, self.k_ir, self.v_ir = (nn.Linear(channels, dim) for _ in range(3))

    @staticmethod
    def _tokens(x):
        return x.flatten(2).transpose(1, 2)  # (B, HW, C)

    def forward(self, rho_vi, rho_ir, return_maps: bool = True):
        size = rho_vi.shape[-2:]
        if self.downsample > 1:
            rho_vi = F.avg_pool2d(rho_vi, self.downsample, ceil_mode=True)
            rho_ir = F.avg_pool2d(rho_ir, self.downsample, ceil_mode=True)
        h, w = rho_vi.shape[-2:]
        t_vi, t_ir = self._tokens(rho_vi), self._tokens(rho_ir)
        if return_maps:
            attn_vi_ir = torch.softmax(self.q_vi(t_vi) @ self.k_ir(t_ir).transpose(1, 2), dim=-1)
            attn_ir_vi = torch.softmax(self.q_ir(t_ir) @ self.k_vi(t_vi).transpose(1, 2), dim=-1)
            varphi_ir = attn_vi_ir @ self.v_ir(t_ir)
            varphi_vi = attn_ir_vi @ self.v_vi(t_vi)
        else:
            attn_vi_ir = attn_ir_vi = None
            varphi_ir = _fused_attention(self.q_vi(t_vi), self.k_ir(t_ir), self.v_ir(t_ir))
            varphi_vi = _fused_attention(self.q_ir(t_ir), self.k_vi(t_vi), self.v_vi(t_vi))

        def back(t):
            x = t.transpose(1, 2).reshape(t.shape[0], t.shape[2], h, w)
            return F.interpolate(x, size=size, mode="nearest") if self.downsample > 1 else x

        return back(varphi_vi), back(varphi_ir), attn_vi_ir, attn_ir_vi


class SpatialEnhancement(nn.Module):
    """phi * softmax_HW(conv1x1(relu(conv1x1(phi))))."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.score = nn.Conv2d(hidden, 1, 1)

    def spatial_map(self, phi):
        logits = self.score(F.relu(self.reduce(phi)))
        b, _, h, w = logits.shape
        return torch.softmax(logits.view(b, -1), dim=1).view(b, 1, h, w)

    def forward(self, phi):
        attn = self.spatial_map(phi)
        return phi * attn, attn


class FIFB(nn.Module):
    """Feature interaction fusion block for one encoder level.

    ``phi + Cat(varphi, upsilon)`` adds the C-channel input to each half of the
    2C-channel concatenation, i.e. ``Cat(phi + varphi, phi + upsilon)``.
    """

    def __init__(self, channels: int, cfg: NetConfig, level: int = 1):
        super().__init__()
        self.cfg = cfg
        c = channels
        self.channel_attn = ChannelAttention(c, _hidden(c, cfg.channel_mlp_ratio))
        ds = cfg.attention_token_downsample if level == 1 else 1
        self.cross_attn = CrossAttention(c, c, downsample=ds)
        self.se_vi = SpatialEnhancement(c, _hidden(c, cfg.spatial_hidden_ratio))
        self.se_ir = SpatialEnhancement(c, _hidden(c, cfg.spatial_hidden_ratio))
        self.norm_ir = nn.BatchNorm2d(2 * c)
        self.norm_vi = nn.BatchNorm2d(2 * c)
        self.embed = nn.Conv2d(4 * c, c, 1)
        self.depthwise = nn.Conv2d(c, c, 3, padding=1, groups=c)
        self.refine = nn.Conv2d(c, c, 1)
        self.shortcut = nn.Conv2d(4 * c, c, 1)
        self.norm_out = nn.BatchNorm2d(c)

    def forward(self, phi_vi, phi_ir, return_intermediates: bool = False):
        inter = {}
        if self.cfg.use_cc:
            rho_vi, rho_ir, inter["cw_vi"], inter["cw_ir"] = self.channel_attn(phi_vi, phi_ir)
        else:
            rho_vi, rho_ir = phi_vi, phi_ir
        if self.cfg.use_ca:
            varphi_vi, varphi_ir, attn_vi_ir, attn_ir_vi = \
                self.cross_attn(rho_vi, rho_ir, return_maps=return_intermediates)
            if return_intermediates:
                inter.update(attn_vi_ir=attn_vi_ir, attn_ir_vi=attn_ir_vi)
        else:
            varphi_vi, varphi_ir = rho_vi, rho_ir
        if self.cfg.use_se:
            ups_vi, inter["spatial_vi"] = self.se_vi(phi_vi)
            ups_ir, inter["spatial_ir"] = self.se_ir(phi_ir)
        else:
            ups_vi, ups_ir = phi_vi, phi_ir

        stream_ir = self.norm_ir(torch.cat([phi_ir + varphi_ir, phi_ir + ups_ir], dim=1))
        stream_vi = self.norm_vi(torch.cat([phi_vi + varphi_vi, phi_vi + ups_vi], dim=1))
        embedded = torch.cat([stream_ir, stream_vi], dim=1)
        fused = self.norm_out(self.refine(F.relu(self.depthwise(self.embed(embedded))))
                              + self.shortcut(embedded))
        if return_intermediates:
            inter.update(rho_vi=rho_vi, rho_ir=rho_ir, varphi_vi=varphi_vi,
                         varphi_ir=varphi_ir, upsilon_vi=ups_vi, upsilon_ir=ups_ir,
                         embedded=embedded, fused=fused)
            return fused, inter
        return fused


class UpBlock(nn.Module):
    def __init__(self, c_in, c_skip, c_out):
        super().__init__()
        self.convs = nn.Sequential(ConvUnit(c_in + c_skip, c_out), ConvUnit(c_out, c_out))

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.convs(torch.cat([x, skip], dim=1))


class Decoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.ups = nn.ModuleList(
            UpBlock(cfg.channels(lv + 1), cfg.channels(lv), cfg.channels(lv))
            for lv in range(cfg.levels - 1, 0, -1))
        self.head = nn.Conv2d(cfg.channels(1), 1, 1)
        self.cfg = cfg

    def forward(self, fused):
        if len(fused) != self.cfg.levels:
            raise ValueError(f"expected {self.cfg.levels} fused levels, got {len(fused)}")
        for i, f in enumerate(fused):
            lv = i + 1
            if f.shape[1] != self.cfg.channels(lv):
                raise ValueError(f"level {lv}: {f.shape[1]} channels, "
                                 f"expected {self.cfg.channels(lv)}")
            if i and tuple(f.shape[-2:]) != tuple(-(-s // 2) for s in fused[i - 1].shape[-2:]):
                raise ValueError(f"level {lv}: spatial size breaks the halving schedule")
        x = fused[-1]
        for up, skip in zip(self.ups, reversed(fused[:-1])):
            x = up(x, skip)
        return torch.sigmoid(self.head(x))


class FusionNet(nn.Module):
    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        self.enc_vi = Encoder(cfg)
        self.enc_ir = Encoder(cfg)
        self.fifbs = nn.ModuleList(FIFB(cfg.channels(lv), cfg, level=lv)
                                   for lv in range(1, cfg.levels + 1))
        self.decoder = Decoder(cfg)
        init_parameters(self, seed)

    def _check(self, vi, ir):
        if vi.shape != ir.shape:
            raise DimensionMismatchError(f"vi {tuple(vi.shape)} vs ir {tuple(ir.shape)}")
        if vi.dim() != 4 or vi.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) images, got {tuple(vi.shape)}")
        factor = 2 ** self.cfg.levels
        if vi.shape[-2] % factor or vi.shape[-1] % factor:
            raise ShapeNotDivisibleError(
                f"H and W must be divisible by {factor}, got {tuple(vi.shape[-2:])}")

    def encode(self, vi, ir):
        self._check(vi, ir)
        return list(zip(self.enc_vi(vi), self.enc_ir(ir)))

    def forward(self, vi, ir):
        levels = self.encode(vi, ir)
        fused = [fifb(phi_vi, phi_ir) for fifb, (phi_vi, phi_ir) in zip(self.fifbs, levels)]
        return self.decoder(fused)

    fuse = forward


def init_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, identity BatchNorm."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                module.weight.copy_(torch.empty_like(module.weight).uniform_(
                    -bound, bound, generator=gen))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()
                module.reset_running_stats()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: FusionNet, *, step: int, config: dict | None = None,
                    optimizer=None, rng_state=None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net_config": asdict(net.cfg),
        "config": config or {},
        "step": int(step),
        "params": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
    }
    torch.save(payload, path)


def load_checkpoint(path, expected: NetConfig | None = None) -> dict:
    """Load and validate a checkpoint; rejects a differing ``expected`` config."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not an ivfuse checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    stored = NetConfig.from_dict(payload["net_config"])
    if expected is not None and stored != expected:
        raise ConfigError(f"{path}: checkpoint net config {stored} does not match {expected}")
    payload["net_config"] = stored
    return payload


def net_from_checkpoint(payload: dict, dtype=None) -> FusionNet:
    net = FusionNet(payload["net_config"])
    if dtype is not None:
        net = net.to(dtype)
    net.load_state_dict({k: v.to(dtype) if dtype is not None and v.is_floating_point() else v
                         for k, v in payload["params"].items()})
    return net
