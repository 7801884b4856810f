"""Pixel-level objectives and the total training loss.

All functions take (B, 1, H, W) tensors in [0, 1] and return the batch mean
of per-image values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .contextual import ContrastiveConfig, build_sample_set, contrastive_loss
from .errors import ConfigError, DimensionMismatchError, ImageTooSmallError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


@dataclass(frozen=True)
class LossWeights:
    lambda_int: float = 10.0
    lambda_tex: float = 1.0
    lambda_con: float = 10.0

    def __post_init__(self):
        if min(self.lambda_int, self.lambda_tex, self.lambda_con) < 0:
            raise ConfigError("loss weights must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    """Every loss term of one step.  Terms a variant does not use stay None."""

    L_total: float
    L_ssim: float
    L_texture: float
    L_pixel: float
    L_int: float | None = None
    L_con: float | None = None
    L_unique: float | None = None
    L_share: float | None = None
    L_bg: float | None = None
    L_abl: float | None = None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) is not None}


def _check(*xs):
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise DimensionMismatchError(f"shape mismatch: {sorted(shapes)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float32):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x, y) -> torch.Tensor:
    """Per-image mean SSIM over valid 11x11 Gaussian windows; shape (B,)."""
    _check(x, y)
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ImageTooSmallError(f"SSIM needs >= {SSIM_WINDOW}px, got {tuple(x.shape[-2:])}")
    w = gaussian_window(dtype=x.dtype).to(x.device)[None, None]

    def filt(t):
        return F.conv2d(t, w)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).flatten(1).mean(dim=1)


def ssim_loss(f, vi, ir):
    return (2.0 - ssim(f, vi) - ssim(f, ir)).mean()


def saliency_mask(vi, ir):
    """1 where the infrared pixel is strictly brighter than the visible one."""
    _check(vi, ir)
    return (ir > vi).to(vi.dtype)


def intensity_loss(f, vi, ir, M=None):
    _check(f, vi, ir)
    if M is None:
        M = saliency_mask(vi, ir)
    per_pixel = (f - vi) ** 2 + M * (f - ir).abs()
    return per_pixel.flatten(1).mean(dim=1).mean()


def sobel_magnitude(x):
    """|Gx * x| + |Gy * x| with replicate padding."""
    if min(x.shape[-2:]) < 3:
        raise ImageTooSmallError(f"Sobel needs >= 3px, got {tuple(x.shape[-2:])}")
    gx = torch.tensor(SOBEL_X, dtype=x.dtype, device=x.device)
    kernels = torch.stack([gx, gx.T])[:, None]
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    # conv2d is cross-correlation; flipping gives true convolution, the sign
    # change is irrelevant under the absolute value
    grads = F.conv2d(padded, kernels)
    return grads.abs().sum(dim=1, keepdim=True)


def texture_loss(f, vi, ir):
    _check(f, vi, ir)
    target = torch.maximum(sobel_magnitude(vi), sobel_magnitude(ir))
    return (sobel_magnitude(f) - target).abs().flatten(1).mean(dim=1).mean()


def pixel_loss(f, vi, ir, w: LossWeights | None = None):
    w = w or LossWeights()
    return (ssim_loss(f, vi, ir) + w.lambda_int * intensity_loss(f, vi, ir)
            + w.lambda_tex * texture_loss(f, vi, ir))


def ablation_mask_loss(f, vi, ir, partitions, cfg: ContrastiveConfig | None = None,
                       literal: bool = False):
    """Mask-gated intensity loss used in place of the contrastive and intensity terms.

    ``omega1 ||(f - vi) u_vi|| + omega2 ||(f - src) u_ir|| + ||(f - vi) bg||`` with
    ``src = ir`` (``literal=True`` uses ``vi`` for the infrared term as well).
    """
    cfg = cfg or ContrastiveConfig()
    _check(f, vi, ir)
    m = partitions.to(f.dtype)
    u_vi, u_ir, bg = m[:, 1:2], m[:, 2:3], m[:, 3:4]
    src_ir = vi if literal else ir

    def norm(x):
        return torch.linalg.vector_norm(x.flatten(1), dim=1)

    per_item = (cfg.omega1 * norm((f - vi) * u_vi) + cfg.omega2 * norm((f - src_ir) * u_ir)
                + norm((f - vi) * bg))
    return per_item.mean()


def total_loss(f, vi, ir, partitions, backbone, *, weights: LossWeights | None = None,
               contrastive: ContrastiveConfig | None = None, mask_ablation: bool = False,
               literal_ablation: bool = False):
    """Return ``(L_total, LossReport)`` with the report holding python floats.

    ``mask_ablation`` replaces the intensity and contrastive terms with
    :func:`ablation_mask_loss`.
    """
    w = weights or LossWeights()
    cfg = contrastive or ContrastiveConfig()
    l_ssim = ssim_loss(f, vi, ir)
    l_tex = texture_loss(f, vi, ir)
    if mask_ablation:
        l_abl = ablation_mask_loss(f, vi, ir, partitions, cfg, literal=literal_ablation)
        l_pixel = l_ssim + w.lambda_tex * l_tex
        total = l_pixel + l_abl
        report = LossReport(L_total=float(total.detach()), L_ssim=float(l_ssim.detach()),
                            L_texture=float(l_tex.detach()), L_pixel=float(l_pixel.detach()),
                            L_abl=float(l_abl.detach()))
        return total, report

    l_int = intensity_loss(f, vi, ir)
    l_pixel = l_ssim + w.lambda_int * l_int + w.lambda_tex * l_tex
    if w.lambda_con:
        samples = build_sample_set(f, vi, ir, partitions, cfg.group_size, cfg)
        l_con, comp = contrastive_loss(samples, cfg, backbone)
    else:
        zero = f.new_zeros(())
        l_con, comp = zero, {"L_unique": zero, "L_share": zero, "L_bg": zero}
    total = l_pixel + w.lambda_con * l_con
    values = {"L_total": total, "L_ssim": l_ssim, "L_texture": l_tex, "L_pixel": l_pixel,
              "L_int": l_int, "L_con": l_con, "L_unique": comp["L_unique"],
              "L_share": comp["L_share"], "L_bg": comp["L_bg"]}
    report = LossReport(**{k: float(v.detach()) for k, v in values.items()})
    return total, report
