"""Contextual feature similarity and the mask-driven contrastive loss.

Feature maps are compared as sets of feature points (one C-vector per
spatial location).  Points are matched by centered cosine distance, the
best match of every point is scored with a softmax over all candidates, and
the average score is the contextual similarity ``s`` in (0, 1].  The
distance ``CS = -log(s + lambda_cs * ||phi1 - phi2||_2)`` mixes that relative
measure with an absolute Euclidean one.

The contrastive loss pulls each masked fused image (anchor) towards the
source that should dominate under that mask (positive) and pushes it away
from the other source (negatives, drawn from every group in the batch).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch

from .backbone import extract
from .errors import ConfigError, DimensionMismatchError

EPS = 1e-8
TERM_ORDER = ("unique_vi", "unique_ir", "shared_vi", "shared_ir", "background")
# partition channel order: shared, unique_vi, unique_ir, background
_PARTITION_INDEX = {"shared": 0, "unique_vi": 1, "unique_ir": 2, "background": 3}


@dataclass(frozen=True)
class ContrastiveConfig:
    omega1: float = 0.5
    omega2: float = 0.5
    lambda_cs: float = 0.5
    deep_layers: tuple = (4, 5)
    bg_layer: int = 1
    distance: str = "contextual"  # or "euclidean"
    epsilon: float = EPS
    group_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "deep_layers", tuple(int(x) for x in self.deep_layers))
        if abs(self.omega1 + self.omega2 - 1.0) > 1e-9:
            raise ConfigError("omega1 + omega2 must equal 1")
        if self.lambda_cs < 0 or self.epsilon <= 0:
            raise ConfigError("lambda_cs must be >= 0 and epsilon > 0")
        if self.distance not in ("contextual", "euclidean"):
            raise ConfigError(f"unknown distance {self.distance!r}")
        if not self.deep_layers or not all(1 <= i <= 5 for i in self.deep_layers):
            raise ConfigError("deep_layers must be a non-empty subset of 1..5")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ContrastiveConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown contrastive config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# contextual similarity


def to_point_set(feature_map: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) -> (..., H*W, C), row-major over (H, W)."""
    return feature_map.flatten(-2).transpose(-1, -2)


def _safe_norm(x, eps):
    return torch.linalg.vector_norm(x, dim=-1).clamp_min(eps)


def similarity_matrix(gamma: torch.Tensor, psi: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Centered cosine distances ``S`` of shape (..., N, M), entries in [0, 2].

    Both point sets are centered on the mean of ``psi``; vector norms are
    clamped below at ``eps`` so a degenerate ``psi`` gives ``S = 1``.
    """
    mu = psi.mean(dim=-2, keepdim=True)
    g, p = gamma - mu, psi - mu
    cos = (g @ p.transpose(-1, -2)) / (_safe_norm(g, eps)[..., :, None]
                                       * _safe_norm(p, eps)[..., None, :])
    return 1.0 - cos


def point_similarity(S: torch.Tensor) -> torch.Tensor:
    """``s_i = max_k softmax_k(1 - S_ik)`` for every row of ``S``."""
    return torch.softmax(1.0 - S, dim=-1).amax(dim=-1)


def contextual_feature_similarity(phi1, phi2, eps: float = EPS) -> torch.Tensor:
    """Mean best-match score of ``phi1``'s points against ``phi2``'s; in (0, 1].

    Accepts (C, H, W) or batched (B, C, H, W) maps; returns one value per item.
    """
    S = similarity_matrix(to_point_set(phi1), to_point_set(phi2), eps)
    return point_similarity(S).mean(dim=-1)


def euclidean_distance(phi1, phi2) -> torch.Tensor:
    """||phi1 - phi2||_2 over everything but the batch axis (if any)."""
    diff = phi1 - phi2
    if diff.dim() == 3:
        return torch.linalg.vector_norm(diff)
    return torch.linalg.vector_norm(diff.flatten(1), dim=1)


def contextual_cs(phi1, phi2, lambda_cs: float = 0.5, eps: float = EPS) -> torch.Tensor:
    s = contextual_feature_similarity(phi1, phi2, eps)
    arg = s + lambda_cs * euclidean_distance(phi1, phi2) + eps
    return -torch.log(arg.clamp_min(eps))


# ---------------------------------------------------------------------------
# sample distances


def distance_from_features(feats_a, feats_b, cfg: ContrastiveConfig) -> torch.Tensor:
    """Object distance D between two precomputed pyramids, summed over ``deep_layers``."""
    total = 0.0
    for layer in cfg.deep_layers:
        fa, fb = feats_a[layer - 1], feats_b[layer - 1]
        if cfg.distance == "contextual":
            total = total + contextual_cs(fa, fb, cfg.lambda_cs, cfg.epsilon)
        else:
            total = total + euclidean_distance(fa, fb)
    return total


def bg_distance_from_features(feats_a, feats_b, cfg: ContrastiveConfig) -> torch.Tensor:
    return euclidean_distance(feats_a[cfg.bg_layer - 1], feats_b[cfg.bg_layer - 1])


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def distance_D(img_a, img_b, backbone, cfg: ContrastiveConfig | None = None) -> torch.Tensor:
    cfg = cfg or ContrastiveConfig()
    _check_pair(img_a, img_b)
    return distance_from_features(extract(img_a, backbone), extract(img_b, backbone), cfg)


def distance_Dbg(img_a, img_b, backbone, cfg: ContrastiveConfig | None = None) -> torch.Tensor:
    cfg = cfg or ContrastiveConfig()
    _check_pair(img_a, img_b)
    return bg_distance_from_features(extract(img_a, backbone), extract(img_b, backbone), cfg)


# ---------------------------------------------------------------------------
# samples


@dataclass
class FilterSamples:
    """Samples for one contrastive term.

    ``anchor`` and ``positive`` are (n, 1, H, W) group-1 tensors;
    ``negatives`` is (b, n, 1, H, W); ``active`` flags the group-1 items
    whose mask is non-empty.
    """

    anchor: torch.Tensor
    positive: torch.Tensor
    negatives: torch.Tensor
    active: torch.Tensor
    weight: float = 1.0
    background: bool = False


@dataclass
class ContrastiveSampleSet:
    group_size: int
    num_groups: int
    terms: dict = field(default_factory=dict)  # name -> FilterSamples, TERM_ORDER


def build_sample_set(fused, vi, ir, partitions, group_size: int,
                     cfg: ContrastiveConfig | None = None) -> ContrastiveSampleSet:
    """Mask images into anchor/positive/negative samples.

    ``partitions`` is (B, 4, H, W) in (shared, unique_vi, unique_ir,
    background) order.  The batch is split into ``b = B / n`` groups of
    ``n``; group 1 supplies anchors and positives, every group supplies one
    negative per term, masked with that group's own masks.  The shared mask
    yields two terms: visible positive with infrared negatives (weight
    omega1) and the reverse (weight omega2).
    """
    cfg = cfg or ContrastiveConfig(group_size=group_size)
    B = fused.shape[0]
    if group_size < 1 or B % group_size:
        raise ConfigError(f"batch size {B} not divisible by group size {group_size}")
    for t in (vi, ir):
        _check_pair(fused, t)
    if partitions.shape[0] != B or partitions.shape[-2:] != fused.shape[-2:]:
        raise DimensionMismatchError(
            f"partitions {tuple(partitions.shape)} vs images {tuple(fused.shape)}")
    n, b = group_size, B // group_size
    masks = partitions.to(fused.dtype)

    def grouped(x):
        return x.reshape(b, n, *x.shape[1:])

    spec = {
        # term: (mask, positive source, negative source, weight)
        "unique_vi": ("unique_vi", vi, ir, 1.0),
        "unique_ir": ("unique_ir", ir, vi, 1.0),
        "shared_vi": ("shared", vi, ir, cfg.omega1),
        "shared_ir": ("shared", ir, vi, cfg.omega2),
        "background": ("background", vi, ir, 1.0),
    }
    terms = {}
    for name in TERM_ORDER:
        mask_name, pos_src, neg_src, weight = spec[name]
        m = masks[:, _PARTITION_INDEX[mask_name]:_PARTITION_INDEX[mask_name] + 1]
        terms[name] = FilterSamples(
            anchor=(fused * m)[:n],
            positive=(pos_src * m)[:n],
            negatives=grouped(neg_src * m),
            active=m[:n].flatten(1).amax(dim=1) > 0,
            weight=weight,
            background=name == "background",
        )
    return ContrastiveSampleSet(group_size=n, num_groups=b, terms=terms)


def _guard(x, eps):
    # sign-preserving: |x| >= eps
    sign = torch.where(x < 0, -torch.ones_like(x), torch.ones_like(x))
    return sign * x.abs().clamp_min(eps)


def contrastive_loss(samples: ContrastiveSampleSet, cfg: ContrastiveConfig, backbone):
    """Return ``(L_con, components)``.

    Each term is, per active group-1 item, ``D(anchor, positive) /
    sum_j D(anchor, negative_j)`` averaged over active items (zero when no
    item is active).  ``components`` holds ``L_unique``, ``L_share``,
    ``L_bg``, ``L_con`` and the per-term values.
    """
    n, b = samples.group_size, samples.num_groups
    # one backbone pass over every sample
    chunks = []
    for name in TERM_ORDER:
        t = samples.terms[name]
        chunks += [t.anchor, t.positive, t.negatives.reshape(b * n, *t.negatives.shape[2:])]
    feats = extract(torch.cat(chunks, dim=0), backbone)
    per_term = (2 + b) * n

    components = {}
    for k, name in enumerate(TERM_ORDER):
        t = samples.terms[name]
        sl = [f[k * per_term:(k + 1) * per_term] for f in feats]
        anchor = [f[:n] for f in sl]
        positive = [f[n:2 * n] for f in sl]
        dist = bg_distance_from_features if t.background else distance_from_features
        pos = dist(anchor, positive, cfg)
        neg = 0.0
        for j in range(b):
            negative = [f[(2 + j) * n:(3 + j) * n] for f in sl]
            neg = neg + dist(anchor, negative, cfg)
        ratio = pos / _guard(neg, cfg.epsilon)
        ratio = torch.where(t.active, ratio, torch.zeros_like(ratio))
        value = ratio.sum() / t.active.sum().clamp_min(1).to(ratio.dtype)
        components[name] = t.weight * value

    out = {
        "L_unique": components["unique_vi"] + components["unique_ir"],
        "L_share": components["shared_vi"] + components["shared_ir"],
        "L_bg": components["background"],
    }
    out["L_con"] = out["L_unique"] + out["L_share"] + out["L_bg"]
    out.update({f"term_{k}": v for k, v in components.items()})
    return out["L_con"], out
