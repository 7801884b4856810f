"""Procedural registered infrared/visible pairs with matching salient masks.

Each scene has a textured visible background and a cool, smooth infrared
background.  Objects from the visible mask are drawn as high-contrast
texture in the visible image; objects from the infrared mask are drawn hot
in the infrared image and dimmed in the visible one.  The masks are the
synthetic-provider masks for the same seed, so ``gen-masks --provider
synthetic`` with that seed reproduces them.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Record, save_image, write_manifest
from .masks import mask_filename, save_mask, synthetic_mask
from .seeding import derive_seed, record_mask_seed


def render_pair(m_vi, m_ir, seed: int):
    """Return ``(vi_rgb (H, W, 3), ir (H, W))`` in [0, 1] for the given masks."""
    rng = np.random.default_rng(seed)
    h, w = m_vi.shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    fx, fy, phase = rng.uniform(4, 12), rng.uniform(4, 12), rng.uniform(0, 2 * np.pi)
    vi = (0.45 + 0.15 * np.sin(2 * np.pi * fx * xx + phase) * np.cos(2 * np.pi * fy * yy)
          + 0.1 * (yy - 0.5) + 0.03 * rng.standard_normal((h, w)))
    ir = 0.2 + 0.1 * xx + 0.02 * rng.standard_normal((h, w))

    checker = ((np.floor(yy * h / 3) + np.floor(xx * w / 3)) % 2).astype(float)
    obj_vi = 0.2 + 0.6 * checker + 0.03 * rng.standard_normal((h, w))
    vi = np.where(m_vi == 1, obj_vi, vi)
    vi = np.where((m_ir == 1) & (m_vi == 0), 0.6 * vi, vi)
    hot = rng.uniform(0.8, 0.95) + 0.02 * rng.standard_normal((h, w))
    ir = np.where(m_ir == 1, hot, ir)

    vi = np.clip(vi, 0.0, 1.0)
    tint = rng.uniform(0.85, 1.0, size=3)
    vi_rgb = np.clip(vi[..., None] * tint, 0.0, 1.0)
    return vi_rgb, np.clip(ir, 0.0, 1.0)


def make_synthetic_dataset(out_dir, n_pairs: int = 16, size: int = 64, seed: int = 0,
                           with_masks: bool = True) -> Path:
    """Write ``n_pairs`` scenes plus a manifest under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("vi", "ir", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_pairs):
        stem = f"{i:04d}"
        m_vi = synthetic_mask(size, size, record_mask_seed(seed, stem, "vi"))
        m_ir = synthetic_mask(size, size, record_mask_seed(seed, stem, "ir"))
        vi, ir = render_pair(m_vi, m_ir, derive_seed(seed, f"scene:{stem}"))
        save_image(vi, out / "vi" / f"{stem}.png")
        save_image(ir, out / "ir" / f"{stem}.png")
        rec = Record(vi_path=f"vi/{stem}.png", ir_path=f"ir/{stem}.png", base_dir=str(out))
        if with_masks:
            for mod, m in (("vi", m_vi), ("ir", m_ir)):
                save_mask(m, out / "masks" / mask_filename(stem, mod))
            rec.mask_vi_path = f"masks/{mask_filename(stem, 'vi')}"
            rec.mask_ir_path = f"masks/{mask_filename(stem, 'ir')}"
        records.append(rec)
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
