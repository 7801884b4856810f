"""Dataset manifests, image loading, patch sampling and batching.

A manifest is a JSON-lines file, one record per registered image pair::

    {"vi_path": "vi/0001.png", "ir_path": "ir/0001.png",
     "mask_vi_path": "masks/0001.vi.mask.png", "mask_ir_path": "masks/0001.ir.mask.png",
     "split": "train"}

Relative paths are resolved against the manifest's directory.  Visible
images are split into luminance (the working channel) and chroma (kept for
re-colouring the fused output) with the full-range BT.601 transform.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError, DimensionMismatchError, ImageTooSmallError
from .masks import MaskPartition, decompose_masks, read_mask_png
from .seeding import derive_seed

_RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735891647856, -0.331264108352144, 0.5],
    [0.5, -0.418687589158345, -0.081312410841655],
])
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


# ---------------------------------------------------------------------------
# colour


def rgb_to_ycbcr(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ _RGB_TO_YCBCR.T + _CHROMA_OFFSET


def ycbcr_to_rgb(ycc):
    ycc = np.asarray(ycc, dtype=np.float64)
    return (ycc - _CHROMA_OFFSET) @ _YCBCR_TO_RGB.T


def merge_chroma(y, chroma):
    """Recombine luminance (H, W) with retained chroma (H, W, 2) into RGB in [0, 1]."""
    ycc = np.concatenate([np.asarray(y, dtype=np.float64)[..., None], chroma], axis=-1)
    return np.clip(ycbcr_to_rgb(ycc), 0.0, 1.0)


# ---------------------------------------------------------------------------
# io


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG as float64 in [0, 1]; (H, W) or (H, W, 3)."""
    try:
        with Image.open(path) as im:
            if im.mode in ("P", "RGBA", "LA", "CMYK"):
                im = im.convert("RGB" if im.mode != "LA" else "L")
            if im.mode not in ("L", "RGB"):
                raise DataError(f"{path}: unsupported image mode {im.mode}")
            arr = np.asarray(im, dtype=np.float64)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return arr / 255.0


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(img, path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


@dataclass
class Record:
    vi_path: str
    ir_path: str
    mask_vi_path: str | None = None
    mask_ir_path: str | None = None
    split: str = "train"
    base_dir: str = field(default=".", repr=False, compare=False)

    @property
    def stem(self) -> str:
        return Path(self.vi_path).stem

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def read_manifest(path) -> list[Record]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            records.append(Record(**raw, base_dir=str(path.parent)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
    return records


def write_manifest(path, records) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records),
                   encoding="utf-8")
    tmp.replace(path)


def load_pair(record: Record):
    """Return ``(vi_y, ir, chroma)``; chroma is (H, W, 2) Cb/Cr of the visible image."""
    vi = load_image(record.resolve(record.vi_path))
    ir = load_image(record.resolve(record.ir_path))
    if vi.ndim == 3:
        ycc = rgb_to_ycbcr(vi)
        vi_y, chroma = ycc[..., 0], ycc[..., 1:]
    else:
        vi_y, chroma = vi, np.full(vi.shape + (2,), 0.5)
    if ir.ndim == 3:
        ir = rgb_to_ycbcr(ir)[..., 0]
    if vi_y.shape != ir.shape:
        raise DimensionMismatchError(f"{record.stem}: vi {vi_y.shape} vs ir {ir.shape}")
    return vi_y, ir, chroma


def load_partition(record: Record, shape) -> MaskPartition:
    if not record.mask_vi_path or not record.mask_ir_path:
        raise DataError(f"{record.stem}: record has no mask paths (run gen-masks first)")
    m_vi = read_mask_png(record.resolve(record.mask_vi_path))
    m_ir = read_mask_png(record.resolve(record.mask_ir_path))
    for m in (m_vi, m_ir):
        if m.shape != tuple(shape):
            raise DimensionMismatchError(f"{record.stem}: mask {m.shape} vs image {shape}")
    return decompose_masks(m_vi, m_ir)


@dataclass
class LoadedRecord:
    stem: str
    vi: np.ndarray
    ir: np.ndarray
    partition: MaskPartition


class Dataset:
    """Records of one manifest, loaded on first access and cached."""

    def __init__(self, records, split: str | None = "train"):
        self.records = [r for r in records if split is None or r.split == split]
        self._cache: dict[int, LoadedRecord] = {}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx) -> LoadedRecord:
        if idx not in self._cache:
            rec = self.records[idx]
            vi, ir, _ = load_pair(rec)
            self._cache[idx] = LoadedRecord(rec.stem, vi, ir, load_partition(rec, vi.shape))
        return self._cache[idx]


# ---------------------------------------------------------------------------
# patches and batches


@dataclass
class TrainPatch:
    vi: np.ndarray
    ir: np.ndarray
    partition: MaskPartition
    top: int
    left: int
    coverage: float
    attempts: int


def sample_patch(item: LoadedRecord, rng: np.random.Generator, patch_size: int = 256,
                 min_salient_fraction: float = 0.01, max_retries: int = 16) -> TrainPatch:
    """Random window covering enough salient pixels.

    Draws up to ``1 + max_retries`` windows and accepts the first whose
    salient (non-background) fraction reaches ``min_salient_fraction``;
    otherwise returns the best window seen.  All rasters share the window.
    """
    h, w = item.vi.shape
    if h < patch_size or w < patch_size:
        raise ImageTooSmallError(f"{item.stem}: {h}x{w} smaller than patch {patch_size}")
    bg = item.partition.background
    best = None
    for attempt in range(1, max_retries + 2):
        top = int(rng.integers(0, h - patch_size + 1))
        left = int(rng.integers(0, w - patch_size + 1))
        coverage = 1.0 - float(bg[top:top + patch_size, left:left + patch_size].mean())
        if best is None or coverage > best[0]:
            best = (coverage, top, left)
        if coverage >= min_salient_fraction:
            break
    coverage, top, left = best
    sl = np.s_[top:top + patch_size, left:left + patch_size]
    return TrainPatch(item.vi[sl], item.ir[sl], item.partition.crop(top, left, patch_size),
                      top, left, coverage, attempt)


@dataclass
class Batch:
    vi: np.ndarray  # (B, 1, P, P)
    ir: np.ndarray
    partitions: np.ndarray  # (B, 4, P, P) uint8
    stems: list
    group_size: int
    epoch: int
    index: int

    @property
    def num_groups(self) -> int:
        return len(self.stems) // self.group_size

    def tensors(self, dtype=torch.float32):
        return (torch.as_tensor(self.vi, dtype=dtype), torch.as_tensor(self.ir, dtype=dtype),
                torch.as_tensor(self.partitions))


def batches_per_epoch(n_records: int, batch_size: int) -> int:
    return n_records // batch_size


def epoch_order(n_records: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([derive_seed(seed, "shuffle"), epoch]).permutation(n_records)


def make_batch(dataset: Dataset, batch_size: int, n: int, seed: int, epoch: int, index: int,
               *, patch_size: int = 256, min_salient_fraction: float = 0.01,
               max_retries: int = 16) -> Batch:
    """Batch ``index`` of ``epoch``; a pure function of its arguments."""
    if n < 1 or batch_size % n:
        raise ConfigError(f"batch_size {batch_size} not divisible by group size {n}")
    order = epoch_order(len(dataset), seed, epoch)
    idx = order[index * batch_size:(index + 1) * batch_size]
    if len(idx) < batch_size:
        raise ConfigError(f"batch {index} of epoch {epoch} is incomplete")
    rng = np.random.default_rng([derive_seed(seed, "crop"), epoch, index])
    patches = [sample_patch(dataset[int(i)], rng, patch_size, min_salient_fraction, max_retries)
               for i in idx]
    return Batch(
        vi=np.stack([p.vi for p in patches])[:, None],
        ir=np.stack([p.ir for p in patches])[:, None],
        partitions=np.stack([p.partition.stack() for p in patches]),
        stems=[dataset[int(i)].stem for i in idx],
        group_size=n, epoch=epoch, index=index,
    )


def make_batches(dataset: Dataset, batch_size: int, n: int, seed: int, *, start_step: int = 0,
                 **patch_kw):
    """Endless stream of batches; epochs are reshuffled, the ragged tail dropped.

    Batch ``k`` of the stream depends only on ``(seed, k)``, so a resumed run
    continues exactly where it stopped.
    """
    if n < 1 or batch_size % n:
        raise ConfigError(f"batch_size {batch_size} not divisible by group size {n}")
    per_epoch = batches_per_epoch(len(dataset), batch_size)
    if per_epoch == 0:
        raise ConfigError(f"dataset of {len(dataset)} records is smaller than batch {batch_size}")
    step = start_step
    while True:
        epoch, index = divmod(step, per_epoch)
        yield make_batch(dataset, batch_size, n, seed, epoch, index, **patch_kw)
        step += 1
