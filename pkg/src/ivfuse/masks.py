"""Salient-object masks: providers, persistence, and the four-way partition.

A modality mask marks the salient objects found in one source image.  Two
modality masks (visible, infrared) are decomposed into four disjoint masks:
the region both modalities agree on, the two modality-unique regions, and
the background.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigError,
    DimensionMismatchError,
    MalformedMaskError,
    RemoteUnreachableError,
)

log = logging.getLogger(__name__)

PROVIDER_KINDS = ("external-lvm", "file", "synthetic")
DEFAULT_PROMPT = "The scene captures a group of pedestrians or cars."
BINARIZE_THRESHOLD = 128
MODALITIES = ("vi", "ir")


@dataclass(frozen=True)
class MaskPartition:
    shared: np.ndarray
    unique_vi: np.ndarray
    unique_ir: np.ndarray
    background: np.ndarray

    FIELDS = ("shared", "unique_vi", "unique_ir", "background")

    def stack(self) -> np.ndarray:
        """Return the masks as a (4, H, W) array in FIELDS order."""
        return np.stack([getattr(self, k) for k in self.FIELDS])

    @classmethod
    def from_stack(cls, arr) -> "MaskPartition":
        return cls(*(np.asarray(arr[i]) for i in range(4)))

    def crop(self, top: int, left: int, size: int) -> "MaskPartition":
        return MaskPartition(*(getattr(self, k)[top:top + size, left:left + size]
                               for k in self.FIELDS))


@dataclass(frozen=True)
class MaskProviderSpec:
    """How to obtain a modality mask.

    ``kind`` selects the provider.  ``external-lvm`` needs ``endpoint`` and a
    non-empty ``prompt``; ``file`` needs ``path``; ``synthetic`` uses ``seed``.
    """

    kind: str
    prompt: str | None = None
    endpoint: str | None = None
    path: str | None = None
    seed: int = 0
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ConfigError(f"unknown mask provider kind {self.kind!r}")
        if self.kind == "external-lvm":
            if not self.prompt or not self.prompt.strip():
                raise ConfigError("external-lvm provider requires a non-empty prompt")
            if not self.endpoint:
                raise ConfigError("external-lvm provider requires an endpoint")
        if self.kind == "file" and not self.path:
            raise ConfigError("file provider requires a path")
        if self.retries < 0 or self.max_in_flight < 1:
            raise ConfigError("retries must be >= 0 and max_in_flight >= 1")


def _check_same_shape(*arrays):
    shapes = {tuple(np.shape(a)) for a in arrays}
    if len(shapes) != 1:
        raise DimensionMismatchError(f"shape mismatch: {sorted(shapes)}")


def decompose_masks(m_vi, m_ir) -> MaskPartition:
    m_vi = np.asarray(m_vi, dtype=np.uint8)
    m_ir = np.asarray(m_ir, dtype=np.uint8)
    _check_same_shape(m_vi, m_ir)
    shared = m_vi * m_ir
    unique_vi = m_vi - shared
    unique_ir = m_ir - shared
    background = 1 - shared - unique_vi - unique_ir
    return MaskPartition(shared, unique_vi, unique_ir, background)


def apply_mask(image, mask):
    """Hadamard product of an image with a binary mask.

    Works for numpy arrays and torch tensors.  Leading batch/channel axes of
    ``image`` broadcast against ``mask``; the trailing (H, W) must match.
    """
    if tuple(np.shape(image))[-2:] != tuple(np.shape(mask))[-2:]:
        raise DimensionMismatchError(
            f"image {tuple(np.shape(image))} vs mask {tuple(np.shape(mask))}")
    if isinstance(image, np.ndarray):
        return image * np.asarray(mask, dtype=image.dtype)
    return image * mask.to(image.dtype)


def binarize(values) -> np.ndarray:
    return (np.asarray(values) >= BINARIZE_THRESHOLD).astype(np.uint8)


# ---------------------------------------------------------------------------
# persistence


def mask_filename(stem: str, modality: str) -> str:
    return f"{stem}.{modality}.mask.png"


def save_mask(mask, path) -> None:
    arr = (np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    """Read an 8-bit single-channel mask file and binarize it at 128."""
    try:
        with Image.open(path) as im:
            if im.mode == "1":
                im = im.convert("L")
            if im.mode != "L":
                raise MalformedMaskError(
                    f"{path}: expected single-channel 8-bit mask, got mode {im.mode}")
            values = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise MalformedMaskError(f"{path}: {exc}") from exc
    return binarize(values)


def write_sidecar(path, *, image: str, prompt: str | None, instance_count: int,
                  provider: str) -> None:
    record = {"image": image, "prompt": prompt, "instance_count": int(instance_count),
              "provider": provider}
    Path(path).write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# providers


def synthetic_mask(height: int, width: int, seed: int) -> np.ndarray:
    """Seeded arrangement of 1-4 filled rectangles and ellipses."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((height, width), dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(1, 5))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry = rng.uniform(0.05, 0.25) * height + 0.5
        rx = rng.uniform(0.05, 0.25) * width + 0.5
        if rng.random() < 0.5:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        mask[inside] = 1
    return mask


def _image_hw(image) -> tuple[int, int]:
    shape = np.shape(image)
    if len(shape) < 2:
        raise DimensionMismatchError(f"not a raster: shape {shape}")
    return (shape[0], shape[1]) if len(shape) == 3 and shape[2] in (1, 3) else shape[-2:]


def generate_modal_mask_with_count(image, provider: MaskProviderSpec,
                                   client: "LVMClient | None" = None):
    """Like :func:`generate_modal_mask` but also returns the instance count."""
    h, w = _image_hw(image)
    if provider.kind == "synthetic":
        mask = synthetic_mask(h, w, provider.seed)
        return mask, int(mask.any())
    if provider.kind == "file":
        mask = read_mask_png(provider.path)
        if mask.shape != (h, w):
            raise DimensionMismatchError(
                f"{provider.path}: mask {mask.shape} vs image {(h, w)}")
        return mask, int(mask.any())
    client = client or LVMClient.from_spec(provider)
    instances = client.segment(image, provider.prompt)
    mask = np.zeros((h, w), dtype=np.uint8)
    for inst in instances:
        if inst.shape != (h, w):
            raise DimensionMismatchError(f"instance mask {inst.shape} vs image {(h, w)}")
        mask |= inst
    return mask, len(instances)


def generate_modal_mask(image, provider: MaskProviderSpec) -> np.ndarray:
    return generate_modal_mask_with_count(image, provider)[0]


# ---------------------------------------------------------------------------
# external segmentation service


def _png_b64(array) -> str:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_instance(payload: str) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(base64.b64decode(payload))) as im:
            return binarize(np.asarray(im.convert("L")))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise MalformedMaskError(f"undecodable instance mask: {exc}") from exc


class LVMClient:
    """HTTP client for a remote text-prompted detection + segmentation service.

    Protocol: ``POST <endpoint>`` with JSON ``{"image": <base64 PNG>,
    "prompt": <str>}``; the reply is ``{"masks": [<base64 PNG>, ...]}``, one
    single-channel PNG per detected instance.  Each request opens its own
    connection, and a semaphore bounds the number of requests in flight.
    """

    def __init__(self, endpoint: str, *, timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.5, max_in_flight: int = 4):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)

    @classmethod
    def from_spec(cls, spec: MaskProviderSpec) -> "LVMClient":
        return cls(spec.endpoint, timeout=spec.timeout, retries=spec.retries,
                   backoff=spec.backoff, max_in_flight=spec.max_in_flight)

    def _post(self, body: bytes) -> dict:
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        with self._slots, urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def segment(self, image, prompt: str) -> list[np.ndarray]:
        body = json.dumps({"image": _png_b64(image), "prompt": prompt}).encode("utf-8")
        last_exc = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                reply = self._post(body)
                break
            except (urllib.error.URLError, OSError, TimeoutError) as exc:
                last_exc = exc
                log.warning("segmentation request failed (attempt %d): %s", attempt + 1, exc)
            except json.JSONDecodeError as exc:
                raise MalformedMaskError(f"non-JSON reply from {self.endpoint}") from exc
        else:
            raise RemoteUnreachableError(
                f"{self.endpoint} unreachable after {self.retries + 1} attempts: {last_exc}")
        masks = reply.get("masks") if isinstance(reply, dict) else None
        if not isinstance(masks, list):
            raise MalformedMaskError("reply lacks a 'masks' list")
        return [_decode_instance(m) for m in masks]
