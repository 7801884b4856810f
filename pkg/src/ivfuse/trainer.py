"""Training loop, configuration, checkpoint/resume and ablation runs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import torch
import yaml

from .backbone import load_backbone
from .contextual import ContrastiveConfig
from .data import Dataset, batches_per_epoch, make_batches, read_manifest
from .errors import ConfigError, NumericalError, IvfuseError
from .fusion_net import FusionNet, NetConfig, load_checkpoint, save_checkpoint
from .pixel_losses import LossReport, LossWeights, total_loss
from .seeding import derive_seed

log = logging.getLogger(__name__)

ABLATIONS = ("full", "model1", "model2", "model3", "model4", "model5",
             "no_se", "no_cc", "no_ca")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}
LOG_NAME = "train_log.jsonl"
CKPT_DIR = "checkpoints"


@dataclass
class TrainConfig:
    steps: int | None = None
    learning_rate: float = 1e-4
    batch_size: int = 12
    group_n: int = 3
    patch_size: int = 256
    seed: int = 0
    ablation: str = "full"
    checkpoint_every: int = 100
    grad_clip: float | None = None
    dtype: str = "float32"
    backbone_weights: str | None = None
    min_salient_fraction: float = 0.01
    max_retries: int = 16
    literal_ablation_loss: bool = False
    net: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.group_n < 1 or self.batch_size % self.group_n:
            raise ConfigError(f"batch_size {self.batch_size} not divisible by "
                              f"group_n {self.group_n}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.patch_size % 16:
            raise ConfigError("patch_size must be divisible by 16")

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contrastive"]["deep_layers"] = list(d["contrastive"]["deep_layers"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "net" in d:
                d["net"] = NetConfig.from_dict(d["net"] or {})
            if "weights" in d:
                d["weights"] = LossWeights.from_dict(d["weights"] or {})
            if "contrastive" in d:
                d["contrastive"] = ContrastiveConfig.from_dict(d["contrastive"] or {})
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Read a YAML config file (nested key/value) and apply top-level overrides."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(raw)


@dataclass(frozen=True)
class Variant:
    net: NetConfig
    contrastive: ContrastiveConfig
    mask_ablation: bool


def resolve_variant(cfg: TrainConfig) -> Variant:
    """Map the ``ablation`` switch onto network and loss settings."""
    net, con = cfg.net, replace(cfg.contrastive, group_size=cfg.group_n)
    mask_ablation = False
    name = cfg.ablation
    if name == "model1":
        con = replace(con, distance="euclidean", deep_layers=(4, 5))
    elif name == "model2":
        con = replace(con, distance="contextual", deep_layers=(1, 2, 3, 4, 5))
    elif name == "model3":
        con = replace(con, distance="euclidean", deep_layers=(1, 2, 3, 4, 5))
    elif name == "model4":
        mask_ablation = True
    elif name == "model5":
        con = replace(con, lambda_cs=0.0)
    elif name == "no_se":
        net = replace(net, use_se=False)
    elif name == "no_cc":
        net = replace(net, use_cc=False)
    elif name == "no_ca":
        net = replace(net, use_ca=False)
    return Variant(net, con, mask_ablation)


class Trainer:
    """Model, frozen backbone and Adam state for one training run."""

    def __init__(self, cfg: TrainConfig, backbone=None):
        self.cfg = cfg
        self.variant = resolve_variant(cfg)
        dtype = cfg.torch_dtype
        self.net = FusionNet(self.variant.net, seed=derive_seed(cfg.seed, "net")).to(dtype)
        if backbone is None:
            backbone, self.backbone_info = load_backbone(
                cfg.backbone_weights, seed=derive_seed(cfg.seed, "backbone"), dtype=dtype)
        else:
            self.backbone_info = {"backbone": type(backbone).__name__, "weights": None}
        self.backbone = backbone.to(dtype)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=cfg.learning_rate,
                                          betas=(0.9, 0.999), eps=1e-8)
        self.step = 0

    def loss(self, vi, ir, partitions):
        fused = self.net(vi, ir)
        return total_loss(fused, vi, ir, partitions, self.backbone, weights=self.cfg.weights,
                          contrastive=self.variant.contrastive,
                          mask_ablation=self.variant.mask_ablation,
                          literal_ablation=self.cfg.literal_ablation_loss)

    def train_step(self, batch) -> LossReport:
        """One forward/backward pass and Adam update on ``batch``."""
        self.net.train()
        vi, ir, parts = batch.tensors(self.cfg.torch_dtype)
        total, report = self.loss(vi, ir, parts)
        values = report.as_dict()
        if not all(math.isfinite(v) for v in values.values()):
            raise NumericalError(f"non-finite loss at step {self.step + 1}: {values}", values)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.net.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        return report

    def evaluate(self, batch) -> LossReport:
        """Loss of ``batch`` under the current weights, leaving all state untouched.

        Runs in training mode (batch statistics), as :meth:`train_step` does;
        normalization running statistics are restored afterwards.
        """
        buffers = {k: v.clone() for k, v in self.net.named_buffers()}
        self.net.train()
        vi, ir, parts = batch.tensors(self.cfg.torch_dtype)
        with torch.no_grad():
            _, report = self.loss(vi, ir, parts)
        with torch.no_grad():
            for k, v in self.net.named_buffers():
                v.copy_(buffers[k])
        return report

    def save(self, path) -> None:
        save_checkpoint(path, self.net, step=self.step, config=self.cfg.to_dict(),
                        optimizer=self.optimizer,
                        rng_state={"torch": torch.get_rng_state()})

    def restore(self, path) -> None:
        payload = load_checkpoint(path, expected=self.variant.net)
        if payload["config"] and payload["config"] != self.cfg.to_dict():
            stored = {k: v for k, v in payload["config"].items() if k != "steps"}
            current = {k: v for k, v in self.cfg.to_dict().items() if k != "steps"}
            if stored != current:
                raise ConfigError(f"{path}: checkpoint was written with a different config")
        self.net.load_state_dict(payload["params"])
        if payload["optimizer"] is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        if payload.get("rng_state"):
            torch.set_rng_state(payload["rng_state"]["torch"])
        self.step = payload["step"]


def _latest_checkpoint(out: Path) -> Path | None:
    ckpts = sorted((out / CKPT_DIR).glob("step_*.pt"))
    return ckpts[-1] if ckpts else None


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and json.loads(line)["step"] <= step]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def run(cfg: TrainConfig, manifest, out_dir, *, resume: bool = True, backbone=None) -> dict:
    """Train for ``cfg.steps`` steps, checkpointing and logging under ``out_dir``.

    An existing checkpoint in ``out_dir`` is resumed unless ``resume`` is
    False.  Returns a summary with the per-step loss reports of this call.
    """
    if cfg.steps is None:
        raise ConfigError("steps must be set (no default training length)")
    out = Path(out_dir)
    (out / CKPT_DIR).mkdir(parents=True, exist_ok=True)
    # nothing draws from torch's global generator, but its state is checkpointed
    torch.manual_seed(derive_seed(cfg.seed, "torch"))
    dataset = Dataset(read_manifest(manifest))
    trainer = Trainer(cfg, backbone=backbone)
    log_path = out / LOG_NAME

    latest = _latest_checkpoint(out) if resume else None
    if latest is not None:
        trainer.restore(latest)
        _truncate_log(log_path, trainer.step)
        log.info("resumed from %s at step %d", latest, trainer.step)
    elif log_path.exists():
        log_path.unlink()

    per_epoch = batches_per_epoch(len(dataset), cfg.batch_size)
    run_manifest = {
        "config": cfg.to_dict(),
        "backbone": trainer.backbone_info,
        "records": len(dataset),
        "batches_per_epoch": per_epoch,
        "dropped_per_epoch": len(dataset) - per_epoch * cfg.batch_size,
        "resumed_from_step": trainer.step,
    }
    (out / "run_manifest.json").write_text(json.dumps(run_manifest, indent=2, sort_keys=True)
                                           + "\n", encoding="utf-8")

    reports = []
    stream = make_batches(dataset, cfg.batch_size, cfg.group_n, cfg.seed,
                          start_step=trainer.step, patch_size=cfg.patch_size,
                          min_salient_fraction=cfg.min_salient_fraction,
                          max_retries=cfg.max_retries)
    start = time.monotonic()
    with open(log_path, "a", encoding="utf-8") as fh:
        while trainer.step < cfg.steps:
            report = trainer.train_step(next(stream))
            reports.append(report)
            entry = {"step": trainer.step, **report.as_dict(),
                     "wall_time": round(time.monotonic() - start, 3)}
            fh.write(json.dumps(entry) + "\n")
            fh.flush()
            if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                trainer.save(out / CKPT_DIR / f"step_{trainer.step:06d}.pt")
    trainer.save(out / "final.pt")
    return {"steps": trainer.step, "reports": reports, "trainer": trainer}


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip()]


SUMMARY_FIELDS = ("variant", "status", "steps", "first_L_total", "final_L_total",
                  "first_L_con", "final_L_con", "error")


def run_ablation(cfg: TrainConfig, variants, manifest, out_dir) -> list[dict]:
    """Train every variant from the same seed; write ``summary.csv``.

    A failing variant is recorded and the remaining ones still run.
    """
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {unknown}; choose from {ABLATIONS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in variants:
        row = {"variant": name}
        try:
            result = run(replace(cfg, ablation=name), manifest, out / name, resume=False)
            entries = read_log(out / name / LOG_NAME)
            first, last = entries[0], entries[-1]
            row.update(status="ok", steps=result["steps"],
                       first_L_total=first["L_total"], final_L_total=last["L_total"],
                       first_L_con=first.get("L_con"), final_L_con=last.get("L_con"))
        except IvfuseError as exc:
            log.error("variant %s failed: %s", name, exc)
            row.update(status="failed", error=str(exc))
        rows.append(row)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k))
                             for k in SUMMARY_FIELDS})
    return rows
