"""Command-line entry point: ``ivfuse {gen-masks,train,fuse,eval,ablate}``.

Exit codes: 0 success, 1 data error, 2 config/usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import masks as mk
from .data import (Record, load_image, load_pair, merge_chroma, read_manifest, rgb_to_ycbcr,
                   save_image, write_manifest)
from .errors import ConfigError, DataError, NumericalError, IvfuseError
from .fusion_net import load_checkpoint, net_from_checkpoint
from .metrics import evaluate, write_metrics_csv
from .seeding import record_mask_seed
from .trainer import ABLATIONS, load_config, run, run_ablation

log = logging.getLogger("ivfuse")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
PROVIDERS = {"external": "external-lvm", "file": "file", "synthetic": "synthetic"}
PAD_MULTIPLE = 16


# ---------------------------------------------------------------------------
# gen-masks


def _rel(path: Path, base: Path) -> str:
    try:
        return Path(os.path.relpath(path, base)).as_posix()
    except ValueError:
        return str(path)


def _mask_job(record, modality, args, out_dir, client):
    """Produce one modality mask; returns (written, instance_count)."""
    stem = record.stem
    target = out_dir / mk.mask_filename(stem, modality)
    if target.exists() and not args.force:
        return False, None
    src = record.resolve(record.vi_path if modality == "vi" else record.ir_path)
    image = load_image(src)
    if args.provider == "synthetic":
        spec = mk.MaskProviderSpec("synthetic", seed=record_mask_seed(args.seed, stem, modality))
    elif args.provider == "file":
        spec = mk.MaskProviderSpec("file", path=str(Path(args.mask_source)
                                                    / mk.mask_filename(stem, modality)))
    else:
        spec = mk.MaskProviderSpec("external-lvm", prompt=args.prompt, endpoint=args.endpoint,
                                   timeout=args.timeout, retries=args.retries,
                                   max_in_flight=args.max_in_flight)
    mask, count = mk.generate_modal_mask_with_count(image, spec, client=client)
    mk.save_mask(mask, target)
    mk.write_sidecar(target.with_suffix(".json"), image=src.name,
                     prompt=spec.prompt if spec.kind == "external-lvm" else None,
                     instance_count=count, provider=spec.kind)
    return True, count


def cmd_gen_masks(args) -> int:
    manifest = Path(args.manifest)
    records = read_manifest(manifest)
    out_dir = Path(args.out) if args.out else manifest.parent / "masks"
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.provider == "file" and not args.mask_source:
        raise ConfigError("--provider file needs --mask-source DIR")
    client = None
    if args.provider == "external":
        spec = mk.MaskProviderSpec("external-lvm", prompt=args.prompt, endpoint=args.endpoint,
                                   timeout=args.timeout, retries=args.retries,
                                   max_in_flight=args.max_in_flight)
        client = mk.LVMClient.from_spec(spec)

    jobs = [(rec, mod) for rec in records for mod in mk.MODALITIES]
    workers = args.max_in_flight if args.provider == "external" else 1

    def attempt(job):
        rec, mod = job
        try:
            return _mask_job(rec, mod, args, out_dir, client), None
        except DataError as exc:
            return None, str(exc)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(attempt, jobs))

    failures, written, skipped = {}, 0, 0
    for (rec, mod), (res, err) in zip(jobs, results):
        if err is not None:
            failures.setdefault(rec.stem, []).append(f"{mod}: {err}")
            log.error("%s (%s): %s", rec.stem, mod, err)
        elif res[0]:
            written += 1
        else:
            skipped += 1
    for rec in records:
        if rec.stem in failures:
            continue
        rec.mask_vi_path = _rel(out_dir / mk.mask_filename(rec.stem, "vi"), manifest.parent)
        rec.mask_ir_path = _rel(out_dir / mk.mask_filename(rec.stem, "ir"), manifest.parent)
    write_manifest(manifest, records)
    report = {"provider": PROVIDERS[args.provider], "seed": args.seed, "records": len(records),
              "written": written, "skipped": skipped, "failures": failures}
    (out_dir / "mask_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
    print(f"gen-masks: {written} written, {skipped} skipped, {len(failures)} record(s) failed")
    return EXIT_DATA if failures else EXIT_OK


# ---------------------------------------------------------------------------
# train / ablate


def _train_overrides(args) -> dict:
    return {"seed": args.seed, "steps": args.steps}


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args))
    result = run(cfg, args.manifest, args.out, resume=not args.force)
    final = result["reports"][-1].L_total if result["reports"] else float("nan")
    print(f"train: {result['steps']} steps, final L_total {final:.6f}, output in {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    variants = [v.strip() for v in args.variant.split(",") if v.strip()] if args.variant \
        else list(ABLATIONS)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {unknown}; choose from {', '.join(ABLATIONS)}")
    cfg = load_config(args.config, _train_overrides(args))
    rows = run_ablation(cfg, variants, args.manifest, args.out)
    for row in rows:
        print(f"{row['variant']}: {row['status']}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# fuse


def _pad_amount(n: int) -> int:
    return (-n) % PAD_MULTIPLE


def fuse_arrays(net, vi_y, ir, dtype=torch.float32):
    """Fuse one (H, W) pair, reflect-padding to a multiple of 16 and cropping back.

    Returns ``(fused (H, W), (pad_bottom, pad_right))``.
    """
    h, w = vi_y.shape
    pads = (_pad_amount(h), _pad_amount(w))
    width = ((0, pads[0]), (0, pads[1]))
    vi_p = np.pad(vi_y, width, mode="reflect") if any(pads) else vi_y
    ir_p = np.pad(ir, width, mode="reflect") if any(pads) else ir
    net.eval()
    with torch.no_grad():
        out = net(torch.as_tensor(vi_p, dtype=dtype)[None, None],
                  torch.as_tensor(ir_p, dtype=dtype)[None, None])
    return out[0, 0, :h, :w].double().numpy(), pads


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fuse_one(net, dtype, vi_y, ir, chroma, out_path: Path, meta: dict) -> None:
    fused, pads = fuse_arrays(net, vi_y, ir, dtype)
    save_image(merge_chroma(fused, chroma), out_path)
    meta = dict(meta, output=out_path.name, size=list(vi_y.shape),
                padded=bool(any(pads)), pad_bottom_right=list(pads),
                padded_size=[vi_y.shape[0] + pads[0], vi_y.shape[1] + pads[1]])
    out_path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")


def cmd_fuse(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    dtype = torch.float64 if (payload.get("config") or {}).get("dtype") == "float64" \
        else torch.float32
    net = net_from_checkpoint(payload, dtype=dtype)
    base_meta = {"checkpoint_sha256": _sha256(args.checkpoint), "step": payload["step"]}
    out = Path(args.out)
    if args.manifest:
        out.mkdir(parents=True, exist_ok=True)
        records = read_manifest(args.manifest)
        for rec in records:
            vi_y, ir, chroma = load_pair(rec)
            _fuse_one(net, dtype, vi_y, ir, chroma, out / f"{rec.stem}.png",
                      dict(base_meta, vi=Path(rec.vi_path).name, ir=Path(rec.ir_path).name))
        print(f"fuse: {len(records)} image(s) written to {out}")
        return EXIT_OK
    if not (args.vi and args.ir):
        raise ConfigError("fuse needs either --manifest or both --vi and --ir")
    rec = Record(vi_path=str(Path(args.vi).resolve()), ir_path=str(Path(args.ir).resolve()))
    vi_y, ir, chroma = load_pair(rec)
    if out.suffix.lower() != ".png":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{Path(args.vi).stem}.png"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    _fuse_one(net, dtype, vi_y, ir, chroma, out,
              dict(base_meta, vi=Path(args.vi).name, ir=Path(args.ir).name))
    print(f"fuse: wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _luminance(img) -> np.ndarray:
    return rgb_to_ycbcr(img)[..., 0] if img.ndim == 3 else img


def cmd_eval(args) -> int:
    records = read_manifest(args.manifest)
    fused_dir = Path(args.fused_dir)
    rows = []
    for rec in records:
        path = fused_dir / f"{rec.stem}.png"
        if not path.exists():
            log.warning("%s: no fused image at %s", rec.stem, path)
            rows.append((rec.stem, None))
            continue
        vi_y, ir, _ = load_pair(rec)
        fused = _luminance(load_image(path))
        if fused.shape != vi_y.shape:
            raise DataError(f"{path}: fused {fused.shape} vs source {vi_y.shape}")
        rows.append((rec.stem, evaluate(fused, vi_y, ir, gradient_scale=255.0)))
    out = Path(args.out)
    if out.suffix.lower() != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "metrics.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    mean = write_metrics_csv(out, rows)
    missing = sum(r is None for _, r in rows)
    summary = "no valid rows" if mean is None else \
        f"EN {mean.en:.4f} SF {mean.sf:.4f} AG {mean.ag:.4f} CC {mean.cc:.4f}"
    print(f"eval: {len(rows) - missing} image(s), {missing} missing; {summary}; wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, manifest_required=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--manifest", required=manifest_required, help="JSON-lines manifest")
        p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--force", action="store_true")

    p = sub.add_parser("gen-masks", help="generate per-modality salient masks")
    common(p)
    p.set_defaults(func=cmd_gen_masks)
    p.add_argument("--provider", choices=sorted(PROVIDERS), default="synthetic")
    p.add_argument("--mask-source", help="directory of <stem>.<modality>.mask.png (file provider)")
    p.add_argument("--endpoint", help="segmentation service URL (external provider)")
    p.add_argument("--prompt", default=mk.DEFAULT_PROMPT)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--max-in-flight", type=int, default=4)

    for name, func, helptext in (("train", cmd_train, "train the fusion network"),
                                 ("ablate", cmd_ablate, "train ablation variants")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.set_defaults(func=func)
        p.add_argument("--steps", type=int, help="override the configured step count")
        if name == "ablate":
            p.add_argument("--variant", help=f"comma-separated subset of {','.join(ABLATIONS)}")

    p = sub.add_parser("fuse", help="fuse image pairs with a trained checkpoint")
    common(p, manifest_required=False)
    p.set_defaults(func=cmd_fuse)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vi")
    p.add_argument("--ir")

    p = sub.add_parser("eval", help="compute EN/SF/AG/CC for fused images")
    common(p)
    p.set_defaults(func=cmd_eval)
    p.add_argument("--fused-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for key, value in sorted(exc.components.items()):
            print(f"  {key} = {value!r}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except IvfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
