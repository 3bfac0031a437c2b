"""``alden`` command line: phantom-gen, simulate, train, denoise, evaluate.

Exit codes: 0 success, 1 I/O failure, 2 config error, 3 numeric failure,
4 checkpoint mismatch, 5 output collision.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from .backbone import get_backbone
from .config import ABLATION_PRESETS, ABLATION_ROW_NAMES, DoseSimConfig, RunConfig, dump_config, load_run_config
from .data import (CTSlice, hu_to_unit, load_dataset, make_phantom, make_phantom_pairs, read_manifest, read_slice,
                   simulate_low_dose, unit_to_hu, write_manifest, write_slice)
from .errors import AldenError, CheckpointError, ConfigError, InvalidArgumentError, OutputCollisionError
from .evaluation import evaluate_dataset, write_report
from .training import derive_seed, load_checkpoint, train

log = logging.getLogger("alden")

CONFIG_ECHO = "run_config.json"


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    preset = getattr(args, "ablate_preset", None)
    if preset:
        for key, value in ABLATION_PRESETS[preset].items():
            overrides.append(f"objective.{key}={str(value).lower()}")
    return load_run_config(args.config, overrides)


def _claim_dir(out_dir: Path, sentinel: str, force: bool) -> None:
    if (out_dir / sentinel).exists() and not force:
        raise OutputCollisionError(f"{out_dir / sentinel} already exists; pass --force to overwrite")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise AldenError(f"cannot create output directory {out_dir}: {exc}") from exc


def _rel(path: Path, start: Path) -> str:
    return os.path.relpath(path, start)


def cmd_phantom_gen(args) -> Path:
    cfg = _resolve(args)
    count = cfg.data.phantom_count if args.count is None else args.count
    size = cfg.data.phantom_size if args.size is None else args.size
    out = Path(args.out_dir)
    _claim_dir(out, "manifest.tsv", args.force)
    records = []
    for i in range(count):
        sid = f"phantom_{i:04d}"
        ndct = make_phantom(size, size, cfg.data.phantom_structures, derive_seed(cfg.seed, i))
        path = write_slice(ndct, out / "ndct" / f"{sid}.f32")
        rel = _rel(path, out)
        records.append((rel, rel, sid))
    dump_config(cfg, out / CONFIG_ECHO)
    manifest = write_manifest(records, out / "manifest.tsv")
    print(manifest)
    return manifest


def cmd_simulate(args) -> Path:
    cfg = _resolve(args)
    dose = cfg.dose
    out = Path(args.out_dir)
    _claim_dir(out, "manifest.tsv", args.force)
    records = []
    for i, rec in enumerate(read_manifest(args.manifest)):
        ndct = read_slice(rec.ndct_path, rec.sample_id)
        sim = DoseSimConfig(dose.dose_fraction, dose.photon_count_full_dose, dose.electronic_noise_sigma,
                            seed=derive_seed(dose.seed, i))
        try:
            ldct = simulate_low_dose(ndct, sim)
        except AldenError as exc:
            raise type(exc)(f"sample '{rec.sample_id}': {exc}") from exc
        path = write_slice(ldct, out / "ldct" / f"{rec.sample_id}_ldct.f32")
        records.append((_rel(path, out), _rel(rec.ndct_path.resolve(), out.resolve()), rec.sample_id))
    dump_config(cfg, out / CONFIG_ECHO)
    manifest = write_manifest(records, out / "manifest.tsv")
    print(manifest)
    return manifest


def _training_set(cfg: RunConfig, manifest: str | None):
    manifest = manifest or cfg.data.train_manifest
    if manifest:
        return load_dataset(manifest)
    return make_phantom_pairs(cfg.data.phantom_count, cfg.data.phantom_size, cfg.data.phantom_structures,
                              cfg.dose, seed=cfg.seed, prefix="train")


def cmd_train(args) -> Path:
    cfg = _resolve(args)
    cfg.check_compatibility()
    out = Path(args.out_dir or cfg.output_dir)
    if args.resume is None:
        _claim_dir(out, "final.alden", args.force)
    else:
        out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / CONFIG_ECHO)
    dataset = _training_set(cfg, args.manifest)

    def progress(it, rep):
        if it % max(cfg.total_iterations // 20, 1) == 0:
            log.info("iter %d  l1=%.5f adv_g=%.4f adv_d=%.4f scl=%.4f total=%.5f",
                     it, rep.l1, rep.adv_g, rep.adv_d, rep.scl, rep.total)

    result = train(cfg.train_config(), dataset, out_dir=out, resume_from=args.resume, on_report=progress)
    print(result.final_checkpoint)
    return result.final_checkpoint


def _load_state(path):
    try:
        return load_checkpoint(path)
    except CheckpointError:
        raise
    except AldenError as exc:
        raise CheckpointError(f"checkpoint {path}: {exc}") from exc


def cmd_denoise(args) -> Path:
    state = _load_state(args.checkpoint)
    cfg = state.config
    out = Path(args.out_dir)
    _claim_dir(out, "manifest.tsv", args.force)
    G = state.generator.eval()
    records = []
    for rec in read_manifest(args.manifest):
        ldct = read_slice(rec.ldct_path, rec.sample_id)
        x = torch.from_numpy(hu_to_unit(ldct.pixels, cfg.window_min, cfg.window_max))[None, None]
        try:
            with torch.no_grad():
                y = G(x)[0, 0].numpy()
        except InvalidArgumentError as exc:
            raise CheckpointError(f"sample '{rec.sample_id}': {exc}") from exc
        path = write_slice(CTSlice(unit_to_hu(y, cfg.window_min, cfg.window_max)),
                           out / "denoised" / f"{rec.sample_id}_denoised.f32")
        records.append((_rel(path, out), _rel(rec.ndct_path.resolve(), out.resolve()), rec.sample_id))
    dump_config(cfg, out / CONFIG_ECHO)
    manifest = write_manifest(records, out / "manifest.tsv")
    print(manifest)
    return manifest


def _parse_ablate(items: list[str]) -> list[tuple[str, str]]:
    rows = []
    for item in items:
        preset, sep, ckpt = item.partition("=")
        if not sep or preset not in ABLATION_PRESETS:
            raise ConfigError(f"--ablate expects PRESET=CHECKPOINT with PRESET in {sorted(ABLATION_PRESETS)}, "
                              f"got '{item}'")
        rows.append((preset, ckpt))
    order = list(ABLATION_PRESETS)
    return sorted(rows, key=lambda r: order.index(r[0]))


def cmd_evaluate(args) -> Path:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise OutputCollisionError(f"{out} already exists; pass --force to overwrite")
    cfg = _resolve(args)
    dataset = load_dataset(args.manifest)
    reports = []
    if args.ablate:
        for preset, ckpt in _parse_ablate(args.ablate):
            state = _load_state(ckpt)
            tc = state.config
            reports.append(evaluate_dataset(state.generator, dataset, get_backbone(tc.backbone),
                                            tc.window_min, tc.window_max, name=ABLATION_ROW_NAMES[preset]))
    elif args.checkpoint:
        state = _load_state(args.checkpoint)
        tc = state.config
        reports.append(evaluate_dataset(state.generator, dataset, get_backbone(tc.backbone),
                                        tc.window_min, tc.window_max, name="model"))
    else:
        reports.append(evaluate_dataset(None, dataset, get_backbone(cfg.backbone),
                                        cfg.window_min, cfg.window_max, name="input"))
    jsonl, table = write_report(reports, out)
    dump_config(cfg, out.parent / CONFIG_ECHO)
    sys.stdout.write(table.read_text(encoding="utf-8"))
    return jsonl


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-path override, e.g. objective.enable_scl=false (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = argparse.ArgumentParser(prog="alden", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom-gen", parents=[common], help="write synthetic NDCT phantoms")
    s.add_argument("--count", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("simulate", parents=[common], help="simulate LDCT for every NDCT in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train generator and discriminator")
    s.add_argument("--manifest", help="paired training manifest (default: data.train_manifest or phantoms)")
    s.add_argument("--out-dir", help="run directory (default: output_dir from config)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--ablate", dest="ablate_preset", choices=sorted(ABLATION_PRESETS),
                   help="loss-composition preset")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", parents=[common], help="denoise the LDCT column of a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM/RMSE/perceptual report")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="JSON-lines report path; a .txt table is written beside it")
    s.add_argument("--checkpoint", help="model to evaluate; omitted = score LDCT against NDCT")
    s.add_argument("--ablate", action="append", metavar="PRESET=CHECKPOINT",
                   help="one row per preset (baseline, aad-only, scl-only, full)")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except AldenError as exc:
        print(f"alden {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"alden {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
