"""Adversarial training loop, checkpoint container, and loss logging.

Checkpoint container layout::

    b"ALDENCKPT\\n"
    one UTF-8 JSON header line: {"version", "length", "sha256", "config_hash"}
    payload: ``length`` bytes of ``torch.save`` output

The payload holds generator/discriminator weights, both Adam states, the
iteration counter, the torch RNG state and the config snapshot.  Writes go to
a temp file that is renamed into place.

Randomness inside a step (contrastive sampling) and the epoch permutation
are derived from ``(seed, iteration)`` / ``(seed, epoch)``, so resuming from
any checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import VisionBackbone, get_backbone
from .config import TrainConfig, from_dict, to_dict
from .data import PairedSample, stack_pairs
from .discriminator import AnatomyAwareDiscriminator, build_discriminator
from .errors import (CheckpointVersionError, ConfigError, CorruptCheckpointError,
                     NonFiniteLossError, NumericError)
from .generator import UNetGenerator, build_generator
from .objectives import (LossReport, adversarial_d_loss, adversarial_g_loss, l1_loss,
                         sample_contrastive_batch, scl_loss, total_loss)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ALDENCKPT\n"
CHECKPOINT_VERSION = 1
LOG_HEADER = "iter\tl1\tadv_g\tadv_d\tscl\ttotal"


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class TrainState:
    config: TrainConfig
    generator: UNetGenerator
    discriminator: AnatomyAwareDiscriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    backbone: VisionBackbone
    iteration: int = 0


def init_state(config: TrainConfig) -> TrainState:
    generator = build_generator(config.generator, seed=derive_seed(config.seed, 1))
    discriminator = build_discriminator(config.discriminator, config.backbone.embed_dim,
                                        seed=derive_seed(config.seed, 2))
    backbone = get_backbone(config.backbone)
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    return TrainState(config, generator, discriminator, opt_g, opt_d, backbone)


def _term(name: str, iteration: int, fn, *args) -> torch.Tensor:
    """Evaluate one loss term, reporting non-finite inputs or outputs under its name."""
    try:
        value = fn(*args)
    except NumericError as exc:
        if isinstance(exc, NonFiniteLossError):
            raise
        raise NonFiniteLossError(name, float("nan"), iteration) from exc
    _finite(value, name, iteration)
    return value


def _finite(value: torch.Tensor, term: str, iteration: int) -> None:
    v = float(value.detach())
    if not np.isfinite(v):
        raise NonFiniteLossError(term, v, iteration)


def train_step(state: TrainState, ldct: torch.Tensor, ndct: torch.Tensor) -> tuple[TrainState, LossReport]:
    """One D-update then one G-update on a normalized (B, 1, H, W) batch."""
    cfg = state.config
    obj = cfg.objective
    it = state.iteration + 1
    G, D, psi = state.generator, state.discriminator, state.backbone
    G.train()
    D.train()

    # (1) conditioning and reference features, never differentiated
    with torch.no_grad():
        pyramid = psi.extract_hierarchy(ndct) if obj.enable_aad else None
        if obj.enable_scl:
            f_y = pyramid.high.values if pyramid is not None else psi.extract_dense(ndct).values
            f_x = psi.extract_dense(ldct).values

    # (2)
    yhat = G(ldct)

    # (3) discriminator half-step on a detached fake
    adv_d = torch.zeros(())
    if obj.enable_aad:
        for p in D.parameters():
            p.requires_grad_(True)
        state.opt_d.zero_grad(set_to_none=True)
        real_logits = D(ndct, pyramid)
        fake_logits = D(yhat.detach(), pyramid)
        adv_d = _term("adv_d", it, adversarial_d_loss, real_logits, fake_logits)
        adv_d.backward()
        state.opt_d.step()

    # (4) generator half-step
    l1 = _term("l1", it, l1_loss, yhat, ndct)
    adv_g = torch.zeros(())
    if obj.enable_aad:
        for p in D.parameters():
            p.requires_grad_(False)
        adv_g = _term("adv_g", it, adversarial_g_loss, D(yhat, pyramid))
    scl = torch.zeros(())
    if obj.enable_scl:
        f_yhat = psi.extract_dense(yhat).values
        batch = sample_contrastive_batch(f_x, f_yhat, f_y, obj, seed=derive_seed(cfg.seed, it, 3))
        scl = _term("scl", it, scl_loss, batch, obj)
    total = total_loss(l1, adv_g, scl, obj)
    _finite(total, "total", it)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    for p in D.parameters():
        p.requires_grad_(True)

    state.iteration = it
    report = LossReport(float(l1.detach()), float(adv_g.detach()), float(adv_d.detach()),
                        float(scl.detach()), float(total.detach()))
    return state, report


# --- checkpoints --------------------------------------------------------------

def _state_payload(state: TrainState) -> dict:
    return {
        "config": to_dict(state.config),
        "config_hash": state.config.config_hash(),
        "iteration": state.iteration,
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(_state_payload(state), buf)
    payload = buf.getvalue()
    header = {
        "version": CHECKPOINT_VERSION,
        "length": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "config_hash": state.config.config_hash(),
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def read_checkpoint_payload(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise CorruptCheckpointError(f"checkpoint not found: {path}") from exc
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpointError(f"{path}: not an ALDEN checkpoint (bad magic)")
    rest = raw[len(CHECKPOINT_MAGIC):]
    line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(CHECKPOINT_VERSION, header.get("version"))
    if len(payload) != header.get("length"):
        raise CorruptCheckpointError(
            f"{path}: payload is {len(payload)} bytes, header says {header.get('length')} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CorruptCheckpointError(f"{path}: payload digest mismatch")
    return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)


def load_checkpoint(path: str | Path, expected_config: TrainConfig | None = None) -> TrainState:
    """Rebuild a full TrainState; warns if ``expected_config`` hashes differently."""
    payload = read_checkpoint_payload(path)
    try:
        config = from_dict(TrainConfig, payload["config"])
    except ConfigError as exc:
        raise CorruptCheckpointError(f"{path}: stored config is invalid: {exc}") from exc
    if expected_config is not None and expected_config.config_hash() != payload["config_hash"]:
        warnings.warn(
            f"checkpoint {path} was written with config hash {payload['config_hash']}, "
            f"current config hashes to {expected_config.config_hash()}",
            stacklevel=2,
        )
    state = init_state(config)
    try:
        state.generator.load_state_dict(payload["generator"])
        state.discriminator.load_state_dict(payload["discriminator"])
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_d.load_state_dict(payload["opt_d"])
    except (KeyError, RuntimeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: state does not match its config: {exc}") from exc
    state.iteration = int(payload["iteration"])
    torch.set_rng_state(payload["torch_rng"])
    return state


# --- full runs ----------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    reports: list[tuple[int, LossReport]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final_checkpoint: Path | None = None


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Indices for 0-based ``iteration`` under per-epoch shuffling (last partial batch dropped)."""
    per_epoch = n // batch_size
    epoch, pos = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def train(config: TrainConfig, dataset: Sequence[PairedSample], out_dir: str | Path | None = None,
          resume_from: str | Path | TrainState | None = None,
          on_report: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Run ``total_iterations`` steps; returns the final state, reports and checkpoint paths."""
    config.check_compatibility()
    if len(dataset) < config.batch_size:
        raise ConfigError(f"batch_size: dataset has {len(dataset)} pairs, fewer than batch_size {config.batch_size}")
    ldct_all, ndct_all = (torch.from_numpy(a) for a in
                          stack_pairs(dataset, config.window_min, config.window_max))

    if resume_from is None:
        state = init_state(config)
    elif isinstance(resume_from, TrainState):
        state = resume_from
    else:
        state = load_checkpoint(resume_from, expected_config=config)
    backbone_sum = state.backbone.checksum()

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "losses.tsv"
        fresh = state.iteration == 0 or not log_path.exists()
        log_fh = open(log_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            log_fh.write(LOG_HEADER + "\n")

    result = TrainResult(state)
    try:
        while state.iteration < config.total_iterations:
            idx = torch.from_numpy(batch_indices(len(dataset), config.batch_size, config.seed, state.iteration))
            state, report = train_step(state, ldct_all[idx], ndct_all[idx])
            it = state.iteration
            if it % config.log_every == 0:
                result.reports.append((it, report))
                if log_fh is not None:
                    log_fh.write(report.as_record(it) + "\n")
                if on_report is not None:
                    on_report(it, report)
            if out is not None and it % config.checkpoint_every == 0:
                result.checkpoints.append(save_checkpoint(state, out / "checkpoints" / f"ckpt_{it:07d}.alden"))
    finally:
        if log_fh is not None:
            log_fh.close()

    if state.backbone.checksum() != backbone_sum:
        raise RuntimeError("frozen backbone parameters changed during training")
    if out is not None:
        result.final_checkpoint = save_checkpoint(state, out / "final.alden")
    return result


def read_loss_log(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln for ln in lines if ln and ln != LOG_HEADER]
