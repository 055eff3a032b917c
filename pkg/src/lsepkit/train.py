"""Training loop: batches, noise/time sampling, LSEP (+ optional REPA) loss, AdamW, EMA, checkpoints, metrics."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import flowcore
from .checkpoint import (
    load_checkpoint,
    restore_generators,
    restore_optimizer,
    save_checkpoint,
    section,
)
from .config import ExperimentConfig, config_from_dict, device
from .data import BatchStream, LabeledImages, Prefetcher, ingest_dataset
from .errors import NumericalError, ValidationError
from .lsep import ProbeHead, lsep_loss
from .repa import AlignmentHead, EncoderProvider, PrecomputedProvider, combined_repa_lsep_loss
from .trunk import SiT

log = logging.getLogger(__name__)

STREAMS = ("noise", "time", "cfg", "probe", "crop")
# Stream seed offsets keep the generators decorrelated for one base seed.
_STREAM_OFFSET = {"noise": 101, "time": 202, "cfg": 303, "probe": 404, "crop": 505}


@torch.no_grad()
def ema_update(params, ema, decay: float):
    """ema <- decay * ema + (1 - decay) * params, in place. Accepts modules or tensor sequences."""
    if isinstance(params, torch.nn.Module):
        src = dict(params.named_parameters())
        dst = dict(ema.named_parameters())
        if src.keys() != dst.keys():
            raise ValidationError("EMA and model parameter names differ")
        pairs = [(src[k], dst[k]) for k in src]
    else:
        pairs = list(zip(params, ema))
    for p, e in pairs:
        if p.shape != e.shape:
            raise ValidationError(f"shape mismatch in EMA update: {tuple(p.shape)} vs {tuple(e.shape)}")
        e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema


def make_generators(cfg: ExperimentConfig) -> dict:
    gens = {}
    for name in STREAMS:
        base = cfg.stream_seed_probe if name in ("probe", "crop") else cfg.seed
        gens[name] = torch.Generator().manual_seed(base * 1_000 + _STREAM_OFFSET[name])
    return gens


def set_deterministic(flag: bool):
    torch.use_deterministic_algorithms(flag)


@dataclass
class TrainState:
    config: ExperimentConfig
    step: int
    model: SiT
    ema: SiT
    optimizer: torch.optim.Optimizer
    generators: dict
    head: ProbeHead | None = None
    align_head: AlignmentHead | None = None
    provider: object = None
    noise_digest: str = ""
    metrics: list = field(default_factory=list)


def build_provider(cfg: ExperimentConfig, data: LabeledImages | None):
    if not cfg.repa.enabled:
        return None
    if cfg.repa.provider == "file":
        return PrecomputedProvider(cfg.repa.feature_file, num_tokens=cfg.model.num_tokens)
    from .evalkit.desknet import train_desk_encoder

    if data is None:
        raise ValidationError("the desk REPA provider needs the training data")
    net = train_desk_encoder(data.images, data.labels, data.num_classes, epochs=cfg.repa.encoder_epochs,
                             seed=cfg.seed + 7)
    return EncoderProvider(net, net.feat_dim, cfg.model.num_tokens)


def init_state(cfg: ExperimentConfig, data: LabeledImages | None = None, provider=None) -> TrainState:
    set_deterministic(cfg.train.deterministic)
    torch.manual_seed(cfg.seed)
    dev = device()
    model = SiT(cfg.model).to(dev)
    ema = copy.deepcopy(model).requires_grad_(False)
    groups = [{"params": list(model.parameters()), "lr": cfg.optimizer.lr, "name": "trunk"}]
    head = align_head = None
    if cfg.train.lsep:
        head = ProbeHead(cfg.model.hidden_dim, cfg.model.num_classes).to(dev)
        groups.append({"params": list(head.parameters()), "lr": cfg.probe.probe_lr, "name": "probe"})
    if cfg.repa.enabled:
        if provider is None:
            provider = build_provider(cfg, data)
        align_head = AlignmentHead(cfg.model.hidden_dim, provider.descriptor.feat_dim, cfg.repa.head_width,
                                   cfg.repa.head_depth).to(dev)
        groups.append({"params": list(align_head.parameters()), "lr": cfg.optimizer.lr, "name": "align"})
    opt = torch.optim.AdamW(groups, lr=cfg.optimizer.lr, betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
                            weight_decay=cfg.optimizer.weight_decay, foreach=False)
    return TrainState(cfg, 0, model, ema, opt, make_generators(cfg), head, align_head, provider)


def _update_digest(digest: str, *tensors) -> str:
    h = hashlib.sha256(digest.encode())
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_step(state: TrainState, ids, x0, labels) -> dict:
    cfg = state.config
    gens = state.generators
    dev = next(state.model.parameters()).device
    x0, labels = x0.to(dev), labels.to(dev)
    eps = torch.randn(x0.shape, generator=gens["noise"]).to(dev)
    t = torch.rand((x0.shape[0],), generator=gens["time"]).to(dev)
    state.noise_digest = _update_digest(state.noise_digest, x0, eps, t)
    sched = flowcore.get_schedule(cfg.train.schedule)
    kwargs = dict(probe_gen=gens["probe"], crop_gen=gens["crop"], cfg_gen=gens["cfg"], rho_D=cfg.train.rho_D,
                  sched=sched, use_probe=cfg.train.lsep)
    state.model.train()
    try:
        if cfg.repa.enabled:
            targets = state.provider.clean_features(x0, ids=ids)
            parts = combined_repa_lsep_loss(state.model, state.head, state.align_head, targets, x0, eps, t, labels,
                                            cfg.probe, lam=cfg.repa.lam, align_depth=cfg.repa.align_depth, **kwargs)
        else:
            parts = lsep_loss(state.model, state.head, x0, eps, t, labels, cfg.probe, **kwargs)
        if not math.isfinite(float(parts.total.detach())):
            raise NumericalError(f"non-finite loss at step {state.step}", step=state.step)
    except NumericalError as exc:
        path = Path(cfg.output_dir) / f"diagnostic_step{state.step:07d}.safetensors"
        _save(state, path)
        raise NumericalError(f"{exc}; diagnostic checkpoint at {path}", layer=exc.layer, step=state.step) from exc
    state.optimizer.zero_grad(set_to_none=True)
    parts.total.backward()
    state.optimizer.step()
    ema_update(state.model, state.ema, cfg.train.ema_decay)
    state.step += 1
    return {
        "velocity_loss": float(parts.velocity.detach()),
        "class_loss": float(parts.class_.detach()),
        "omega_mean": parts.omega_mean,
        "probe_null_fraction": parts.null_fraction,
        "repa_loss": float(parts.repa.detach()) if parts.repa is not None else None,
        "total_loss": float(parts.total.detach()),
    }


def _save(state: TrainState, path):
    return save_checkpoint(path, step=state.step, config=state.config, model=state.model, ema=state.ema,
                           optimizer=state.optimizer, head=state.head, align_head=state.align_head,
                           generators=state.generators, extra_meta={"noise_digest": state.noise_digest})


def checkpoint_path(cfg: ExperimentConfig, step: int) -> Path:
    return Path(cfg.output_dir) / "checkpoints" / f"step{step:07d}.safetensors"


def run(state: TrainState, data: LabeledImages, until: int | None = None, callbacks=(), write_files: bool = True):
    """Advance ``state`` to step ``until`` (default: total_steps).

    Metrics are averaged over each log interval and appended as JSON lines to
    ``<output_dir>/metrics.jsonl``. Callbacks receive (state, record) after each
    log record.
    """
    cfg = state.config
    until = cfg.train.total_steps if until is None else until
    stream = BatchStream(data, cfg.train.batch_size, cfg.seed)
    out = Path(cfg.output_dir)
    metrics_file = None
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "a")
    acc, count, t0 = {}, 0, time.time()
    prefetch = Prefetcher(stream, state.step, until, depth=cfg.train.prefetch)
    try:
        for step, ids, x0, labels in prefetch:
            if step != state.step:
                raise RuntimeError(f"batch stream out of sync: {step} != {state.step}")
            rec = train_step(state, ids, x0, labels)
            for k, v in rec.items():
                if v is not None:
                    acc[k] = acc.get(k, 0.0) + v
            count += 1
            if state.step % cfg.train.log_every == 0 or state.step == until:
                record = {"step": state.step, **{k: v / count for k, v in acc.items()},
                          "noise_digest": state.noise_digest[:16], "elapsed_s": round(time.time() - t0, 3)}
                state.metrics.append(record)
                if metrics_file is not None:
                    metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
                    metrics_file.flush()
                log.info("step %d velocity %.4f class %.4f", state.step, record["velocity_loss"],
                         record.get("class_loss", 0.0))
                for cb in callbacks:
                    cb(state, record)
                acc, count = {}, 0
            if write_files and cfg.train.ckpt_every and state.step % cfg.train.ckpt_every == 0:
                _save(state, checkpoint_path(cfg, state.step))
    finally:
        prefetch.close()
        if metrics_file is not None:
            metrics_file.close()
    if write_files:
        _save(state, checkpoint_path(cfg, state.step))
        _save(state, out / "last.safetensors")
    return state


def train(cfg: ExperimentConfig, data: LabeledImages | None = None, callbacks=(), write_files: bool = True,
          provider=None) -> TrainState:
    if data is None:
        data = load_data(cfg)
    state = init_state(cfg, data, provider)
    return run(state, data, callbacks=callbacks, write_files=write_files)


def load_data(cfg: ExperimentConfig) -> LabeledImages:
    if cfg.data.path is None:
        raise ValidationError("config has no data.path")
    data = ingest_dataset(cfg.data.path, cfg.data.image_size, cfg.data.channels, seed=cfg.seed)
    if data.num_classes != cfg.model.num_classes:
        raise ValidationError(f"dataset has {data.num_classes} classes, model expects {cfg.model.num_classes}")
    return data


def resume_state(path, cfg: ExperimentConfig | None = None, allow_mismatch: bool = False,
                 data: LabeledImages | None = None, provider=None) -> TrainState:
    """Rebuild a TrainState from a checkpoint. With ``cfg`` given, its digest must match."""
    from .checkpoint import read_metadata

    meta = read_metadata(path)
    if cfg is None:
        cfg = config_from_dict(meta["config"], check_files=False)
    meta, tensors = load_checkpoint(path, cfg.digest(), allow_mismatch)
    state = init_state(cfg, data, provider)
    state.model.load_state_dict(section(tensors, "model"))
    state.ema.load_state_dict(section(tensors, "ema"))
    if state.head is not None:
        state.head.load_state_dict(section(tensors, "head"))
    if state.align_head is not None:
        state.align_head.load_state_dict(section(tensors, "align"))
    restore_optimizer(state.optimizer, tensors, meta["param_groups"])
    restore_generators(state.generators, tensors)
    state.step = meta["step"]
    state.noise_digest = meta.get("noise_digest", "")
    return state


def load_ema_model(path, allow_mismatch: bool = True, expected_digest: str | None = None) -> tuple[SiT, dict]:
    """Frozen EMA trunk from a checkpoint, for sampling and evaluation."""
    meta, tensors = load_checkpoint(path, expected_digest, allow_mismatch)
    cfg = config_from_dict(meta["config"], check_files=False)
    model = SiT(cfg.model)
    model.load_state_dict(section(tensors, "ema"))
    return model.eval().requires_grad_(False), meta
