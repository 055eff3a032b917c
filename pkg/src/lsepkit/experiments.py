"""Directional desk-scale study: baseline vs LSEP vs REPA variants trained from identical seeds.

Each variant is trained to a shared list of evaluation steps. At every step the
EMA trunk is frozen and scored with the FID proxy (desk-encoder Fréchet
distance of unguided ODE samples against the real set) and a linear probe at
the target depth. Only orderings between variants are meaningful.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import config_from_dict, deep_merge
from .data import LabeledImages
from .evalkit.desknet import DeskEncoder, encode, fid_proxy_from_stats, train_desk_encoder
from .evalkit.frechet import stats_from_features
from .evalkit.probing import extract_features, split_indices, train_linear_probe
from .repa import EncoderProvider
from .sampler import SampleSpec, model_velocity_fn, sample_ode
from .train import init_state, run

log = logging.getLogger(__name__)

VARIANTS = {
    "baseline": {"train": {"lsep": False}},
    "lsep": {"probe": {"rho_L": 0.9}},
    "lsep_rho0.1": {"probe": {"rho_L": 0.1}},
    "repa": {"train": {"lsep": False}, "repa": {"enabled": True}},
    "repa_lsep": {"probe": {"rho_L": 0.9}, "repa": {"enabled": True}},
}


@dataclass
class EvalSettings:
    num_samples: int = 1000
    sample_steps: int = 50
    probe_t: float = 0.1
    probe_images: int = 1000
    probe_epochs: int = 30
    encoder_epochs: int = 5
    seed: int = 0


@dataclass
class VariantResult:
    name: str
    steps: list = field(default_factory=list)
    fid: list = field(default_factory=list)
    probe_accuracy: list = field(default_factory=list)
    class_loss: list = field(default_factory=list)  # (step, interval mean) pairs
    velocity_loss: list = field(default_factory=list)
    noise_digest: str = ""
    seconds: float = 0.0

    def collapse_score(self) -> float:
        """Mean probe-branch CE over the run; lower means the probe loss fell faster."""
        vals = [v for _, v in self.class_loss]
        return float(np.mean(vals)) if vals else math.nan


class Evaluator:
    """Shared FID-proxy extractor, real statistics, and probe split for one dataset."""

    def __init__(self, data: LabeledImages, settings: EvalSettings):
        self.data = data
        self.settings = settings
        self.net: DeskEncoder = train_desk_encoder(data.images, data.labels, data.num_classes,
                                                   epochs=settings.encoder_epochs, seed=settings.seed + 17)
        self.real_stats = stats_from_features(encode(self.net, data.images))
        n = min(settings.probe_images, len(data))
        self.probe_idx = np.arange(n)
        self.split = split_indices(n, 0.2, settings.seed)

    def fid(self, model) -> float:
        s = self.settings
        c = model.config
        labels = torch.arange(s.num_samples) % c.num_classes
        spec = SampleSpec(kind="ode", steps=s.sample_steps, seed=s.seed)
        x = sample_ode(model_velocity_fn(model), (s.num_samples, c.input_channels, c.input_size, c.input_size),
                       spec, labels, null_label=c.null_label_id)
        return fid_proxy_from_stats(self.net, self.real_stats, x.clamp(-1, 1))

    def probe(self, model) -> float:
        s = self.settings
        feats = extract_features(model, self.data.images[self.probe_idx], model.config.target_depth, s.probe_t,
                                 seed=s.seed)
        fit = train_linear_probe(feats, self.data.labels[self.probe_idx].numpy(), self.split,
                                 epochs=s.probe_epochs, seed=s.seed, num_classes=model.config.num_classes)
        return fit.accuracy

    def desk_provider(self, cfg) -> EncoderProvider:
        net = train_desk_encoder(self.data.images, self.data.labels, self.data.num_classes,
                                 epochs=cfg.repa.encoder_epochs, seed=cfg.seed + 7)
        return EncoderProvider(net, net.feat_dim, cfg.model.num_tokens)


def run_variant(name: str, raw: dict, data: LabeledImages, eval_steps, evaluator: Evaluator,
                provider=None) -> VariantResult:
    import time

    cfg = config_from_dict(deep_merge(raw, VARIANTS[name]), check_files=False)
    if cfg.repa.enabled and provider is None:
        provider = evaluator.desk_provider(cfg)
    state = init_state(cfg, data, provider)
    res = VariantResult(name)
    t0 = time.time()
    for step in eval_steps:
        run(state, data, until=step, write_files=False)
        res.steps.append(step)
        res.fid.append(evaluator.fid(state.ema))
        res.probe_accuracy.append(evaluator.probe(state.ema))
        log.info("%s step %d fid-proxy %.3f probe %.3f", name, step, res.fid[-1], res.probe_accuracy[-1])
    for r in state.metrics:
        res.velocity_loss.append((r["step"], r["velocity_loss"]))
        if cfg.train.lsep:
            res.class_loss.append((r["step"], r["class_loss"]))
    res.noise_digest = state.noise_digest
    res.seconds = round(time.time() - t0, 1)
    return res


def run_study(raw: dict, data: LabeledImages, eval_steps, variants=tuple(VARIANTS), settings=None,
              out_dir=None) -> dict:
    """Train and evaluate each variant; optionally write ``study.json`` under ``out_dir``."""
    evaluator = Evaluator(data, settings or EvalSettings(seed=int(raw.get("seed", 0))))
    shared_provider = None
    results = {}
    for name in variants:
        if "repa" in name and shared_provider is None:
            cfg = config_from_dict(deep_merge(raw, VARIANTS[name]), check_files=False)
            shared_provider = evaluator.desk_provider(cfg)
        results[name] = run_variant(name, raw, data, list(eval_steps), evaluator,
                                    provider=shared_provider if "repa" in name else None)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {k: asdict(v) for k, v in results.items()}
        payload["_checks"] = {k: list(v) for k, v in directional_checks(results).items()}
        (out / "study.json").write_text(json.dumps(payload, indent=2))
    return results


def directional_checks(results: dict) -> dict:
    """Ordering claims at the last matched step. Returns name -> (passed, detail)."""
    checks = {}

    def last(name, attr):
        return getattr(results[name], attr)[-1]

    if {"baseline", "lsep"} <= results.keys():
        a, b = last("lsep", "fid"), last("baseline", "fid")
        checks["8a_fid_lsep_below_baseline"] = (a < b, f"lsep {a:.4f} vs baseline {b:.4f}")
        a, b = last("lsep", "probe_accuracy"), last("baseline", "probe_accuracy")
        checks["8b_probe_lsep_above_baseline"] = (a > b, f"lsep {a:.4f} vs baseline {b:.4f}")
    if {"lsep", "lsep_rho0.1"} <= results.keys():
        lo, hi = results["lsep_rho0.1"].collapse_score(), results["lsep"].collapse_score()
        checks["8c_rho0.1_probe_loss_collapses_faster"] = (lo < hi, f"mean CE rho0.1 {lo:.4f} vs rho0.9 {hi:.4f}")
        a, b = last("lsep", "fid"), last("lsep_rho0.1", "fid")
        checks["8c_rho0.9_better_fid_than_rho0.1"] = (a < b, f"rho0.9 {a:.4f} vs rho0.1 {b:.4f}")
    if {"repa", "lsep", "repa_lsep"} <= results.keys():
        a = last("repa_lsep", "fid")
        b = min(last("repa", "fid"), last("lsep", "fid"))
        checks["9_repa_lsep_at_most_min"] = (a <= b, f"repa+lsep {a:.4f} vs min(repa, lsep) {b:.4f}")
    return checks
