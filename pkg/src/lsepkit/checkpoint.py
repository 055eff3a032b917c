"""Checkpoint container: one safetensors file of named arrays plus a JSON metadata record.

Tensor names:
    model/<param>          trunk parameters
    ema/<param>            EMA trunk parameters
    head/<param>           probe head (LSEP runs)
    align/<param>          REPA alignment head (REPA runs)
    optim/<index>/<key>    optimizer per-parameter state (index in parameter order)
    rng/<stream>           torch.Generator states (uint8)

Metadata keys (all strings): ``format``, ``step``, ``config_digest``, and
``meta``: a JSON object with ``model_config``, ``probe_policy``, ``config``
(the full experiment config) and ``param_groups`` (optimizer hyperparameters).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import load_file, save_file

from .errors import CheckpointMismatch, ValidationError

FORMAT = "lsepkit.checkpoint/1"


def _module_tensors(prefix, module):
    if module is None:
        return {}
    return {f"{prefix}/{k}": v.detach().contiguous().clone() for k, v in module.state_dict().items()}


def save_checkpoint(path, *, step: int, config, model, ema, optimizer=None, head=None, align_head=None,
                    generators: dict | None = None, extra_meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    tensors.update(_module_tensors("model", model))
    tensors.update(_module_tensors("ema", ema))
    tensors.update(_module_tensors("head", head))
    tensors.update(_module_tensors("align", align_head))
    param_groups = []
    if optimizer is not None:
        sd = optimizer.state_dict()
        for idx, state in sd["state"].items():
            for key, value in state.items():
                tensors[f"optim/{idx}/{key}"] = torch.as_tensor(value).detach().contiguous().clone()
        param_groups = sd["param_groups"]
    for name, gen in (generators or {}).items():
        tensors[f"rng/{name}"] = gen.get_state().contiguous()
    meta = {
        "model_config": config.model.to_dict(),
        "probe_policy": config.probe.to_dict(),
        "config": config.to_dict(),
        "param_groups": param_groups,
        **(extra_meta or {}),
    }
    save_file(tensors, str(path), metadata={
        "format": FORMAT,
        "step": str(step),
        "config_digest": config.digest(),
        "meta": json.dumps(meta, sort_keys=True),
    })
    return path


def read_metadata(path) -> dict:
    with safe_open(str(path), framework="pt") as f:
        md = f.metadata() or {}
    if md.get("format") != FORMAT:
        raise ValidationError(f"{path} is not an lsepkit checkpoint (format={md.get('format')!r})")
    return {"step": int(md["step"]), "config_digest": md["config_digest"], **json.loads(md["meta"])}


def load_checkpoint(path, expected_digest: str | None = None, allow_mismatch: bool = False):
    """Return (metadata, tensors) after checking the config digest."""
    meta = read_metadata(path)
    if expected_digest is not None and meta["config_digest"] != expected_digest and not allow_mismatch:
        raise CheckpointMismatch(
            f"checkpoint digest {meta['config_digest'][:12]} does not match config digest {expected_digest[:12]}; "
            "pass the override flag to load anyway"
        )
    return meta, load_file(str(path))


def section(tensors: dict, prefix: str) -> dict:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def restore_optimizer(optimizer, tensors: dict, param_groups: list):
    state = {}
    for key, value in section(tensors, "optim").items():
        idx, name = key.split("/", 1)
        state.setdefault(int(idx), {})[name] = value
    optimizer.load_state_dict({"state": state, "param_groups": param_groups})


def restore_generators(generators: dict, tensors: dict):
    for name, gen in generators.items():
        key = f"rng/{name}"
        if key not in tensors:
            raise ValidationError(f"checkpoint lacks rng stream {name!r}")
        gen.set_state(tensors[key])


def parameter_digest(module) -> str:
    h = hashlib.sha256()
    for name, value in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
