"""Command-line entry point: lsepkit <verb> [options]."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import parameter_digest, read_metadata
from .config import ExperimentConfig, config_from_dict, dump_config, load_config
from .errors import CheckpointMismatch, NumericalError, ValidationError

log = logging.getLogger("lsepkit")


# Verbs whose --seed is the training seed; elsewhere it seeds sampling or probing only.
_TRAINING_VERBS = ("train", "resume", "export-features", "study")


def _config(args, check_files=True) -> ExperimentConfig | None:
    if args.config is None:
        return None
    overrides = {}
    if args.seed is not None and args.command in _TRAINING_VERBS:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None and args.command in ("train", "resume"):
        overrides["train"] = {"total_steps": args.steps}
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    return load_config(args.config, overrides, check_files=check_files)


def _require_config(args) -> ExperimentConfig:
    cfg = _config(args)
    if cfg is None:
        raise ValidationError(f"'{args.command}' needs --config")
    return cfg


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_model(args):
    """EMA trunk from --checkpoint, digest-checked against --config when both are given."""
    from .train import load_ema_model

    cfg = _config(args, check_files=False)
    expected = cfg.digest() if cfg is not None else None
    model, meta = load_ema_model(args.checkpoint, allow_mismatch=args.allow_mismatch, expected_digest=expected)
    if cfg is None:
        cfg = config_from_dict(meta["config"], check_files=False)
    return model, meta, cfg


def _data_for(cfg: ExperimentConfig, args):
    from .train import load_data

    if getattr(args, "data", None):
        cfg = config_from_dict({**cfg.to_dict(), "data": {**cfg.to_dict()["data"], "path": args.data}})
    return load_data(cfg)


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seed


def cmd_make_dataset(args):
    from .data import make_shapes_dataset

    out = make_shapes_dataset(args.out, args.classes, args.per_class, args.size, seed=args.seed or 0)
    print(out)


def cmd_train(args):
    from .train import train

    cfg = _require_config(args)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    dump_config(cfg, Path(cfg.output_dir) / "config.yaml")
    state = train(cfg)
    print(json.dumps({"step": state.step, "checkpoint": str(Path(cfg.output_dir) / "last.safetensors"),
                      "config_digest": cfg.digest(), "parameter_digest": parameter_digest(state.model)}))


def cmd_resume(args):
    from .train import load_data, resume_state, run

    cfg = _config(args)
    if cfg is None:
        meta = read_metadata(args.checkpoint)
        raw = meta["config"]
        if args.steps is not None:
            raw = {**raw, "train": {**raw["train"], "total_steps": args.steps}}
        if args.output_dir:
            raw = {**raw, "output_dir": args.output_dir}
        cfg = config_from_dict(raw)
    data = load_data(cfg)
    state = resume_state(args.checkpoint, cfg, allow_mismatch=args.allow_mismatch, data=data)
    if args.steps is not None or cfg.train.total_steps > state.step:
        state = run(state, data)
    print(json.dumps({"step": state.step, "parameter_digest": parameter_digest(state.model)}))


def _sample_spec(args, n):
    from .sampler import SampleSpec

    interval = None if args.no_interval else tuple(args.interval)
    return SampleSpec(kind=args.kind, steps=args.sample_steps, cfg_weight=args.cfg_weight, interval=interval,
                      seed=args.seed or 0, interval_convention=args.interval_convention,
                      labels=tuple(int(v) for v in args.labels) if args.labels else ())


def _generate(model, spec, n, batch_size=256):
    from .sampler import model_velocity_fn, sample

    c = model.config
    labels = torch.as_tensor(spec.labels) if spec.labels else torch.arange(n) % c.num_classes
    if len(labels) != n:
        labels = labels.repeat(math.ceil(n / len(labels)))[:n]
    fn = model_velocity_fn(model)
    out = []
    for s in range(0, n, batch_size):
        sub = dataclasses.replace(spec, seed=spec.seed + s)
        y = labels[s:s + batch_size]
        out.append(sample(fn, (len(y), c.input_channels, c.input_size, c.input_size), sub, y,
                          null_label=c.null_label_id))
    return torch.cat(out), labels


def _to_uint8(x: torch.Tensor) -> np.ndarray:
    arr = ((x.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).numpy()


def _grid(images: np.ndarray, cols: int) -> Image.Image:
    n, h, w, c = images.shape
    rows = math.ceil(n / cols)
    canvas = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        canvas[r * h:(r + 1) * h, q * w:(q + 1) * w] = img
    return Image.fromarray(canvas.squeeze(-1) if c == 1 else canvas)


def cmd_sample(args):
    model, meta, cfg = _load_model(args)
    spec = _sample_spec(args, args.num)
    x, labels = _generate(model, spec, args.num)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    imgs = _to_uint8(x)
    _grid(imgs, args.cols).save(out)
    if args.npz:
        np.savez_compressed(out.with_suffix(".npz"), images=imgs, labels=labels.numpy())
    manifest = {
        "image": str(out),
        "spec": spec.to_dict(),
        "num_samples": args.num,
        "labels": labels.tolist(),
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": _file_digest(args.checkpoint),
        "config_digest": meta["config_digest"],
        "step": meta["step"],
    }
    out.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    print(out)


def cmd_probe(args):
    from .evalkit import probe_grid

    model, _, cfg = _load_model(args)
    data = _data_for(cfg, args)
    n = min(args.max_images or len(data), len(data))
    report = probe_grid(model, data.images[:n], data.labels[:n].numpy(), layers=args.layers, times=args.times,
                        epochs=args.epochs, lr=args.lr, seed=_seed(args, cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".jsonl").write_text(report.to_jsonl())
    out.with_suffix(".csv").write_text(report.to_table())
    sys.stdout.write(report.to_table())


def _desk_encoder(cfg, data, cache: Path, epochs: int):
    from .evalkit.desknet import load_desk_encoder, save_desk_encoder, train_desk_encoder

    if cache.exists():
        return load_desk_encoder(cache)
    log.info("training desk encoder (%d epochs); cached at %s", epochs, cache)
    net = train_desk_encoder(data.images, data.labels, data.num_classes, epochs=epochs, seed=cfg.seed + 17)
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_desk_encoder(net, cache)
    return net


def cmd_fid(args):
    from .evalkit.desknet import fid_proxy

    model, meta, cfg = _load_model(args)
    data = _data_for(cfg, args)
    cache = Path(args.encoder or Path(cfg.output_dir) / "desk_encoder.safetensors")
    net = _desk_encoder(cfg, data, cache, args.encoder_epochs)
    spec = _sample_spec(args, args.num)
    x, _ = _generate(model, spec, args.num)
    value = fid_proxy(net, data.images, x.clamp(-1, 1))
    print(json.dumps({"fid_proxy": value, "num_samples": args.num, "step": meta["step"], "spec": spec.to_dict(),
                      "encoder": str(cache)}))


def cmd_viz(args):
    from .evalkit import extract_features, pca_project, probe_grid

    model, _, cfg = _load_model(args)
    data = _data_for(cfg, args)
    n = min(args.max_images or len(data), len(data))
    images, labels = data.images[:n], data.labels[:n].numpy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layers = args.layers or [model.config.target_depth]
    seed = _seed(args, cfg)
    summary = []
    for t in args.times:
        feats = extract_features(model, images, layers, t, pooling=args.pooling, seed=seed)
        for k in layers:
            f = feats[k]
            rows = labels
            if f.ndim == 3:
                # patch-level view: every token is a point, tagged with its image's label
                rows = np.repeat(labels, f.shape[1])
                f = f.reshape(-1, f.shape[-1])
            res = pca_project(f, 3)
            table = np.column_stack([res.projected, rows])
            np.savetxt(out / f"pca_layer{k}_t{t:g}.csv", table, delimiter=",", header="pc1,pc2,pc3,label",
                       comments="", fmt=["%.6f", "%.6f", "%.6f", "%d"])
            summary.append({"layer": k, "t": t, "explained_variance_ratio": res.explained_variance_ratio.tolist(),
                            "degenerate": res.degenerate})
    (out / "pca_summary.jsonl").write_text("".join(json.dumps(s) + "\n" for s in summary))
    if not args.skip_probe:
        report = probe_grid(model, images, labels, layers=args.probe_layers, times=args.times, epochs=args.epochs,
                            seed=seed)
        (out / "probe_curves.csv").write_text(report.to_table())
    print(out)


def cmd_export_features(args):
    from .repa import EncoderProvider, ProviderDescriptor, save_feature_file

    cfg = _require_config(args)
    data = _data_for(cfg, args)
    cache = Path(args.encoder or Path(cfg.output_dir) / "repa_encoder.safetensors")
    net = _desk_encoder(cfg, data, cache, args.encoder_epochs)
    provider = EncoderProvider(net, net.feat_dim, cfg.model.num_tokens)
    feats = {}
    for s in range(0, len(data), 256):
        ids = list(range(s, min(s + 256, len(data))))
        batch = provider.clean_features(data.images[ids], ids=ids)
        feats.update({i: f for i, f in zip(ids, batch)})
    desc = ProviderDescriptor(provider.descriptor.name, provider.descriptor.feat_dim)
    save_feature_file(args.out, feats, desc, extra={"data": str(cfg.data.path), "seed": cfg.seed,
                                                    "num_tokens": cfg.model.num_tokens})
    print(args.out)


def cmd_study(args):
    from .experiments import EvalSettings, directional_checks, run_study
    from .train import load_data

    cfg = _require_config(args)
    data = load_data(cfg)
    raw = cfg.to_dict()
    raw.pop("preset", None)
    settings = EvalSettings(num_samples=args.num, sample_steps=args.sample_steps, seed=cfg.seed)
    results = run_study(raw, data, args.eval_steps, variants=args.variants, settings=settings,
                        out_dir=cfg.output_dir)
    for name, (ok, detail) in directional_checks(results).items():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


def _add_sampling(p):
    p.add_argument("--kind", choices=("ode", "sde"), default="sde")
    p.add_argument("--sample-steps", type=int, default=250)
    p.add_argument("--cfg-weight", type=float, default=1.0)
    p.add_argument("--interval", type=float, nargs=2, default=(0.0, 1.0), metavar=("LO", "HI"))
    p.add_argument("--no-interval", action="store_true", help="disable guidance entirely")
    p.add_argument("--interval-convention", choices=("t", "reverse"), default="t")
    p.add_argument("--labels", type=int, nargs="*")
    p.add_argument("--num", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsepkit", description="Flow-matching transformer toolkit with LSEP.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=fn)
        return p

    def with_ckpt(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--allow-mismatch", action="store_true", help="load despite a config digest mismatch")
        p.add_argument("--data", help="dataset path overriding the checkpoint's config")
        return p

    p = verb("make-dataset", cmd_make_dataset, "write the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--size", type=int, default=32)

    p = verb("train", cmd_train, "train from a config")
    p.add_argument("--steps", type=int)
    p.add_argument("--output-dir")

    p = verb("resume", cmd_resume, "continue training from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--allow-mismatch", action="store_true")
    p.add_argument("--steps", type=int, help="new total step count")
    p.add_argument("--output-dir")

    p = with_ckpt(verb("sample", cmd_sample, "write a PNG grid of samples plus a JSON manifest"))
    _add_sampling(p)
    p.add_argument("--out", default="samples.png")
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--npz", action="store_true", help="also save the raw uint8 samples")

    p = with_ckpt(verb("probe", cmd_probe, "linear-probe accuracy per (layer, t)"))
    p.add_argument("--layers", type=int, nargs="*")
    p.add_argument("--times", type=float, nargs="*", default=[0.1, 0.4, 0.7])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--max-images", type=int)
    p.add_argument("--out", default="probe")

    p = with_ckpt(verb("fid", cmd_fid, "FID proxy of generated samples against the dataset"))
    _add_sampling(p)
    p.set_defaults(num=1000, kind="ode", sample_steps=50)
    p.add_argument("--encoder", help="cached desk encoder path")
    p.add_argument("--encoder-epochs", type=int, default=5)

    p = with_ckpt(verb("viz", cmd_viz, "PCA tables and probing curves as CSV"))
    p.add_argument("--layers", type=int, nargs="*")
    p.add_argument("--probe-layers", type=int, nargs="*")
    p.add_argument("--times", type=float, nargs="*", default=[0.1, 0.4, 0.7])
    p.add_argument("--pooling", choices=("global_mean", "none"), default="global_mean")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--max-images", type=int, default=1000)
    p.add_argument("--skip-probe", action="store_true")
    p.add_argument("--out", default="viz")

    p = verb("export-features", cmd_export_features, "write a REPA feature file from the desk encoder")
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--encoder")
    p.add_argument("--encoder-epochs", type=int, default=5)

    p = verb("study", cmd_study, "directional baseline/LSEP/REPA comparison")
    p.add_argument("--eval-steps", type=int, nargs="+", required=True)
    p.add_argument("--variants", nargs="+", default=["baseline", "lsep", "lsep_rho0.1", "repa", "repa_lsep"])
    p.add_argument("--num", type=int, default=1000)
    p.add_argument("--sample-steps", type=int, default=50)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, CheckpointMismatch) as exc:
        log.error("%s", exc)
        return 2
    except NumericalError as exc:
        log.error("%s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
