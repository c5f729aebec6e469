"""Operator command-line surface.

Subcommands: gen-data, pretrain, ablate, forget, merge, dump-matrices.
Configs are flat key=value text files validated against a fixed schema;
the env var UNIV_SEED overrides the configured seed.  Exit codes:
0 success, 1 usage/config error, 2 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import tensorio
from .encoder import EncoderConfig, encode, init_params
from .errors import ConfigError, DataError, NumericError
from .lora import LoraAdapter, LoraConfig, adapter_tensors, attach, forward_adapted, merge
from .pccl import pseudo_labels, similarity
from .training import (TrainConfig, forgetting_experiment, init_state,
                       linear_probe, make_labeled_scenes, make_pretrain_pairs,
                       pooled_features, to_channels, train_step)
from .autodiff import Tensor

_SCHEMA: dict[str, tuple] = {
    # encoder
    "image_size": (int, 16),
    "patch_size": (int, 4),
    "channels": (int, 3),
    "depth": (int, 2),
    "dim": (int, 32),
    "heads": (int, 4),
    "mlp_ratio": (int, 4),
    "model_seed": (int, 7),
    # training
    "epochs": (int, 4),
    "warmup_epochs": (int, 1),
    "base_lr": (float, 1.5e-4),
    "weight_decay": (float, 0.05),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "batch_size": (int, 4),
    "tau": (float, 0.04),
    "gamma": (float, 0.6),
    "alpha": (float, 1.0),
    "beta": (float, 1.0),
    "loss_kind": (str, "pccl"),
    "seed": (int, 0),
    # lora
    "lora_enabled": (lambda s: s.lower() in ("1", "true", "yes"), False),
    "lora_rank": (int, 8),
    "lora_alpha": (float, 32.0),
    "lora_dropout": (float, 0.1),
    "lora_targets": (lambda s: tuple(t for t in s.split(",") if t),
                     ("qkv", "proj", "fc1", "fc2", "patch_embed")),
    # data
    "manifest": (str, ""),
    "n_pairs": (int, 24),
    "night_fraction": (float, 0.0),
    # probes / grid
    "n_probe": (int, 32),
    "grid_seeds": (int, 5),
}


def parse_config(path) -> dict:
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        parser = _SCHEMA[key][0]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    if "UNIV_SEED" in os.environ:
        values["seed"] = int(os.environ["UNIV_SEED"])
    for key in sorted(values):
        print(f"config: {key}={values[key]}")
    return values


def build_configs(v: dict) -> tuple[EncoderConfig, TrainConfig]:
    enc = EncoderConfig(
        image_size=v["image_size"], patch_size=v["patch_size"],
        channels=v["channels"], depth=v["depth"], dim=v["dim"],
        heads=v["heads"], mlp_ratio=v["mlp_ratio"], seed=v["model_seed"],
    )
    lora_cfg = None
    if v["lora_enabled"]:
        lora_cfg = LoraConfig(rank=v["lora_rank"], alpha=v["lora_alpha"],
                              dropout=v["lora_dropout"],
                              target_modules=tuple(v["lora_targets"]))
    train = TrainConfig(
        epochs=v["epochs"], warmup_epochs=v["warmup_epochs"],
        base_lr=v["base_lr"], weight_decay=v["weight_decay"],
        betas=(v["beta1"], v["beta2"]), batch_size=v["batch_size"],
        tau=v["tau"], gamma=v["gamma"], alpha=v["alpha"], beta=v["beta"],
        lora=lora_cfg, loss_kind=v["loss_kind"], seed=v["seed"],
    )
    return enc, train


def _load_samples(v: dict, enc: EncoderConfig):
    if v["manifest"]:
        return list(datamod.load_pairs(v["manifest"]))
    return make_pretrain_pairs(v["n_pairs"], seed=v["seed"],
                               height=enc.image_size, width=enc.image_size,
                               night_fraction=v["night_fraction"])


def _params_bytes(params) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in params.items()}


# -- subcommands -------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    n_night = int(round(args.pairs * args.night_fraction))
    entries = []
    for i in range(args.pairs):
        night = i >= args.pairs - n_night
        spec = datamod.random_scene_spec(rng, illumination=0.1 if night else 1.0)
        scene_id = f"scene-{i:05d}" + ("-night" if night else "")
        sample = datamod.gen_scene(spec, seed=args.seed * 99991 + i,
                                   scene_id=scene_id)
        vis_name = f"{scene_id}.ppm"
        ir_name = f"{scene_id}.pgm"
        datamod.write_ppm(out / vis_name, sample.visible.data)
        datamod.write_pgm(out / ir_name, sample.infrared.data)
        entries.append(datamod.ManifestEntry(scene_id, vis_name, ir_name,
                                             f"seq{i // 8}"))
    datamod.write_manifest(out / "manifest.tsv", entries)
    print(f"wrote {args.pairs} pairs to {out}")
    return 0


def _run_one(enc: EncoderConfig, cfg: TrainConfig, samples, metrics_path=None):
    """Shared pretraining body: returns (teacher, state, best_params)."""
    teacher = init_params(enc)
    for t in teacher.values():
        t.requires_grad = False
    student = {k: Tensor(t.data.copy(), requires_grad=True)
               for k, t in teacher.items()}
    adapters = None
    if cfg.lora is not None:
        adapters = attach(student, cfg.lora, seed=cfg.seed)
    state = init_state(student, adapters)
    best = ({k: t.data.copy() for k, t in student.items()}, float("inf"))
    if cfg.epochs > 0:
        n_batches = max(1, -(-len(samples) // cfg.batch_size))
        run_cfg = replace(cfg, steps_per_epoch=n_batches)
        lines = []
        for epoch in range(cfg.epochs):
            for b in datamod.batch(samples, cfg.batch_size, seed=cfg.seed + epoch):
                metrics = train_step(state, b, teacher, enc, run_cfg)
                lines.append(json.dumps(metrics, sort_keys=False))
                if metrics["loss"] < best[1]:
                    best = ({k: t.data.copy() for k, t in student.items()},
                            metrics["loss"])
        if metrics_path is not None:
            Path(metrics_path).write_text("".join(line + "\n" for line in lines))
    elif metrics_path is not None:
        Path(metrics_path).write_text("")
    return teacher, state, best[0]


def cmd_pretrain(args) -> int:
    v = parse_config(args.config)
    enc, cfg = build_configs(v)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = _load_samples(v, enc)
    teacher, state, best_params = _run_one(enc, cfg, samples,
                                           metrics_path=out / "metrics.jsonl")
    tensorio.write_checkpoint(out / "teacher.ckpt", _params_bytes(teacher))
    # the student starts as a byte-identical copy of the teacher
    tensorio.write_checkpoint(out / "initial.ckpt", _params_bytes(teacher))
    if cfg.epochs == 0:
        print("epochs=0: wrote initial checkpoint only")
        return 0
    tensorio.write_checkpoint(out / "final.ckpt", _params_bytes(state.params))
    tensorio.write_checkpoint(out / "best.ckpt", best_params)
    if state.adapters is not None:
        tensorio.write_adapter_checkpoint(
            out / "adapters.ckpt",
            {name: t.data for name, t in
             adapter_tensors(state.adapters).items()},
            rank=cfg.lora.rank, alpha=cfg.lora.alpha, dropout=cfg.lora.dropout)
    print(f"pretrain done: {state.step} steps, "
          f"final loss {state.log[-1]['loss']:.6f}")
    return 0


def cmd_ablate(args) -> int:
    v = parse_config(args.config)
    enc, base_cfg = build_configs(v)
    samples = _load_samples(v, enc)
    probe_samples, probe_labels = make_labeled_scenes(
        v["n_probe"], seed=1000 + v["seed"],
        height=enc.image_size, width=enc.image_size)
    rows = []
    for label, kind in (("L_MSE", "mse"), ("L_NCE", "nce"), ("L_PCCL", "pccl")):
        cfg = replace(base_cfg, loss_kind=kind)
        _, state, _ = _run_one(enc, cfg, samples)
        vis = pooled_features(probe_samples, state.params, enc, state.adapters,
                              modality="visible")
        ir = pooled_features(probe_samples, state.params, enc, state.adapters,
                             modality="infrared")
        rows.append((label, state.log[-1]["loss"],
                     linear_probe(vis, probe_labels),
                     linear_probe(ir, probe_labels)))
    print(f"{'loss':<8} {'final':>12} {'visible_probe':>14} {'infrared_probe':>15}")
    for label, final, vp, ip in rows:
        print(f"{label:<8} {final:>12.6f} {vp:>14.4f} {ip:>15.4f}")
    return 0


def cmd_forget(args) -> int:
    v = parse_config(args.config)
    enc, cfg = build_configs(v)
    if cfg.lora is None:
        cfg = replace(cfg, lora=LoraConfig(rank=v["lora_rank"],
                                           alpha=v["lora_alpha"],
                                           dropout=v["lora_dropout"]))
    seeds = tuple(range(v["grid_seeds"]))
    report = forgetting_experiment(enc, cfg, seeds=seeds,
                                   n_pairs=v["n_pairs"], n_probe=v["n_probe"])
    print(f"{'row':<4} {'L_IV':<5} {'L_VV':<5} {'LoRA':<5} "
          f"{'trainable':>10} {'visible':>8} {'infrared':>9}")
    for r in report:
        print(f"({r['row']})  {'yes':<5} {'yes' if r['uses_vv'] else 'no':<5} "
              f"{'yes' if r['uses_lora'] else 'no':<5} "
              f"{r['trainable_params']:>10} {r['visible_probe']:>8.4f} "
              f"{r['infrared_probe']:>9.4f}")
    return 0


def cmd_merge(args) -> int:
    params = tensorio.read_checkpoint(args.checkpoint)
    named, meta = tensorio.read_adapter_checkpoint(args.adapters)
    targets = sorted({n.rsplit(".lora_", 1)[0] for n in named})
    rng = np.random.default_rng(0)
    merged = dict(params)
    worst = 0.0
    for target in targets:
        wname = f"{target}.weight"
        if wname not in params:
            raise ConfigError(f"adapter target {target!r} not found in checkpoint")
        adapter = LoraAdapter(
            target_name=target,
            B=Tensor(named[f"{target}.lora_B"]),
            A=Tensor(named[f"{target}.lora_A"]),
            rank=int(meta["rank"]), alpha=meta["alpha"],
            dropout_p=meta["dropout"])
        w = Tensor(params[wname])
        w_star = merge(w, adapter)
        merged[wname] = w_star.data
        for _ in range(10):
            x = Tensor(rng.normal(size=(4, w.shape[0])))
            two_path = forward_adapted(x, w, adapter)
            single = x @ w_star
            worst = max(worst, float(np.abs(two_path.data - single.data).max()))
    tensorio.write_checkpoint(args.out, merged)
    print(f"merged {len(targets)} adapters; max two-path vs merged diff {worst:.3e}")
    return 0


def cmd_dump_matrices(args) -> int:
    v = parse_config(args.config)
    enc, cfg = build_configs(v)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    teacher = init_params(enc)
    for t in teacher.values():
        t.requires_grad = False
    if args.checkpoint:
        loaded = tensorio.read_checkpoint(args.checkpoint)
        student = {k: Tensor(arr) for k, arr in loaded.items()}
    else:
        student = {k: Tensor(t.data.copy()) for k, t in teacher.items()}
    for sample in _load_samples(v, enc):
        vis = to_channels(sample.visible.data, enc.channels)
        ir = to_channels(sample.infrared.data, enc.channels)
        t_out = encode(vis, teacher, enc)
        labels = pseudo_labels(t_out.attention_last, cfg.gamma)
        f_i = encode(ir, student, enc).features
        f_v = encode(vis, student, enc).features
        s_iv = similarity(f_i, t_out.features, cfg.tau, kind="cross_modal")
        s_vv = similarity(f_v, t_out.features, cfg.tau, kind="intra_visible")
        tensorio.write_tensor(out / f"{sample.scene_id}.m_iv.tnsr", s_iv.values.data)
        tensorio.write_tensor(out / f"{sample.scene_id}.m_vv.tnsr", s_vv.values.data)
        tensorio.write_tensor(out / f"{sample.scene_id}.m_p.tnsr", labels.values)
    print(f"dumped matrices to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irvis")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic aligned pairs")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--night-fraction", type=float, default=0.0,
                   dest="night_fraction")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="run cross-modal pretraining")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("ablate", help="compare MSE/NCE/PCCL losses")
    a.add_argument("--config", required=True)
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("forget", help="run the forgetting grid")
    f.add_argument("--config", required=True)
    f.set_defaults(func=cmd_forget)

    m = sub.add_parser("merge", help="fold adapters into a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--adapters", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    d = sub.add_parser("dump-matrices", help="dump similarity/label matrices")
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--checkpoint", default="")
    d.set_defaults(func=cmd_dump_matrices)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
