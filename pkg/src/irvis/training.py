"""Dual-branch training loop: frozen teacher, trainable student fed both
modalities, AdamW with linear warmup + cosine decay, and the
catastrophic-forgetting probe grid.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import pccl
from .autodiff import Tensor
from .encoder import EncoderConfig, encode, init_params
from .errors import ConfigError, NumericError
from .lora import LoraConfig, adapter_tensors, attach

LOSS_KINDS = ("pccl", "pccl_softmax_variant", "mse", "nce")

ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 4
    warmup_epochs: int = 1
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    tau: float = pccl.DEFAULT_TAU
    gamma: float = pccl.DEFAULT_GAMMA
    alpha: float = 1.0
    beta: float = 1.0
    lora: LoraConfig | None = None
    loss_kind: str = "pccl"
    seed: int = 0
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}"
            )
        if self.base_lr <= 0.0 or self.batch_size < 1:
            raise ConfigError("learning rate and batch size must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")


@dataclass
class TrainState:
    step: int
    params: dict[str, Tensor]
    adapters: dict | None
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at the last step."""
    warmup = cfg.warmup_epochs * cfg.steps_per_epoch
    total = cfg.epochs * cfg.steps_per_epoch
    if step < warmup:
        return cfg.base_lr * step / warmup
    if step >= total:
        return 0.0
    frac = (step - warmup) / (total - warmup)
    return cfg.base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def init_state(params: dict[str, Tensor], adapters: dict | None = None) -> TrainState:
    return TrainState(step=0, params=params, adapters=adapters)


def trainable_map(state: TrainState) -> dict[str, Tensor]:
    out = {name: t for name, t in state.params.items() if t.requires_grad}
    if state.adapters:
        out.update(adapter_tensors(state.adapters))
    return out


def _adamw_update(state: TrainState, cfg: TrainConfig, lr: float) -> None:
    b1, b2 = cfg.betas
    t = state.step + 1
    for name, p in sorted(trainable_map(state).items()):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * (mhat / (np.sqrt(vhat) + ADAM_EPS)
                                + cfg.weight_decay * p.data)
        p.grad = None


def to_channels(img: np.ndarray, channels: int) -> np.ndarray:
    """Adapt a (C,H,W) image to the encoder's channel count."""
    if img.shape[0] == channels:
        return img
    if img.shape[0] == 1:
        return np.repeat(img, channels, axis=0)
    if channels == 1:
        return img.mean(axis=0, keepdims=True)
    raise ConfigError(f"cannot map {img.shape[0]} channels to {channels}")


def _sample_losses(sample: datamod.PairedSample, teacher: dict[str, Tensor],
                   state: TrainState, enc_cfg: EncoderConfig, cfg: TrainConfig,
                   rng: np.random.Generator, training: bool):
    """(component_iv, component_vv) loss terms for one aligned pair."""
    vis = to_channels(sample.visible.data, enc_cfg.channels)
    ir = to_channels(sample.infrared.data, enc_cfg.channels)
    teacher_out = encode(vis, teacher, enc_cfg)
    f_vf = teacher_out.features  # frozen params: carries no gradient
    labels = pccl.pseudo_labels(teacher_out.attention_last, cfg.gamma)

    kwargs = dict(adapters=state.adapters, training=training, rng=rng)
    f_i = encode(ir, state.params, enc_cfg, **kwargs).features
    f_v = encode(vis, state.params, enc_cfg, **kwargs).features

    if cfg.loss_kind == "mse":
        di = f_i - f_vf
        dv = f_v - f_vf
        return ad.tmean(ad.mul(di, di)), ad.tmean(ad.mul(dv, dv))

    s_iv = pccl.similarity(f_i, f_vf, cfg.tau, kind="cross_modal")
    s_vv = pccl.similarity(f_v, f_vf, cfg.tau, kind="intra_visible")
    if cfg.loss_kind == "nce":
        return ad.diag_cross_entropy(s_iv.values), ad.diag_cross_entropy(s_vv.values)
    if cfg.loss_kind == "pccl_softmax_variant":
        return (pccl.loss_variant_softmax(s_iv, labels),
                pccl.loss_variant_softmax(s_vv, labels))
    return pccl.loss_iv(s_iv, labels), pccl.loss_vv(s_vv, labels)


def train_step(state: TrainState, batch, teacher: dict[str, Tensor],
               enc_cfg: EncoderConfig, cfg: TrainConfig,
               rng: np.random.Generator | None = None) -> dict:
    """One optimization step on a batch of aligned pairs; mutates ``state``."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed + state.step)
    training = bool(state.adapters) and any(
        a.dropout_p > 0.0 for a in state.adapters.values()
    )
    try:
        l_iv_sum = None
        l_vv_sum = None
        for sample in batch:
            l_iv, l_vv = _sample_losses(sample, teacher, state, enc_cfg, cfg, rng,
                                        training)
            l_iv_sum = l_iv if l_iv_sum is None else l_iv_sum + l_iv
            l_vv_sum = l_vv if l_vv_sum is None else l_vv_sum + l_vv
        inv = 1.0 / len(batch)
        l_iv_mean = l_iv_sum * inv
        l_vv_mean = l_vv_sum * inv
        if cfg.loss_kind in ("mse", "nce"):
            loss = l_iv_mean + l_vv_mean
        else:
            loss = pccl.loss_pccl(l_iv_mean, l_vv_mean, cfg.alpha, cfg.beta)
    except NumericError as exc:
        last = state.log[-1]["loss"] if state.log else None
        raise NumericError(
            f"non-finite loss at step {state.step} (last finite loss: {last}): {exc}"
        ) from exc

    lr = lr_at(state.step, cfg)
    no_signal = (cfg.loss_kind.startswith("pccl")
                 and cfg.alpha == 0.0 and cfg.beta == 0.0)
    if loss.requires_grad and not no_signal:
        loss.backward()
        _adamw_update(state, cfg, lr)
    else:
        for p in trainable_map(state).values():
            p.grad = None
    metrics = {
        "step": state.step,
        "lr": lr,
        "loss": float(loss.data),
        "l_iv": float(l_iv_mean.data),
        "l_vv": float(l_vv_mean.data),
    }
    state.step += 1
    state.log.append(metrics)
    return metrics


def run_training(samples, teacher: dict[str, Tensor], state: TrainState,
                 enc_cfg: EncoderConfig, cfg: TrainConfig) -> TrainState:
    """Epoch loop over seeded shuffled batches."""
    samples = list(samples)
    n_batches = max(1, -(-len(samples) // cfg.batch_size))
    cfg = replace(cfg, steps_per_epoch=n_batches)
    for epoch in range(cfg.epochs):
        for b in datamod.batch(samples, cfg.batch_size, seed=cfg.seed + epoch):
            train_step(state, b, teacher, enc_cfg, cfg)
    return state


# -- probes and the forgetting grid -----------------------------------


def pooled_features(samples, params: dict[str, Tensor], enc_cfg: EncoderConfig,
                    adapters=None, modality: str = "visible") -> np.ndarray:
    """Mean-pooled patch features per sample, gradient-free."""
    rows = []
    for s in samples:
        img = s.visible.data if modality == "visible" else s.infrared.data
        out = encode(to_channels(img, enc_cfg.channels), params, enc_cfg,
                     adapters=adapters)
        rows.append(out.features.data.mean(axis=0))
    return np.array(rows)


def linear_probe(features: np.ndarray, labels, ridge: float = 1e-3) -> float:
    """Held-out accuracy of a closed-form ridge classifier on frozen features.

    Even indices train, odd indices evaluate; deterministic throughout.
    """
    labels = list(labels)
    if len(labels) != len(features) or len(labels) < 2:
        raise ConfigError("probe needs matching features/labels with >= 2 samples")
    classes = sorted(set(labels))
    if len(classes) == 1:
        return 1.0  # degenerate set: prior of the single class
    train = np.arange(0, len(labels), 2)
    test = np.arange(1, len(labels), 2)
    x = np.hstack([features, np.ones((len(labels), 1))])
    y = np.zeros((len(labels), len(classes)))
    for i, lab in enumerate(labels):
        y[i, classes.index(lab)] = 1.0
    xt = x[train]
    w = np.linalg.solve(xt.T @ xt + ridge * np.eye(x.shape[1]), xt.T @ y[train])
    pred = np.argmax(x[test] @ w, axis=1)
    truth = np.argmax(y[test], axis=1)
    return float((pred == truth).mean())


PROBE_CLASSES = {
    "vehicle": {"color": (0.85, 0.2, 0.1), "heat": 0.7, "kind": "square"},
    "person": {"color": (0.2, 0.3, 0.85), "heat": 0.55, "kind": "circle"},
}


def make_labeled_scenes(n: int, seed: int, *, height: int = 16, width: int = 16):
    """Single-object scenes with the object class as label."""
    rng = np.random.default_rng(seed)
    names = sorted(PROBE_CLASSES)
    samples, labels = [], []
    for i in range(n):
        # period-2 blocks so the probe's even/odd split sees both classes
        cls = names[(i // 2) % len(names)]
        info = PROBE_CLASSES[cls]
        size = float(rng.uniform(2.0, min(height, width) / 4.0))
        obj = datamod.SceneObject(
            kind=info["kind"],
            cx=float(rng.uniform(size, width - 1 - size)),
            cy=float(rng.uniform(size, height - 1 - size)),
            size=size,
            cls=cls,
        )
        spec = datamod.SceneSpec(
            height=height, width=width, objects=(obj,),
            colors={c: PROBE_CLASSES[c]["color"] for c in names},
            heats={c: PROBE_CLASSES[c]["heat"] for c in names},
            noise_visible=0.05, noise_infrared=0.08,
        )
        samples.append(datamod.gen_scene(spec, seed=seed * 100003 + i,
                                         scene_id=f"probe-{i}"))
        labels.append(cls)
    return samples, labels


def make_pretrain_pairs(n: int, seed: int, *, height: int = 16, width: int = 16,
                        night_fraction: float = 0.0):
    """Unlabeled multi-object pairs for contrastive pretraining."""
    rng = np.random.default_rng(seed)
    n_night = int(round(n * night_fraction))
    samples = []
    for i in range(n):
        illum = 0.1 if i >= n - n_night else 1.0
        spec = datamod.random_scene_spec(
            rng, height=height, width=width,
            classes={c: dict(v) for c, v in PROBE_CLASSES.items()},
            illumination=illum,
        )
        samples.append(datamod.gen_scene(spec, seed=seed * 99991 + i,
                                         scene_id=f"pair-{i:05d}"))
    return samples


GRID_ROWS = (
    ("a", dict(train=False, use_vv=False, use_lora=False)),
    ("b", dict(train=True, use_vv=False, use_lora=False)),
    ("c", dict(train=True, use_vv=True, use_lora=False)),
    ("d", dict(train=True, use_vv=False, use_lora=True)),
    ("e", dict(train=True, use_vv=True, use_lora=True)),
)


def _clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def forgetting_experiment(enc_cfg: EncoderConfig, cfg: TrainConfig,
                          seeds=(0, 1, 2, 3, 4), n_pairs: int = 24,
                          n_probe: int = 32) -> list[dict]:
    """Run the five-row loss/adapter grid and report median probe accuracies."""
    teacher = init_params(enc_cfg)
    for t in teacher.values():
        t.requires_grad = False
    report = []
    for row_name, row in GRID_ROWS:
        vis_scores, ir_scores = [], []
        trainable = 0
        for seed in seeds:
            run_cfg = replace(cfg, seed=cfg.seed + seed,
                              beta=cfg.beta if row["use_vv"] else 0.0,
                              lora=cfg.lora if row["use_lora"] else None)
            student = _clone_params(teacher)
            adapters = None
            if row["use_lora"]:
                lora_cfg = run_cfg.lora or LoraConfig()
                adapters = attach(student, lora_cfg, seed=run_cfg.seed)
            state = init_state(student, adapters)
            if row["train"]:
                pairs = make_pretrain_pairs(n_pairs, seed=run_cfg.seed,
                                            height=enc_cfg.image_size,
                                            width=enc_cfg.image_size)
                run_training(pairs, teacher, state, enc_cfg, run_cfg)
            trainable = sum(t.size for t in trainable_map(state).values())
            probe_samples, probe_labels = make_labeled_scenes(
                n_probe, seed=1000 + seed,
                height=enc_cfg.image_size, width=enc_cfg.image_size)
            vis = pooled_features(probe_samples, student, enc_cfg, adapters,
                                  modality="visible")
            ir = pooled_features(probe_samples, student, enc_cfg, adapters,
                                 modality="infrared")
            vis_scores.append(linear_probe(vis, probe_labels))
            ir_scores.append(linear_probe(ir, probe_labels))
        report.append({
            "row": row_name,
            "uses_vv": row["use_vv"],
            "uses_lora": row["use_lora"],
            "trainable_params": trainable if row["train"] else 0,
            "visible_probe": float(np.median(vis_scores)),
            "infrared_probe": float(np.median(ir_scores)),
        })
    return report
