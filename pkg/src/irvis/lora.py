"""Low-rank adapters: attach, two-path forward, exact merge/unmerge,
and the column-sparsity diagnostic.

Weights are stored (in, k) x (out, d) style: a linear layer computes
``x @ W`` with W of shape (k, d), so the low-rank update contributes
``(alpha/r) * x @ A^T @ B^T`` with B (d, r) and A (r, k).  B starts at
zero, which makes the freshly adapted model bit-identical to the frozen
one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import trunc_normal
from .errors import ConfigError, ShapeMismatchError

DEFAULT_TARGETS = ("qkv", "proj", "fc1", "fc2", "patch_embed")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 32.0
    dropout: float = 0.1
    target_modules: tuple[str, ...] = DEFAULT_TARGETS


@dataclass
class LoraAdapter:
    target_name: str
    B: Tensor  # (d, r), zero at init
    A: Tensor  # (r, k), Gaussian at init
    rank: int
    alpha: float
    dropout_p: float = 0.0

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
        """Adapter branch (alpha/r) * drop(x) A^T B^T; dropout only in training."""
        if training and self.dropout_p > 0.0:
            if rng is None:
                raise ValueError("training-mode adapter forward needs an RNG")
            x = ad.dropout(x, self.dropout_p, rng)
        return (x @ ad.transpose(self.A) @ ad.transpose(self.B)) * self.scaling

    def update_matrix(self) -> np.ndarray:
        """(k, d) matrix added to W by merging."""
        return self.scaling * (self.B.data @ self.A.data).T


def forward_adapted(x: Tensor, w: Tensor, adapter: LoraAdapter,
                    training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Two-path forward x W + adapter branch; gradients reach B and A only."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError(f"forward shape mismatch: {x.shape} x {w.shape}")
    return x @ w + adapter.delta(x, training=training, rng=rng)


def merge(w: Tensor, adapter: LoraAdapter) -> Tensor:
    """W + (alpha/r) (B A)^T as a new tensor; W itself is untouched."""
    upd = adapter.update_matrix()
    if upd.shape != w.shape:
        raise ShapeMismatchError(
            f"merge shape mismatch: W {w.shape} vs update {upd.shape}"
        )
    return Tensor(w.data + upd)


def unmerge(w_star: Tensor, adapter: LoraAdapter) -> Tensor:
    upd = adapter.update_matrix()
    if upd.shape != w_star.shape:
        raise ShapeMismatchError(
            f"unmerge shape mismatch: W* {w_star.shape} vs update {upd.shape}"
        )
    return Tensor(w_star.data - upd)


def attach(params: dict[str, Tensor], cfg: LoraConfig,
           seed: int = 0) -> dict[str, LoraAdapter]:
    """Freeze the base parameters and hang adapters on matching matrices.

    Position embeddings stay trainable alongside the adapters; everything
    else in the base parameter set is frozen.
    """
    rng = np.random.default_rng(seed)
    adapters: dict[str, LoraAdapter] = {}
    matched = {pat: False for pat in cfg.target_modules}
    for name in sorted(params):
        if not name.endswith(".weight"):
            continue
        target = name[:-len(".weight")]
        leaf = target.rsplit(".", 1)[-1]
        if leaf not in cfg.target_modules:
            continue
        matched[leaf] = True
        k, d = params[name].shape
        if cfg.rank > min(d, k):
            raise ConfigError(
                f"rank {cfg.rank} exceeds min dim of {target} ({min(d, k)})"
            )
        adapters[target] = LoraAdapter(
            target_name=target,
            B=Tensor(np.zeros((d, cfg.rank)), requires_grad=True),
            A=Tensor(trunc_normal(rng, (cfg.rank, k)), requires_grad=True),
            rank=cfg.rank,
            alpha=cfg.alpha,
            dropout_p=cfg.dropout,
        )
    missing = [pat for pat, ok in matched.items() if not ok]
    if missing:
        raise ConfigError(f"target patterns matched no parameter: {missing}")
    for name, t in params.items():
        t.requires_grad = name == "pos_embed"
    return adapters


def adapter_tensors(adapters: dict[str, LoraAdapter]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for target, a in sorted(adapters.items()):
        out[f"{target}.lora_A"] = a.A
        out[f"{target}.lora_B"] = a.B
    return out


def _gini(values: np.ndarray) -> float:
    total = values.sum()
    if total == 0.0:
        return 0.0
    diffs = np.abs(values[:, None] - values[None, :]).sum()
    return float(diffs / (2.0 * values.size * total))


def sparsity_report(adapters: dict[str, LoraAdapter]) -> dict[str, dict]:
    """Per-adapter column norms of B, row norms of A, and a Gini coefficient
    over the per-rank-component magnitudes |b_j| * |a_j|."""
    report: dict[str, dict] = {}
    for target, a in sorted(adapters.items()):
        b_cols = np.linalg.norm(a.B.data, axis=0)
        a_rows = np.linalg.norm(a.A.data, axis=1)
        report[target] = {
            "b_column_norms": b_cols,
            "a_row_norms": a_rows,
            "gini": _gini(b_cols * a_rows),
        }
    return report
