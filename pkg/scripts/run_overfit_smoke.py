#!/usr/bin/env python3
"""Sanity experiment: overfit the contrastive objective on 4 fixed pairs.

A healthy setup drops the loss by well over half in 50 full-batch steps.
"""

import argparse

from irvis.autodiff import Tensor
from irvis.encoder import EncoderConfig, init_params
from irvis.training import (TrainConfig, init_state, make_pretrain_pairs,
                            train_step)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    enc_cfg = EncoderConfig(seed=7)
    teacher = init_params(enc_cfg)
    for t in teacher.values():
        t.requires_grad = False
    student = {k: Tensor(t.data.copy(), requires_grad=True)
               for k, t in teacher.items()}
    state = init_state(student)
    cfg = TrainConfig(epochs=args.steps, warmup_epochs=0, base_lr=args.lr,
                      weight_decay=0.0, batch_size=4, steps_per_epoch=1)
    batch = make_pretrain_pairs(4, seed=args.seed)

    first = None
    for step in range(args.steps):
        m = train_step(state, batch, teacher, enc_cfg, cfg)
        if first is None:
            first = m["loss"]
        if step % 10 == 0 or step == args.steps - 1:
            print(f"step {m['step']:>3}  lr {m['lr']:.5f}  loss {m['loss']:.4f}")
    print(f"reduction: {100 * (1 - m['loss'] / first):.1f}% "
          f"({first:.4f} -> {m['loss']:.4f})")


if __name__ == "__main__":
    main()
