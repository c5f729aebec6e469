"""Cross-modal (visible/infrared) contrastive pretraining at desk scale."""

from .autodiff import Tensor, grad_check
from .encoder import EncoderConfig, EncoderOutput, encode, init_params
from .lora import LoraAdapter, LoraConfig, attach, forward_adapted, merge, unmerge
from .pccl import (PseudoLabelMatrix, SimilarityMatrix, loss_iv, loss_mse, loss_nce,
                   loss_pccl, loss_variant_softmax, loss_vv, pseudo_labels, similarity)
from .training import TrainConfig, TrainState, forgetting_experiment, lr_at, train_step

__all__ = [
    "Tensor", "grad_check",
    "EncoderConfig", "EncoderOutput", "encode", "init_params",
    "LoraAdapter", "LoraConfig", "attach", "forward_adapted", "merge", "unmerge",
    "PseudoLabelMatrix", "SimilarityMatrix", "similarity", "pseudo_labels",
    "loss_iv", "loss_vv", "loss_pccl", "loss_mse", "loss_nce", "loss_variant_softmax",
    "TrainConfig", "TrainState", "lr_at", "train_step", "forgetting_experiment",
]
