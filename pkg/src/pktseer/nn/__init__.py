from .layers import (
    ModelConfig,
    ModelParams,
    attention,
    attention_weights,
    autoregressive_nll,
    causal_mask,
    classification_loss,
    decoder_forward,
    embed,
    encoder_forward,
    lm_logits,
    mlm_loss,
    multi_head_attention,
    transformer_block,
)
from .optim import Adam, adam_step
from .tensor import Tensor, backward, no_grad, precision

__all__ = [
    "Adam",
    "ModelConfig",
    "ModelParams",
    "Tensor",
    "adam_step",
    "attention",
    "attention_weights",
    "autoregressive_nll",
    "backward",
    "causal_mask",
    "classification_loss",
    "decoder_forward",
    "embed",
    "encoder_forward",
    "lm_logits",
    "mlm_loss",
    "multi_head_attention",
    "no_grad",
    "precision",
    "transformer_block",
]
