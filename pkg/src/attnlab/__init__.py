"""Attention-mechanism laboratory: softmax and softmax-free causal attention,
length-scaled softplus attention with ReLU^p re-weighting, a tiny trainable
transformer and the harness for length-extrapolation experiments."""

__version__ = "0.1.0"

from .attention import (  # noqa: F401
    AttentionSpec,
    Mechanism,
    SigmoidBias,
    SoftmaxMode,
    attention_entropy,
    attention_max_gap,
    build_struct_matrices,
    generalized_attention,
    lssa,
    modified_softmax,
    reweight,
    run_attention,
    sigmoid_attention,
    softmax_attention,
)
from .activations import ActivationKind  # noqa: F401
from .model import Checkpoint, ModelConfig  # noqa: F401
from .training import ExperimentReport, TrainConfig  # noqa: F401
