"""Model pairing: a full-size trainer network and a projected student.

The student never sees raw features. Inputs are hashed to T*d sign
bits (seed-only, no stored matrix) and a small dense head maps those
bits to classes, so its parameter cost is the head alone.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ConfigError
from .nn import Mlp, softmax
from .projection import ProjectionConfig, bits_to_activation, project_bits

BIT_ENCODINGS = ("zero_one", "signed")


@dataclass(frozen=True)
class TrainerConfig:
    """Shape of the full-size network."""

    input_dim: int
    hidden_layers: Tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigError(
                f"need input_dim >= 1 and num_classes >= 2, got "
                f"{self.input_dim} and {self.num_classes}"
            )
        if any(h < 1 for h in self.hidden_layers):
            raise ConfigError(f"hidden sizes must be >= 1: {self.hidden_layers}")

    def sizes(self):
        return [self.input_dim, *self.hidden_layers, self.num_classes]


@dataclass(frozen=True)
class HeadConfig:
    """Shape of the student: projection bits in, classes out."""

    projection: ProjectionConfig
    num_classes: int
    hidden_layers: Tuple[int, ...] = ()
    bit_encoding: str = "zero_one"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need num_classes >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_layers):
            raise ConfigError(f"hidden sizes must be >= 1: {self.hidden_layers}")
        if self.bit_encoding not in BIT_ENCODINGS:
            raise ConfigError(
                f"bit_encoding must be one of {BIT_ENCODINGS}, "
                f"got {self.bit_encoding!r}"
            )

    def sizes(self):
        return [self.projection.nbits, *self.hidden_layers, self.num_classes]


# longer alias for the same shape description
ProjectionHeadConfig = HeadConfig


class JointModel:
    """Trainer and student trained side by side on the same stream."""

    def __init__(self, trainer: Mlp, head: Mlp, head_config: HeadConfig):
        if trainer.output_dim != head.output_dim:
            raise ConfigError(
                f"trainer predicts {trainer.output_dim} classes, "
                f"head predicts {head.output_dim}"
            )
        if head.input_dim != head_config.projection.nbits:
            raise ConfigError(
                f"head expects {head.input_dim} inputs but the projection "
                f"yields {head_config.projection.nbits} bits"
            )
        self.trainer = trainer
        self.head = head
        self.head_config = head_config

    @classmethod
    def init(cls, trainer_cfg: TrainerConfig, head_cfg: HeadConfig,
             seed: int) -> "JointModel":
        if trainer_cfg.num_classes != head_cfg.num_classes:
            raise ConfigError("trainer and head disagree on class count")
        trainer_seq, head_seq = np.random.SeedSequence(seed).spawn(2)
        trainer = Mlp.init(trainer_cfg.sizes(), trainer_seq)
        head = Mlp.init(head_cfg.sizes(), head_seq)
        return cls(trainer, head, head_cfg)

    @property
    def projection(self) -> ProjectionConfig:
        return self.head_config.projection

    def trainer_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.trainer.forward(X))

    def head_proba(self, bit_acts: np.ndarray) -> np.ndarray:
        """Class probabilities from already-encoded bit activations."""
        return softmax(self.head.forward(bit_acts))

    def classify_bits(self, bitvec) -> np.ndarray:
        acts = bits_to_activation(bitvec, self.head_config.bit_encoding)
        return self.head_proba(acts[None, :])[0]


def trainer_forward(model: JointModel, x: np.ndarray):
    """(logits, probabilities, cached activations) for one dense input."""
    x = np.asarray(x, dtype=np.float64)
    logits = model.trainer.forward(x[None, :])[0]
    return logits, softmax(logits), model.trainer.activations


def projection_forward(model: JointModel, x):
    """(logits, probabilities, bits, cached activations) for one sparse input.

    The raw vector is hashed to bits first, so any positive rescaling of
    x gives identical output.
    """
    bits = project_bits(x, model.projection)
    acts = bits_to_activation(bits, model.head_config.bit_encoding)
    logits = model.head.forward(acts[None, :])[0]
    return logits, softmax(logits), bits, model.head.activations


def arch_param_count(sizes, include_biases: bool = True) -> int:
    """Parameter count of a dense stack without building it."""
    total = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        total += fan_in * fan_out + (fan_out if include_biases else 0)
    return total


def parameter_count(net, include_biases: bool = True) -> int:
    """Trainable parameters of an Mlp or a config describing one.

    Projection coefficients are derived from the seed on demand, so a
    head config costs only its dense stack.
    """
    if isinstance(net, Mlp):
        return net.num_params(include_biases)
    return arch_param_count(net.sizes(), include_biases)


def compression_ratio(baseline, proposed, include_biases: bool = True) -> float:
    """Baseline size over proposed size; sizes via parameter_count."""
    num = parameter_count(baseline, include_biases)
    den = parameter_count(proposed, include_biases)
    if den == 0:
        raise ConfigError("proposed model has no parameters")
    return num / den
