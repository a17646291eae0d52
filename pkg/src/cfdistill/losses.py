"""Scalar training objectives and their margin gradients.

All losses are sums over the batch and return (value, dloss_dmargin). The
log-sigmoid pieces go through softplus, -ln sigmoid(x) = softplus(-x), so
nothing overflows for margins far beyond anything training produces.
Teacher margins are constants everywhere; gradients are taken with respect
to the student margins only.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SD_VARIANTS = ("hinge", "kl", "mse")


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -softplus(-np.asarray(x, dtype=np.float64))


@dataclass
class LossConfig:
    """Weights of the combined objective."""

    lambda_g: float = 1.0
    lambda_kd: float = 0.1
    tau: float = 0.1
    sd_variant: str = "hinge"

    def validate(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature tau must be positive, got {self.tau}")
        if self.lambda_g < 0 or self.lambda_kd < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.sd_variant not in SD_VARIANTS:
            raise ConfigError(f"sd_variant must be one of {SD_VARIANTS}, got {self.sd_variant!r}")


def bpr_loss(margins: np.ndarray) -> tuple:
    """Pairwise ranking loss sum(-ln sigmoid(margin)).

    Gradient per triple is -(1 - sigmoid(margin)).
    """
    margins = np.asarray(margins, dtype=np.float64)
    value = float(np.sum(softplus(-margins)))
    grad = sigmoid(margins) - 1.0
    return value, grad


def specific_distill(teacher: np.ndarray, student: np.ndarray) -> tuple:
    """Hinge on training triples: sum(max(teacher - student, 0)).

    Pushes the student margin past the teacher's rather than toward it; the
    subgradient at a tie is 0.
    """
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    gap = teacher - student
    value = float(np.sum(np.maximum(gap, 0.0)))
    grad = np.where(gap > 0, -1.0, 0.0)
    return value, grad


def temp_sigmoid(margins: np.ndarray, tau: float) -> np.ndarray:
    """sigmoid(margin / tau)."""
    if tau <= 0:
        raise ConfigError(f"temperature tau must be positive, got {tau}")
    return sigmoid(np.asarray(margins, dtype=np.float64) / tau)


def generic_distill(teacher: np.ndarray, student: np.ndarray, tau: float) -> tuple:
    """Cross entropy between tempered teacher and student ranking probabilities.

    With t = sigmoid(teacher/tau) and s = sigmoid(student/tau):
    sum of -(t ln s + (1-t) ln(1-s)), gradient (s - t)/tau per pair.
    """
    if tau <= 0:
        raise ConfigError(f"temperature tau must be positive, got {tau}")
    xt = np.asarray(teacher, dtype=np.float64) / tau
    xs = np.asarray(student, dtype=np.float64) / tau
    t = sigmoid(xt)
    value = float(np.sum(t * softplus(-xs) + (1.0 - t) * softplus(xs)))
    grad = (sigmoid(xs) - t) / tau
    return value, grad


def sd_variant_kl(teacher: np.ndarray, student: np.ndarray, tau: float) -> tuple:
    """KL(teacher || student) over tempered ranking probabilities.

    Nonnegative by Gibbs' inequality; individual terms are clamped at 0 to
    keep float rounding from dipping below.
    """
    if tau <= 0:
        raise ConfigError(f"temperature tau must be positive, got {tau}")
    xt = np.asarray(teacher, dtype=np.float64) / tau
    xs = np.asarray(student, dtype=np.float64) / tau
    t = sigmoid(xt)
    terms = t * (log_sigmoid(xt) - log_sigmoid(xs)) + (1.0 - t) * (
        log_sigmoid(-xt) - log_sigmoid(-xs)
    )
    value = float(np.sum(np.maximum(terms, 0.0)))
    grad = (sigmoid(xs) - t) / tau
    return value, grad


def sd_variant_mse(teacher: np.ndarray, student: np.ndarray) -> tuple:
    """Squared margin gap sum((teacher - student)^2)."""
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    gap = teacher - student
    value = float(np.sum(gap * gap))
    grad = -2.0 * gap
    return value, grad


def specific_variant(name: str):
    """Uniform (teacher, student, tau) -> (value, grad) view of the variants."""
    if name == "hinge":
        return lambda t, s, tau: specific_distill(t, s)
    if name == "kl":
        return sd_variant_kl
    if name == "mse":
        return lambda t, s, tau: sd_variant_mse(t, s)
    raise ConfigError(f"sd_variant must be one of {SD_VARIANTS}, got {name!r}")


def modality_loss(sd: float, gd: float, lambda_g: float) -> float:
    """Combined distillation loss of one modality: lambda_g * generic + specific."""
    return lambda_g * gd + sd


def total_loss(bpr: float, modality_losses: dict, weights: dict, lambda_kd: float) -> float:
    """bpr + lambda_kd * sum_m weights[m] * modality_losses[m].

    The weights are treated as constants; no gradient flows through them.
    """
    return bpr + lambda_kd * sum(weights[m] * modality_losses[m] for m in sorted(modality_losses))
