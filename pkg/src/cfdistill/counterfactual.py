"""Per-modality causal effect estimates and distillation re-weighting.

The effect of a modality on one triple's ranking prediction is measured
counterfactually: the margin with all inputs present minus the margin with
that single modality ablated (everything else held fixed). Averaging over a
batch gives the modality's treatment effect; dividing by the frozen
teacher's margin sum on the same batch normalizes away differences in what
each modality can express at best. Modalities that look under-optimized by
this measure get a larger share of the distillation weight.
"""

from dataclasses import dataclass

import numpy as np

EPS = 1e-8


def ite(delta_full: np.ndarray, delta_without: np.ndarray) -> np.ndarray:
    """Individual treatment effects: margin change caused by one modality."""
    delta_full = np.asarray(delta_full, dtype=np.float64)
    delta_without = np.asarray(delta_without, dtype=np.float64)
    if delta_full.shape != delta_without.shape:
        raise ValueError("margin arrays must come from the same batch")
    return delta_full - delta_without


def ate(ite_values: np.ndarray) -> float:
    """Average treatment effect over the batch."""
    ite_values = np.asarray(ite_values, dtype=np.float64)
    if ite_values.size == 0:
        raise ValueError("cannot average treatment effects over an empty batch")
    return float(np.mean(ite_values))


def rho(gamma: float, teacher_margins: np.ndarray) -> float:
    """Effect normalized by the teacher's margin sum on the same batch.

    The denominator is floored at EPS and the result clamped at 0: a
    currently harmful modality (negative effect) reads as maximally
    under-optimized rather than producing a negative ratio.
    """
    denom = max(float(np.sum(np.asarray(teacher_margins, dtype=np.float64))), EPS)
    return max(gamma / denom, 0.0)


def reweight(rhos: dict) -> dict:
    """Distillation weights lambda_m = 1 - rho_m / sum(rho).

    Weights sum to (n_modalities - 1) and emphasize lower rho. If every rho
    is (near) zero there is no signal to compare, and the weights fall back
    to the uniform (n-1)/n.
    """
    if len(rhos) < 2:
        raise ValueError("re-weighting needs at least two modalities")
    total = float(sum(rhos.values()))
    n = len(rhos)
    if total < EPS:
        return {m: (n - 1) / n for m in rhos}
    return {m: 1.0 - rhos[m] / total for m in rhos}


def uniform_weights(modalities) -> dict:
    """The no-reweighting fallback: every modality gets (n-1)/n."""
    mods = list(modalities)
    n = len(mods)
    if n < 2:
        raise ValueError("re-weighting needs at least two modalities")
    return {m: (n - 1) / n for m in mods}


@dataclass
class CausalReport:
    """Per-batch causal summary for every modality."""

    ite_values: dict            # modality -> per-triple effects
    ates: dict                  # modality -> mean effect
    rhos: dict                  # modality -> normalized effect
    lambda_weights: dict        # modality -> distillation weight
    teacher_margin_sums: dict   # modality -> sum of teacher margins

    def to_json_dict(self, include_ite: bool = True) -> dict:
        out = {
            "ate": {m: self.ates[m] for m in sorted(self.ates)},
            "rho": {m: self.rhos[m] for m in sorted(self.rhos)},
            "lambda": {m: self.lambda_weights[m] for m in sorted(self.lambda_weights)},
            "teacher_margin_sum": {m: self.teacher_margin_sums[m] for m in sorted(self.teacher_margin_sums)},
        }
        if include_ite:
            out["ite"] = {m: np.asarray(self.ite_values[m]).tolist() for m in sorted(self.ite_values)}
        return out


def causal_report(delta_full: np.ndarray, delta_without: dict, teacher_margins: dict) -> CausalReport:
    """Assemble effects, normalized effects and weights for one batch.

    delta_without[m] is the student margin with modality m ablated and all
    others intact; teacher_margins[m] comes from the frozen teacher of m on
    the identical batch.
    """
    if set(delta_without) != set(teacher_margins):
        raise ValueError("modality sets of student and teacher margins differ")
    ites, ates_, rhos_, sums = {}, {}, {}, {}
    for m in sorted(delta_without):
        ites[m] = ite(delta_full, delta_without[m])
        ates_[m] = ate(ites[m])
        sums[m] = float(np.sum(np.asarray(teacher_margins[m], dtype=np.float64)))
        rhos_[m] = rho(ates_[m], teacher_margins[m])
    return CausalReport(
        ite_values=ites,
        ates=ates_,
        rhos=rhos_,
        lambda_weights=reweight(rhos_),
        teacher_margin_sums=sums,
    )
