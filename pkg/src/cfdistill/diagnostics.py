"""Desk-scale diagnostics of the modality imbalance phenomenon.

Two experiments. The pilot trains a multimodal model without distillation
next to one uni-modal model per modality and logs per-epoch validation
recall of every channel, exposing how far each modality inside the joint
model lags behind its solo counterpart. The bridge experiment isolates the
mechanism: under the pairwise ranking loss all modalities share the single
gradient factor 1 / (1 + exp(margin)), so a modality that inflates the
margin quickly shrinks everyone else's update steps.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .seeding import subseed, substream
from .trainer import TrainConfig, derive_config, train_student, train_teacher

MULTIMODAL_RUN = "multimodal"


def solo_run_label(modality: str) -> str:
    return f"{modality}-only"


@dataclass
class PilotTrace:
    """Per-epoch validation recall of every run and channel."""

    runs: dict          # run label -> list of {channel: recall}
    best_epochs: dict   # run label -> best validation epoch

    def csv_rows(self) -> list:
        rows = [("run", "epoch", "channel", "recall")]
        for label in sorted(self.runs):
            for epoch, channels in enumerate(self.runs[label]):
                for channel in sorted(channels):
                    rows.append((label, epoch, channel, repr(channels[channel])))
        return rows


def run_pilot(data, features: dict, config: TrainConfig) -> PilotTrace:
    """Train the joint model (no distillation) and one solo model per modality.

    Every sub-run gets its own seed derived from the master seed. The joint
    run logs its full channel and each ablated uni-modal channel; solo runs
    log only their own modality.
    """
    mods = sorted(features)
    if len(mods) < 2:
        raise ConfigError("the pilot compares modalities, need at least two")
    runs, best_epochs = {}, {}

    joint_cfg = derive_config(config, lambda_kd=0.0, seed=subseed(config.seed, "pilot/multimodal"))
    joint = train_student(data, features, {}, joint_cfg)
    runs[MULTIMODAL_RUN] = [
        {ch: t.val[ch]["recall"] for ch in t.val} for t in joint.traces
    ]
    best_epochs[MULTIMODAL_RUN] = joint.best_epoch

    for m in mods:
        solo_cfg = derive_config(config, seed=subseed(config.seed, f"pilot/{solo_run_label(m)}"))
        solo = train_teacher(data, features, m, solo_cfg)
        runs[solo_run_label(m)] = [{m: t.val[m]["recall"]} for t in solo.traces]
        best_epochs[solo_run_label(m)] = solo.best_epoch
    return PilotTrace(runs=runs, best_epochs=best_epochs)


def summarize_pilot(trace: PilotTrace) -> dict:
    """Recall of each channel at its run's best epoch.

    For the joint run that is the epoch with the best full-channel recall,
    which is the model the run would ship; solo runs peak on their own
    channel.
    """
    summary = {}
    for label, epochs in trace.runs.items():
        at_best = epochs[trace.best_epochs[label]]
        summary[label] = dict(sorted(at_best.items()))
    return summary


@dataclass
class BridgeConfig:
    """Toy instance for the shared-gradient experiment.

    Each modality contributes a fixed feature-difference vector whose norm
    is its scale; the trainable state is the combined preference-projection
    vector per modality, started at zero.
    """

    feature_dim: int = 8
    scales: dict = field(default_factory=lambda: {"strong": 10.0, "weak": 1.0})
    lr: float = 1e-3
    steps: int = 250
    seed: int = 0

    def validate(self):
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if len(self.scales) < 2:
            raise ConfigError("the bridge experiment needs at least two modalities")
        if any(s <= 0 for s in self.scales.values()):
            raise ConfigError("feature scales must be positive")
        if self.lr <= 0 or self.steps < 1:
            raise ConfigError("lr must be positive and steps >= 1")


@dataclass
class BridgeTrace:
    """Per-step record of one gradient-descent run on a single triple."""

    label: str
    modalities: list
    margin_shares: dict   # modality -> per-step S^m
    bridge: np.ndarray    # shared factor 1 / (1 + exp(margin))
    update_norms: dict    # modality -> per-step norm of the parameter update


@dataclass
class BridgeResult:
    joint: BridgeTrace
    solo: dict  # modality -> BridgeTrace

    def csv_rows(self) -> list:
        mods = self.joint.modalities
        header = ["run", "step", "bridge"]
        for m in mods:
            header += [f"S_{m}", f"update_norm_{m}"]
        rows = [tuple(header)]
        for label, trace in [("joint", self.joint)] + [
            (solo_run_label(m), self.solo[m]) for m in mods
        ]:
            for t in range(trace.bridge.size):
                row = [label, t, repr(float(trace.bridge[t]))]
                for m in mods:
                    if m in trace.margin_shares:
                        row += [repr(float(trace.margin_shares[m][t])),
                                repr(float(trace.update_norms[m][t]))]
                    else:
                        row += ["", ""]
                rows.append(tuple(row))
        return rows


def _descend(diffs: dict, active: list, lr: float, steps: int) -> BridgeTrace:
    """Gradient descent on -ln sigmoid(margin) for one fixed triple.

    The state is one vector c_m per active modality with margin share
    S^m = c_m . g_m, where g_m is the modality's feature difference. Each
    step records the state, then applies c_m += lr * bridge * g_m, whose
    norm is exactly lr * bridge * |g_m|.
    """
    state = {m: np.zeros_like(diffs[m]) for m in active}
    shares = {m: np.empty(steps) for m in active}
    norms = {m: np.empty(steps) for m in active}
    bridge = np.empty(steps)
    for t in range(steps):
        margin = float(sum(state[m] @ diffs[m] for m in active))
        if margin >= 0:
            e = float(np.exp(-margin))
            b = e / (1.0 + e)
        else:
            b = float(1.0 / (1.0 + np.exp(margin)))
        bridge[t] = b
        for m in active:
            shares[m][t] = state[m] @ diffs[m]
            step_vec = lr * b * diffs[m]
            norms[m][t] = np.linalg.norm(step_vec)
            state[m] += step_vec
    label = "joint" if len(active) > 1 else solo_run_label(active[0])
    return BridgeTrace(
        label=label,
        modalities=sorted(diffs),
        margin_shares=shares,
        bridge=bridge,
        update_norms=norms,
    )


def run_bridge_experiment(config: BridgeConfig) -> BridgeResult:
    """Joint run plus one solo run per modality on the same toy triple."""
    config.validate()
    rng = substream(config.seed, "bridge")
    diffs = {}
    for m in sorted(config.scales):
        v = rng.standard_normal(config.feature_dim)
        diffs[m] = config.scales[m] * v / np.linalg.norm(v)
    mods = sorted(diffs)
    joint = _descend(diffs, mods, config.lr, config.steps)
    solo = {m: _descend(diffs, [m], config.lr, config.steps) for m in mods}
    return BridgeResult(joint=joint, solo=solo)
