"""Figure rendering for the CLI report paths.

Every figure goes straight to a file (Agg backend, no display) next to the
CSV/JSON it illustrates. PNG metadata is pinned so repeated runs produce
identical bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_PNG_METADATA = {"Software": "cfdistill"}


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def save_training_figure(traces, path, k: int = 20):
    """Validation recall per channel and training loss over epochs."""
    epochs = [t.epoch for t in traces]
    fig, (ax_rec, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.5))
    channels = sorted(traces[0].val) if traces else []
    for ch in channels:
        ax_rec.plot(epochs, [t.val[ch]["recall"] for t in traces], label=ch)
    ax_rec.set_xlabel("epoch")
    ax_rec.set_ylabel(f"validation recall@{k}")
    ax_rec.legend(fontsize=8)
    ax_loss.plot(epochs, [t.losses["total"] for t in traces], color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean batch loss")
    fig.tight_layout()
    _save(fig, path)


def save_pilot_figure(trace, path, k: int = 20):
    """Joint-model channels (dashed) against solo runs (solid)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    palette = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    color_of = {}

    def color(channel):
        if channel not in color_of:
            color_of[channel] = palette[len(color_of) % len(palette)]
        return color_of[channel]

    for label in sorted(trace.runs):
        epochs = trace.runs[label]
        channels = sorted(epochs[0]) if epochs else []
        for ch in channels:
            style = "--" if label == "multimodal" and ch != "full" else "-"
            ax.plot(
                range(len(epochs)),
                [e[ch] for e in epochs],
                style,
                color=color(ch),
                label=f"{label}:{ch}",
                linewidth=1.4,
            )
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"validation recall@{k}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def save_bridge_figure(result, path):
    """Shared gradient factor and per-modality update norms over steps."""
    fig, (ax_b, ax_n) = plt.subplots(1, 2, figsize=(9, 3.5))
    steps = range(result.joint.bridge.size)
    ax_b.plot(steps, result.joint.bridge, label="joint")
    for m, solo in sorted(result.solo.items()):
        ax_b.plot(range(solo.bridge.size), solo.bridge, "--", label=f"{m}-only")
    ax_b.set_xlabel("step")
    ax_b.set_ylabel("shared gradient factor")
    ax_b.legend(fontsize=8)
    for m in result.joint.modalities:
        ax_n.semilogy(steps, result.joint.update_norms[m], label=f"{m} (joint)")
        ax_n.semilogy(steps, result.solo[m].update_norms[m], "--", label=f"{m} (solo)")
    ax_n.set_xlabel("step")
    ax_n.set_ylabel("update-step norm")
    ax_n.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def save_metrics_figure(report, path):
    """Grouped bars: one group per channel, one bar per metric."""
    channels = sorted(report.per_channel)
    metrics = ("recall", "ndcg", "precision")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / len(metrics)
    for j, metric in enumerate(metrics):
        values = [getattr(report.per_channel[ch], metric) for ch in channels]
        ax.bar([i + j * width for i in range(len(channels))], values, width, label=f"{metric}@{report.k}")
    ax.set_xticks([i + width for i in range(len(channels))])
    ax.set_xticklabels(channels)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
