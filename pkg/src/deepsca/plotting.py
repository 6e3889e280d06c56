"""Static SVG/PNG figures: rank curves and weight-map / CPA overlays."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "deepsca"


def _save(fig, path):
    fmt = "png" if str(path).lower().endswith(".png") else "svg"
    metadata = {"Date": None} if fmt == "svg" else {"Software": None}
    fig.savefig(path, format=fmt, metadata=metadata)
    plt.close(fig)


def plot_rank_curve(curve, path, title="Average rank", threshold=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    n = curve.n_traces
    ax.fill_between(n, curve.percentile(10), curve.percentile(90), alpha=0.25, label="p10-p90")
    ax.plot(n, curve.mean_rank, lw=1.5, label=f"mean over {curve.repeats} attacks")
    ax.set_xlabel("Number of traces")
    ax.set_ylabel("Average rank")
    if threshold is not None:
        ax.set_title(f"{title} (threshold: {threshold})")
    else:
        ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_weight_map(weight_map, path, trace=None, cpa=None, title="Class gradient weights"):
    """Weight map over the trace extent, with CPA correlation underneath when given."""
    rows = 2 if cpa is not None else 1
    fig, axes = plt.subplots(rows, 1, figsize=(8, 3 * rows), sharex=True, squeeze=False)
    ax = axes[0, 0]
    t = np.arange(len(weight_map.expanded))
    if trace is not None:
        tr = np.asarray(trace, dtype=np.float64)
        span = tr.max() - tr.min()
        ax.plot(t, (tr - tr.min()) / (span if span > 0 else 1.0), color="0.7", lw=0.8, label="trace (scaled)")
    ax.plot(t, weight_map.normalized(), lw=1.2, label="weight (normalized)")
    ax.set_ylabel("weight")
    ax.set_title(title)
    ax.legend(loc="upper right")
    if cpa is not None:
        ax2 = axes[1, 0]
        ax2.plot(t, np.abs(cpa.correlation).max(axis=0), color="0.6", lw=0.8, label="max |corr| over keys")
        if cpa.known_key is not None:
            ax2.plot(t, cpa.known_key_row, lw=1.2, label=f"key 0x{cpa.known_key:02x}")
        ax2.set_ylabel("correlation")
        ax2.legend(loc="upper right")
    axes[-1, 0].set_xlabel("Sample")
    fig.tight_layout()
    _save(fig, path)


def plot_cpa(cpa, path, title="CPA"):
    fig, ax = plt.subplots(figsize=(8, 3))
    t = np.arange(cpa.correlation.shape[1])
    ax.plot(t, cpa.correlation.T, color="0.8", lw=0.4)
    if cpa.known_key is not None:
        ax.plot(t, cpa.known_key_row, color="C3", lw=1.2)
    ax.set_xlabel("Sample")
    ax.set_ylabel("Correlation")
    ax.set_title(f"{title}: {cpa.description}")
    fig.tight_layout()
    _save(fig, path)
