"""Figures for scenario reports, written next to the CSV output."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "mqttauth",
}

SCHEME_COLORS = {"username-password": "#4c72b0", "mutual-tls": "#dd8452", "jwt": "#55a868"}


def _figure(width=5.0, height=3.0):
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(width, height))
        ax = fig.add_subplot(1, 1, 1)
    return fig, ax


def _save(fig, path):
    with matplotlib.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    return path


def plot_chain_cost(series, path):
    fig, ax = _figure()
    xs = [n for n, _ in series]
    ys = [b for _, b in series]
    ax.plot(xs, ys, marker="o", color="#333333")
    for x, y in series:
        ax.annotate(str(y), (x, y), textcoords="offset points", xytext=(0, 6),
                    ha="center", fontsize=7)
    ax.set_xticks(xs)
    ax.set_xlabel("server certificate chain length")
    ax.set_ylabel("handshake bytes")
    ax.set_title("Handshake cost vs. chain length")
    return _save(fig, path)


def plot_handshake_bytes(metrics, path):
    fig, ax = _figure()
    names = sorted(metrics)
    means = [metrics[n].handshake_bytes_mean for n in names]
    lo = [metrics[n].handshake_bytes_mean - metrics[n].handshake_bytes_min for n in names]
    hi = [metrics[n].handshake_bytes_max - metrics[n].handshake_bytes_mean for n in names]
    ax.bar(names, means, yerr=[lo, hi], capsize=3,
           color=[SCHEME_COLORS.get(n, "#888888") for n in names])
    ax.set_ylabel("handshake bytes (mean, min-max)")
    ax.set_title("Handshake size per scheme")
    return _save(fig, path)


def plot_reconnects(reconnect_times, scheme_of, duration, path):
    fig, ax = _figure(height=max(2.0, 0.35 * len(reconnect_times) + 1.2))
    ids = sorted(reconnect_times)
    for row, cid in enumerate(ids):
        ts = [t / 3600 for t in reconnect_times[cid]]
        ax.scatter(ts, [row] * len(ts), marker="|", s=120,
                   color=SCHEME_COLORS.get(scheme_of.get(cid), "#888888"))
    ax.set_yticks(range(len(ids)))
    ax.set_yticklabels(ids)
    ax.set_xlim(0, duration / 3600)
    ax.set_ylim(-0.5, len(ids) - 0.5)
    ax.set_xlabel("simulated time (h)")
    ax.set_title("Reconnects")
    return _save(fig, path)


def plot_entropy(report, path, types=("CONNECT", "PINGREQ")):
    fig, ax = _figure()
    for name in types:
        if name in report:
            h = report[name].entropy
            ax.step(range(len(h)), h, where="mid", label=name)
    ax.set_xlabel("byte offset")
    ax.set_ylabel("entropy (bits)")
    ax.set_title("Per-offset byte entropy")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False)
    return _save(fig, path)


def render_scenario(result, out_dir) -> list[str]:
    """Write every figure for a scenario result; returns the file paths."""
    from .analysis import analyze_trace
    from .transport import C2S

    paths = [
        plot_handshake_bytes(result.metrics, os.path.join(out_dir, "handshake_bytes.png")),
        plot_reconnects(result.reconnect_times, result.scheme_of, result.scenario.duration,
                        os.path.join(out_dir, "reconnects.png")),
    ]
    if result.chain_cost:
        paths.append(plot_chain_cost(result.chain_cost, os.path.join(out_dir, "chain_cost.png")))
    for cid, frames in sorted(result.traces.items()):
        if frames:
            paths.append(plot_entropy(analyze_trace(frames, direction=C2S),
                                      os.path.join(out_dir, "entropy_%s.png" % cid)))
    return paths
