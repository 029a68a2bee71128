"""Report emission: delimited outputs plus the matplotlib figures rendered
next to them.

Everything written here is deterministic for fixed inputs: floats are
serialised with repr (shortest round-trip form) and SVG output is pinned via
a fixed hash salt with no embedded creation date, so regenerated artifacts
are byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import metrics as mx  # noqa: E402
from .frontend import window_trace_rows  # noqa: E402
from .scenes import CLASS_NAMES  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "asakit"


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str | Path, header: list[str], rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def save_figure(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# metric tables
# ---------------------------------------------------------------------------

def metrics_table(out_path: str | Path, scene_rows: dict[str, list],
                  aggregates: dict[str, mx.MetricsReport]) -> Path:
    """One row per scene plus an aggregate row. ``scene_rows`` maps a stage
    label ('net1', 'net2') to [(scene_id, MetricsReport)]; with two stages the
    columns sit side by side."""
    stages = list(scene_rows)
    header = ["scene_id"]
    for stage in stages:
        header += [f"{field}_{stage}" for field in mx.MetricsReport.FIELDS]
    ids = [sid for sid, _ in scene_rows[stages[0]]]
    by_stage = {s: dict(scene_rows[s]) for s in stages}
    rows = []
    for sid in ids:
        row = [sid]
        for stage in stages:
            row += by_stage[stage][sid].as_row()
        rows.append(row)
    agg_row = ["AGGREGATE"]
    for stage in stages:
        agg_row += aggregates[stage].as_row()
    rows.append(agg_row)
    return write_csv(out_path, header, rows)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def window_trace_report(out_dir: str | Path, wp, stft_cfg) -> tuple[Path, Path]:
    """CSV of per-frame window parameters per microphone plus the trace
    figure (width in ms over time)."""
    out_dir = Path(out_dir)
    rows = window_trace_rows(wp, stft_cfg)
    csv_path = write_csv(out_dir / "window_trace.csv",
                         ["mic", "frame", "t_s", "mu_ms", "sigma_ms"], rows)
    mu, sigma = wp.mu.data, wp.sigma.data
    t_axis = np.arange(mu.shape[1]) * stft_cfg.hop / stft_cfg.sample_rate
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for m in range(mu.shape[0]):
        axes[0].plot(t_axis, sigma[m] * 1000.0 / stft_cfg.sample_rate, label=f"mic {m}")
        axes[1].plot(t_axis, mu[m] * 1000.0 / stft_cfg.sample_rate, label=f"mic {m}")
    axes[0].set_ylabel("window width (ms)")
    axes[1].set_ylabel("window offset (ms)")
    axes[1].set_xlabel("time (s)")
    axes[0].legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return csv_path, save_figure(fig, out_dir / "window_trace.svg")


def attention_map_report(out_dir: str | Path, maps: dict) -> list[Path]:
    """One CSV and one heatmap per (object, branch) attention map."""
    out_dir = Path(out_dir)
    paths = []
    for (obj_idx, branch), mat in sorted(maps.items()):
        stem = f"attention_obj{obj_idx}_{branch}"
        header = [f"k{j}" for j in range(mat.shape[1])]
        paths.append(write_csv(out_dir / f"{stem}.csv", header, mat.tolist()))
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(mat, aspect="auto", origin="lower", cmap="viridis")
        ax.set_xlabel("key frame")
        ax.set_ylabel("query frame")
        ax.set_title(f"object {obj_idx}, {branch}")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        paths.append(save_figure(fig, out_dir / f"{stem}.svg"))
    return paths


def kernel_similarity_report(out_dir: str | Path, doa_kernel: np.ndarray,
                             direct_kernel: np.ndarray,
                             reverb_kernel: np.ndarray | None) -> Path:
    """Cosine similarity between channel-aligned first conv kernels of the
    DoA decoder and the audio decoders; one row per channel pair."""
    rows = []
    pairs = [("doa_vs_direct", direct_kernel)]
    if reverb_kernel is not None:
        pairs.append(("doa_vs_reverb", reverb_kernel))
    for name, other in pairs:
        cos = mx.kernel_cosine_similarity(doa_kernel, other)
        rows += [[name, ch, val] for ch, val in enumerate(cos)]
    return write_csv(Path(out_dir) / "kernel_cosine.csv",
                     ["pair", "channel", "cosine"], rows)


def le_histogram_report(out_dir: str | Path, angles) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    edges, counts = mx.le_histogram(angles)
    rows = [[edges[i], edges[i + 1], int(counts[i])] for i in range(len(counts))]
    csv_path = write_csv(out_dir / "le_histogram.csv",
                         ["bin_lo_deg", "bin_hi_deg", "count"], rows)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
           edgecolor="black", linewidth=0.3)
    ax.set_xlabel("localisation error (deg)")
    ax.set_ylabel("matched pairs")
    fig.tight_layout()
    return csv_path, save_figure(fig, out_dir / "le_histogram.svg")


def recall_report(out_dir: str | Path, recall: np.ndarray) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    rows = []
    for cid, val in enumerate(recall):
        name = CLASS_NAMES[cid] if cid < len(CLASS_NAMES) else f"class_{cid}"
        rows.append([cid, name, "NA" if np.isnan(val) else repr(float(val))])
    csv_path = write_csv(out_dir / "per_class_recall.csv",
                         ["class_id", "class_name", "recall"], rows)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    shown = np.where(np.isnan(recall), 0.0, recall)
    ax.bar(np.arange(len(recall)), shown)
    ax.set_xticks(np.arange(len(recall)))
    ax.set_xticklabels([CLASS_NAMES[i] if i < len(CLASS_NAMES) else str(i)
                        for i in range(len(recall))], rotation=60, ha="right",
                       fontsize=7)
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    return csv_path, save_figure(fig, out_dir / "per_class_recall.svg")
