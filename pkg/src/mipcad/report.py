"""Text tables, FROC CSV and curve images for evaluation results."""

from __future__ import annotations

import csv
from pathlib import Path

from .evaluation import OPERATING_POINTS, SIZE_BINS, FrocResult, size_bin_label

# Full-dataset results of the published system (888 scans, 1186 nodules).
# They need GPU-scale training and are shown for layout comparison only.
REFERENCE_STAGE1 = [
    {"stream": "Stream 1", "thickness": "1 mm", "by_size": [719, 213, 50], "hits": 982, "sensitivity": 0.8280, "fps": 12940, "fps_per_scan": 14.57},
    {"stream": "Stream 2", "thickness": "5 mm", "by_size": [774, 218, 50], "hits": 1042, "sensitivity": 0.8786, "fps": 9792, "fps_per_scan": 11.03},
    {"stream": "Stream 3", "thickness": "10 mm", "by_size": [801, 216, 50], "hits": 1067, "sensitivity": 0.8997, "fps": 6895, "fps_per_scan": 7.76},
    {"stream": "Stream 4", "thickness": "15 mm", "by_size": [787, 215, 50], "hits": 1052, "sensitivity": 0.8870, "fps": 5602, "fps_per_scan": 6.31},
    {"stream": "Fusion", "thickness": "-", "by_size": [856, 225, 50], "hits": 1131, "sensitivity": 0.9536, "fps": 16985, "fps_per_scan": 19.13},
]
REFERENCE_FROC = {"system": "reference (888 scans)", "scans": 888, "points": {1.0: 0.9267, 2.0: 0.9419}}


def stage1_row(name: str, thickness: str, summary) -> dict:
    labels = [size_bin_label(lo, hi) for lo, hi in SIZE_BINS]
    return {
        "stream": name,
        "thickness": thickness,
        "by_size": [summary.hits_by_size[lab] for lab in labels],
        "hits": summary.hits,
        "sensitivity": summary.sensitivity,
        "fps": summary.false_positives,
        "fps_per_scan": summary.fps_per_scan,
    }


def format_stage1_table(rows, title: str = "Candidate detection stage") -> str:
    head = ["Stream", "Slab", *(f"Detected {size_bin_label(lo, hi)}" for lo, hi in SIZE_BINS), "Detected total", "Sensitivity (%)", "FPs", "FPs/scan"]
    body = [
        [
            r["stream"],
            r["thickness"],
            *(f"{n:,}" for n in r["by_size"]),
            f"{r['hits']:,}",
            f"{100 * r['sensitivity']:.2f}",
            f"{r['fps']:,}",
            f"{r['fps_per_scan']:.2f}",
        ]
        for r in rows
    ]
    return _table(title, head, body)


def format_froc_table(rows, points=(1.0, 2.0), title: str = "Detection performance") -> str:
    """Rows of ``{"system", "scans", "points": {fps_per_scan: sensitivity}}``."""
    head = ["System", "Scans", *(f"Sens. @ {p:g} FP/scan (%)" for p in points)]
    body = []
    for r in rows:
        cells = [r["system"], str(r["scans"])]
        for p in points:
            s = r["points"].get(float(p))
            cells.append("-" if s is None else f"{100 * s:.2f}")
        body.append(cells)
    return _table(title, head, body)


def _table(title: str, head, body) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    line = "  ".join("-" * w for w in widths)
    out = [title, line, "  ".join(h.ljust(w) for h, w in zip(head, widths)), line]
    out += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in body]
    out.append(line)
    return "\n".join(out)


def froc_row(system: str, result: FrocResult) -> dict:
    return {"system": system, "scans": result.scan_count, "points": dict(result.sensitivities)}


def write_froc_csv(result: FrocResult, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fps_per_scan", "sensitivity"])
        for t, (fps, sens) in zip(result.thresholds, result.points):
            w.writerow([repr(float(t)), repr(float(fps)), repr(float(sens))])
    return path


def plot_froc(curves: dict[str, FrocResult], path, operating_points=OPERATING_POINTS) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name, res in curves.items():
        xs = [max(fps, operating_points[0] / 2) for fps, _ in res.points]
        ax.step(xs, [s for _, s in res.points], where="post", label=name)
    ax.set_xscale("log", base=2)
    ax.set_xticks(operating_points)
    ax.set_xticklabels([f"{p:g}" for p in operating_points])
    ax.set_xlim(operating_points[0], operating_points[-1])
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("Average false positives per scan")
    ax.set_ylabel("Sensitivity")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
