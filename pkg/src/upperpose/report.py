"""Delimited report/trace files and the matplotlib figures rendered next to
them. All outputs are plain files; field order is documented here and fixed."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport

TRACE_HEADER = "step\tl_param\tl_kpts\tl_bbox\ttotal"
REPORT_HEADER = "\t".join(MetricReport.FIELDS)


def write_trace(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for step, lp, lk, lb, total in rows:
            fh.write(f"{step}\t{lp:.9g}\t{lk:.9g}\t{lb:.9g}\t{total:.9g}\n")


def plot_trace(path, rows) -> None:
    rows = np.array([r for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = ["param", "kpts", "bbox", "total"]
    for col, label in zip(range(1, 5), labels):
        ax.plot(rows[:, 0], rows[:, col], label=label,
                lw=2 if label == "total" else 1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report_table(report: MetricReport) -> str:
    lines = [
        "            All       Hand      Face",
        f"MPVPE      {report.mpvpe_all:8.2f}  {report.mpvpe_hand:8.2f}  {report.mpvpe_face:8.2f}",
        f"PA-MPVPE   {report.pa_mpvpe_all:8.2f}  {report.pa_mpvpe_hand:8.2f}  {report.pa_mpvpe_face:8.2f}",
        "(millimeters)",
    ]
    return "\n".join(lines)


def write_report(path_tsv, report: MetricReport) -> None:
    with open(path_tsv, "w") as fh:
        fh.write(REPORT_HEADER + "\n")
        fh.write("\t".join(f"{v:.6f}" for v in report.as_row()) + "\n")


def plot_report(path, report: MetricReport, title: str = "evaluation") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(3)
    width = 0.35
    ax.bar(x - width / 2, [report.mpvpe_all, report.mpvpe_hand, report.mpvpe_face],
           width, label="MPVPE")
    ax.bar(x + width / 2, [report.pa_mpvpe_all, report.pa_mpvpe_hand,
                           report.pa_mpvpe_face], width, label="PA-MPVPE")
    ax.set_xticks(x, ["All", "Hand", "Face"])
    ax.set_ylabel("mm")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_table(reports: dict[str, list[MetricReport]]) -> str:
    lines = ["method\tseed\t" + REPORT_HEADER]
    for label, per_seed in reports.items():
        for k, rep in enumerate(per_seed):
            lines.append(label + f"\t{k}\t"
                         + "\t".join(f"{v:.4f}" for v in rep.as_row()))
    return "\n".join(lines) + "\n"


def plot_ablation(path, reports: dict[str, list[MetricReport]]) -> None:
    labels = list(reports)
    means = [np.mean([r.mpvpe_all for r in reports[k]]) for k in labels]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, means, color=["#888888", "#bbbb66", "#3366aa"])
    ax.set_ylabel("MPVPE-All (mm)")
    ax.set_title("ablation (mean over seeds)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_image(path, image_chw: np.ndarray) -> None:
    import matplotlib.image as mpimg
    mpimg.imsave(path, np.clip(image_chw.transpose(1, 2, 0), 0, 1))


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
