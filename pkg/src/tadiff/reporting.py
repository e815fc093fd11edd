"""Run-directory reporting: consolidates CSV outputs into a plain-text
summary and renders companion figures to PNG files."""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import load_manifest
from .errors import DataError

SUMMARY_NAME = "summary.txt"


def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def _fmt_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    for row in rows:
        lines.append(
            "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
        )
    return "\n".join(lines)


def _plot_loss(path_csv: str, out_png: str) -> None:
    header, rows = _read_csv(path_csv)
    epochs = [int(r[0]) for r in rows]
    losses = [float(r[1]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, losses, marker="o", color="#1f6f8b")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_title("Training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def _plot_ablation(path_csv: str, out_png: str) -> None:
    header, rows = _read_csv(path_csv)
    protocols = sorted({r[0] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 3.4))
    width = 0.8 / max(len(protocols), 1)
    labels = [f"noise {r[1]}\ndenoise {r[2]}"
              for r in rows if r[0] == protocols[0]]
    x = np.arange(len(labels))
    for k, protocol in enumerate(protocols):
        vals = [float(r[3]) for r in rows if r[0] == protocol]
        ax.bar(x + k * width, vals, width=width * 0.9, label=protocol)
    ax.set_xticks(x + width * (len(protocols) - 1) / 2)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("avg AP")
    ax.set_title("Refinement toggle ablation (median over seeds)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def _plot_sweep(path_csv: str, out_png: str) -> None:
    header, rows = _read_csv(path_csv)
    steps = [int(r[1]) for r in rows]
    aps = [float(r[2]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, aps, marker="s", color="#8b1f6f")
    ax.set_xlabel("denoising steps")
    ax.set_ylabel("avg AP")
    ax.set_title("Effect of step count")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def _plot_segment_ratios(manifest_path: str, out_png: str) -> None:
    videos = load_manifest(manifest_path)
    ratios = [
        (s.end_sec - s.start_sec) / v.duration_sec
        for v in videos for s in v.segments
    ]
    if not ratios:
        return
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(ratios, bins=20, range=(0.0, 1.0), color="#3a7d44",
            edgecolor="white")
    ax.set_xlabel("segment duration / video duration")
    ax.set_ylabel("segments")
    ax.set_title("Manipulated-segment duration ratios")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def write_report(run_dir: str) -> str:
    """Aggregate everything recognizable in ``run_dir``; returns the
    summary path.  Raises if the directory does not exist or holds nothing
    reportable."""
    if not os.path.isdir(run_dir):
        raise DataError(f"report: run directory {run_dir} does not exist")
    sections: list[str] = []
    figures: list[str] = []

    resolved = os.path.join(run_dir, "resolved_config.json")
    if os.path.exists(resolved):
        with open(resolved, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        sections.append(f"config sha256: {doc.get('config_sha256', '?')}")

    results = os.path.join(run_dir, "results.csv")
    if os.path.exists(results):
        header, rows = _read_csv(results)
        sections.append("== results ==\n" + _fmt_table(header, rows))

    ablation = os.path.join(run_dir, "ablation.csv")
    if os.path.exists(ablation):
        header, rows = _read_csv(ablation)
        sections.append("== ablation ==\n" + _fmt_table(header, rows))
        png = os.path.join(run_dir, "ablation.png")
        _plot_ablation(ablation, png)
        figures.append(png)

    sweep = os.path.join(run_dir, "sweep.csv")
    if os.path.exists(sweep):
        header, rows = _read_csv(sweep)
        sections.append("== step sweep ==\n" + _fmt_table(header, rows))
        png = os.path.join(run_dir, "sweep.png")
        _plot_sweep(sweep, png)
        figures.append(png)

    loss_log = os.path.join(run_dir, "loss_log.csv")
    if os.path.exists(loss_log):
        header, rows = _read_csv(loss_log)
        if rows:
            sections.append(
                f"training epochs: {len(rows)} (final loss {rows[-1][1]})"
            )
        png = os.path.join(run_dir, "loss_curve.png")
        _plot_loss(loss_log, png)
        figures.append(png)

    manifest = os.path.join(run_dir, "manifest.json")
    if os.path.exists(manifest):
        videos = load_manifest(manifest)
        n_seg = sum(len(v.segments) for v in videos)
        sections.append(
            f"dataset: {len(videos)} videos, {n_seg} annotated segments"
        )
        png = os.path.join(run_dir, "segment_ratios.png")
        _plot_segment_ratios(manifest, png)
        if os.path.exists(png):
            figures.append(png)

    if not sections:
        raise DataError(
            f"report: nothing reportable in {run_dir} (no results.csv, "
            f"ablation.csv, sweep.csv, loss_log.csv, or manifest.json)"
        )
    if figures:
        rel = [os.path.basename(f) for f in figures]
        sections.append("figures: " + ", ".join(rel))
    summary_path = os.path.join(run_dir, SUMMARY_NAME)
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("\n\n".join(sections) + "\n")
    return summary_path
