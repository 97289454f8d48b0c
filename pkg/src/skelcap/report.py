"""Report rendering: one JSON bundle, flat CSVs, and summary figures.

Rendering is deterministic for a fixed report dict (sorted keys, fixed figure
geometry, pinned PNG metadata) so reruns of the same experiment produce
byte-identical artifacts.
"""

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

ROW_FIELDS = (
    "label",
    "mode",
    "use_image",
    "n_examples",
    "cider",
    "hallucination_rate",
    "precision",
    "recall",
    "f1",
    "mean_caption_length",
    "length_spearman",
)

EXAMPLE_FIELDS = ("image_id", "label", "caption", "skeleton", "reference", "cider")

PNG_META = {"Software": "skelcap"}  # keep matplotlib's version string out of the bytes
FIG_KW = {"dpi": 120}


def _flat_row(row):
    out = {k: row.get(k) for k in ROW_FIELDS if k in row}
    prf = row.get("skeleton_prf")
    for k in ("precision", "recall", "f1"):
        out[k] = None if prf is None else prf[k]
    return out


def write_rows_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(_flat_row(row))


def write_examples_csv(per_example, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EXAMPLE_FIELDS)
        writer.writeheader()
        for row in per_example:
            writer.writerow({k: row[k] for k in EXAMPLE_FIELDS})


def write_log_csv(log_rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("step", "train_loss", "val_loss", "lr"))
        writer.writeheader()
        for row in log_rows:
            writer.writerow(row)


def _save(fig, path):
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def loss_figure(logs, path):
    fig, ax = plt.subplots(figsize=(6, 4), **FIG_KW)
    for name in sorted(logs):
        rows = logs[name]
        if not rows:
            continue
        steps = [r["step"] for r in rows]
        ax.plot(steps, [r["train_loss"] for r in rows], label=f"{name} train")
        ax.plot(steps, [r["val_loss"] for r in rows], linestyle="--", label=f"{name} val")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training and validation loss")
    if ax.lines:
        ax.legend(fontsize=7)
    _save(fig, path)


def score_figure(rows, path):
    labels = [r["label"] for r in rows]
    x = range(len(rows))
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 6), sharex=True, **FIG_KW)
    top.bar(x, [r["cider"] for r in rows], color="#4878d0")
    top.set_ylabel("CIDEr")
    bottom.bar(x, [r["hallucination_rate"] for r in rows], color="#d65f5f")
    bottom.set_ylabel("hallucination rate")
    bottom.set_xticks(list(x))
    bottom.set_xticklabels(labels, rotation=20, ha="right", fontsize=7)
    fig.suptitle("caption quality by condition")
    fig.tight_layout()
    _save(fig, path)


def length_figure(per_example, path):
    by_label = {}
    for row in per_example:
        by_label.setdefault(row["label"], []).append(len(row["caption"].split()))
    fig, ax = plt.subplots(figsize=(6, 4), **FIG_KW)
    top = max((max(v) for v in by_label.values() if v), default=1)
    bins = range(0, top + 2)
    for label in sorted(by_label):
        ax.hist(by_label[label], bins=bins, histtype="step", label=label)
    ax.set_xlabel("caption length (tokens)")
    ax.set_ylabel("images")
    ax.set_title("decoded caption lengths")
    if by_label:
        ax.legend(fontsize=7)
    _save(fig, path)


def prf_figure(rows, path):
    rows = [r for r in rows if r.get("skeleton_prf")]
    if not rows:
        return False
    fig, ax = plt.subplots(figsize=(6, 4), **FIG_KW)
    width = 0.25
    for i, (key, color) in enumerate(
        (("precision", "#4878d0"), ("recall", "#d65f5f"), ("f1", "#6acc64"))
    ):
        xs = [j + (i - 1) * width for j in range(len(rows))]
        ax.bar(xs, [r["skeleton_prf"][key] for r in rows], width=width, color=color, label=key)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["label"] for r in rows], rotation=20, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_title("skeleton overlap with gold")
    ax.legend(fontsize=7)
    _save(fig, path)
    return True


def write_report(report, logs, out_dir):
    """Render the full bundle under out_dir; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    paths = []

    path = os.path.join(out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    paths.append(path)

    path = os.path.join(out_dir, "report.csv")
    write_rows_csv(report["rows"], path)
    paths.append(path)

    path = os.path.join(out_dir, "examples.csv")
    write_examples_csv(report["per_example"], path)
    paths.append(path)

    for name in sorted(logs):
        path = os.path.join(out_dir, f"loss_{name}.csv")
        write_log_csv(logs[name], path)
        paths.append(path)

    path = os.path.join(fig_dir, "loss_curves.png")
    loss_figure(logs, path)
    paths.append(path)
    path = os.path.join(fig_dir, "scores.png")
    score_figure(report["rows"], path)
    paths.append(path)
    path = os.path.join(fig_dir, "caption_lengths.png")
    length_figure(report["per_example"], path)
    paths.append(path)
    path = os.path.join(fig_dir, "skeleton_prf.png")
    if prf_figure(report["rows"], path):
        paths.append(path)
    return paths
