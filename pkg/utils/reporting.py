"""Run artifacts: metrics JSON, CSV tables and the Markdown report."""

import csv
import json
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from core.cube import class_means, spectral_angle
from core.cube_io import load_cube, load_labels
from core.errors import ReportError
from trainers.evaluation import format_oa, summarize

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

METRICS_FILE = "metrics.json"
REPORT_FILE = "report.md"
SUMMARY_CSV = "summary.csv"
PROBES_CSV = "probes.csv"
CURVES_CSV = "curves.csv"
SYNTH_FILES = ("source.hdr", "source_labels.csv", "target.hdr", "target_labels.csv")


def write_json(path: PathLike, data: dict) -> Path:
    """Sorted keys, two-space indent: identical data gives identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(path: PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def markdown_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(str(h) for h in header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


# === Metrics ===

def _summary_block(values: Sequence[float]) -> Optional[dict]:
    if not values:
        return None
    s = summarize(values)
    return {"mean": s.mean, "std": s.std, "text": s.text, "n": len(s.values)}


def build_metrics(name: str, mode: str, runs: Sequence[dict]) -> dict:
    """Aggregate per-seed results (sorted by seed) into the metrics document."""
    runs = sorted(runs, key=lambda r: r["seed"])
    ok = [r for r in runs if r["status"] == "ok"]
    summary = {"overall_accuracy": _summary_block([r["overall_accuracy"] for r in ok])}

    baseline = [r["baseline_overall_accuracy"] for r in ok if "baseline_overall_accuracy" in r]
    if baseline:
        summary["baseline_overall_accuracy"] = _summary_block(baseline)

    probe_ids: list[str] = []
    for r in ok:
        probe_ids.extend(k for k in r.get("probes", {}) if k not in probe_ids)
    if probe_ids:
        summary["probes"] = {pid: _summary_block([r["probes"][pid] for r in ok if pid in r.get("probes", {})])
                             for pid in probe_ids}

    return {
        "name": name,
        "mode": mode,
        "seeds": [r["seed"] for r in runs],
        "failed": [r["seed"] for r in runs if r["status"] != "ok"],
        "runs": runs,
        "summary": summary,
    }


# === Report ===

def _required_artifacts(run_dir: Path, metrics: dict) -> list[str]:
    missing = []
    for run in metrics.get("runs", []):
        for rel in run.get("artifacts", []):
            if not (run_dir / rel).exists():
                missing.append(rel)
    return missing


def render_report(run_dir: PathLike) -> str:
    """Write report.md, summary.csv and, when present, probes.csv and curves.csv.

    Raises ReportError listing whatever is missing.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError([str(run_dir)])
    metrics_path = run_dir / METRICS_FILE
    if not metrics_path.is_file():
        if all((run_dir / f).is_file() for f in SYNTH_FILES):
            return render_synth_summary(run_dir)
        raise ReportError([METRICS_FILE])

    metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
    missing = _required_artifacts(run_dir, metrics)
    if missing:
        raise ReportError(missing)

    summary = metrics.get("summary", {})
    sections = [f"# {metrics['name']} ({metrics['mode']})", ""]

    rows = []
    oa = summary.get("overall_accuracy")
    rows.append([metrics["mode"], oa["text"] if oa else "failed", len(metrics["seeds"]) - len(metrics["failed"])])
    baseline = summary.get("baseline_overall_accuracy")
    if baseline:
        rows.append(["source only", baseline["text"], baseline["n"]])
    write_csv(run_dir / SUMMARY_CSV, ["method", "overall_accuracy", "seeds"], rows)
    sections += ["## Overall accuracy (%)", "", markdown_table(["Method", "OA", "Seeds"], rows), ""]

    per_seed = []
    for run in metrics["runs"]:
        if run["status"] == "ok":
            per_seed.append([run["seed"], format_oa(run["overall_accuracy"]),
                             f"{100 * run['average_accuracy']:.1f}",
                             "" if run.get("kappa") is None else f"{run['kappa']:.3f}"])
        else:
            per_seed.append([run["seed"], "failed", "", run.get("error", "")])
    sections += ["## Per seed", "", markdown_table(["Seed", "OA", "AA", "Kappa / error"], per_seed), ""]

    probes = summary.get("probes")
    if probes:
        ids = list(probes)
        write_csv(run_dir / PROBES_CSV, ["layer", "overall_accuracy", "mean", "std"],
                  [[pid, probes[pid]["text"], probes[pid]["mean"], probes[pid]["std"]] for pid in ids])
        sections += ["## Alignment-layer probes (%)", "",
                     markdown_table(ids, [[probes[pid]["text"] for pid in ids]]), ""]

    curve_rows = []
    for run in metrics["runs"]:
        curve = run.get("curve")
        if curve:
            curve_rows += [[run["seed"], p["round"], p["labels_used"], f"{p['overall_accuracy']:.6f}"] for p in curve]
    if curve_rows:
        write_csv(run_dir / CURVES_CSV, ["seed", "round", "labels_used", "overall_accuracy"], curve_rows)
        sections += ["## Learning curves", "", render_curves(metrics["runs"]), ""]

    if metrics["failed"]:
        sections += [f"Failed seeds: {', '.join(str(s) for s in metrics['failed'])}", ""]

    text = "\n".join(sections)
    (run_dir / REPORT_FILE).write_text(text, encoding="utf-8")
    logger.info("Report written to %s", run_dir / REPORT_FILE)
    return text


def render_curves(runs: Sequence[dict]) -> str:
    """Median OA over seeds at each labels_used value."""
    by_labels: dict[int, list[float]] = {}
    for run in runs:
        for point in run.get("curve") or []:
            by_labels.setdefault(point["labels_used"], []).append(point["overall_accuracy"])
    rows = [[n, f"{100 * float(np.median(v)):.1f}", len(v)] for n, v in sorted(by_labels.items())]
    return markdown_table(["Labels", "Median OA", "Seeds"], rows)


def render_synth_summary(data_dir: PathLike) -> str:
    """Per-class spectral angle between domains of a generated scene pair.

    Angles are only defined when both cubes share one band grid.
    """
    data_dir = Path(data_dir)
    src_cube, tgt_cube = load_cube(data_dir / "source.hdr"), load_cube(data_dir / "target.hdr")
    src_labels = load_labels(data_dir / "source_labels.csv")
    tgt_labels = load_labels(data_dir / "target_labels.csv")

    lines = [f"# Scene pair in {data_dir}", "",
             f"- source: {src_cube.height}x{src_cube.width}, {src_cube.bands} bands, {src_cube.kind}",
             f"- target: {tgt_cube.height}x{tgt_cube.width}, {tgt_cube.bands} bands, {tgt_cube.kind}", ""]

    same_grid = (src_cube.bands == tgt_cube.bands
                 and np.allclose(src_cube.wavelengths_nm, tgt_cube.wavelengths_nm))
    if same_grid:
        src_means, tgt_means = class_means(src_cube, src_labels), class_means(tgt_cube, tgt_labels)
        rows = []
        for c in sorted(src_means):
            if c in tgt_means:
                angle = spectral_angle(src_means[c], tgt_means[c])
                rows.append([c, src_labels.class_names[c], f"{angle:.4f}"])
        write_csv(data_dir / SUMMARY_CSV, ["class_id", "name", "spectral_angle"], rows)
        lines += ["## Class-mean spectral angle (rad)", "", markdown_table(["Class", "Name", "Angle"], rows)]
    else:
        lines.append("Band grids differ; class-mean angles are not defined.")

    text = "\n".join(lines) + "\n"
    (data_dir / REPORT_FILE).write_text(text, encoding="utf-8")
    return text


def write_features_csv(path: PathLike, features: np.ndarray, labels: np.ndarray, domain: str) -> Path:
    """One row per sample: f0..f{d-1}, label, domain."""
    features = np.asarray(features)
    header = [f"f{i}" for i in range(features.shape[1])] + ["label", "domain"]
    rows = ([repr(float(v)) for v in row] + [int(label), domain] for row, label in zip(features, labels))
    return write_csv(path, header, list(rows))
