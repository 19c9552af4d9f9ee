"""Per-vertex error reports against ground-truth mesh sequences."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import atomic_write_text, dump_json

CM = 100.0


@dataclass
class MetricsReport:
    per_vertex: np.ndarray  # (T, N) meters
    baseline_per_vertex: np.ndarray | None = None

    @property
    def per_frame_mean(self) -> np.ndarray:
        return self.per_vertex.mean(axis=1)

    @property
    def per_frame_max(self) -> np.ndarray:
        return self.per_vertex.max(axis=1)

    def summary(self) -> dict:
        """Summary in centimeters."""
        e = self.per_vertex
        out = {
            "n_frames": int(e.shape[0]),
            "n_verts": int(e.shape[1]),
            "mean_cm": float(e.mean() * CM),
            "median_cm": float(np.median(e) * CM),
            "max_cm": float(e.max() * CM),
            "per_frame_mean_cm": (self.per_frame_mean * CM).tolist(),
            "per_frame_max_cm": (self.per_frame_max * CM).tolist(),
        }
        if self.baseline_per_vertex is not None:
            b = self.baseline_per_vertex
            out["baseline_mean_cm"] = float(b.mean() * CM)
            out["baseline_max_cm"] = float(b.max() * CM)
            out["improvement_cm"] = out["baseline_mean_cm"] - out["mean_cm"]
        return out


def vertex_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {truth.shape} differ in shape")
    return np.linalg.norm(pred - truth, axis=-1)


def evaluate(pred_frames: np.ndarray, truth_frames: np.ndarray, baseline_frames: np.ndarray | None = None
             ) -> MetricsReport:
    """Frames are (T, N, 3) in meters."""
    base = None if baseline_frames is None else vertex_errors(baseline_frames, truth_frames)
    return MetricsReport(vertex_errors(pred_frames, truth_frames), base)


def write_report(report: MetricsReport, out_dir) -> Path:
    """metrics.json, per_frame.csv and per_vertex.csv (one row per frame, errors in cm)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "metrics.json", dump_json(report.summary()))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "mean_cm", "max_cm"])
    for t, (a, b) in enumerate(zip(report.per_frame_mean, report.per_frame_max)):
        w.writerow([t, f"{a * CM:.6g}", f"{b * CM:.6g}"])
    atomic_write_text(out / "per_frame.csv", buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame"] + [f"v{i}" for i in range(report.per_vertex.shape[1])])
    for t, row in enumerate(report.per_vertex):
        w.writerow([t] + [f"{x * CM:.6g}" for x in row])
    atomic_write_text(out / "per_vertex.csv", buf.getvalue())
    return out
