"""Recording and exporting attention observables.

Tracing is observation-only: it reuses the tensors the forward pass already
produced, so enabling it cannot change any output.  Per merge level the trace
holds the channel gates (s_spa / s_sem, shape N x C) and the pixel gates
(m_spa / m_sem, shape N x 1 x H x W) when the fusion variant produces them,
plus the backbone taps and fused pyramid outputs.

Exports: one named TAR0 stream per traced input under ``trace/``, an
aggregate ``summary.csv`` (mean/std/min/max per level and flow), and PGM
heatmaps quantized as round(value * 255) with no per-image renormalization,
so a resting gate of 0.5 renders mid-gray.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tario
from .errors import ConfigurationError
from .model import PyramidClassifier
from .tensor import Tensor, no_grad


@dataclass
class MergeSnapshot:
    level: int
    s_spa: Optional[np.ndarray] = None
    s_sem: Optional[np.ndarray] = None
    m_spa: Optional[np.ndarray] = None
    m_sem: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    input_id: str
    logits: np.ndarray
    merges: List[MergeSnapshot] = field(default_factory=list)
    level_features: List[np.ndarray] = field(default_factory=list)
    pyramid_outputs: List[np.ndarray] = field(default_factory=list)


def trace_forward(model: PyramidClassifier, x: Tensor, input_id: str = "input0") -> Tuple[Tensor, ForwardTrace]:
    """Forward pass plus a snapshot of every attention observable."""
    with no_grad():
        logits, bundle = model.forward_traced(x)
    trace = ForwardTrace(input_id=input_id, logits=logits.data.copy())
    for record in bundle.merges:
        trace.merges.append(
            MergeSnapshot(
                level=record.level,
                s_spa=None if record.s_spa is None else record.s_spa.data.copy(),
                s_sem=None if record.s_sem is None else record.s_sem.data.copy(),
                m_spa=None if record.m_spa is None else record.m_spa.data.copy(),
                m_sem=None if record.m_sem is None else record.m_sem.data.copy(),
            )
        )
    trace.level_features = [t.data.copy() for t in bundle.level_features]
    trace.pyramid_outputs = [t.data.copy() for t in bundle.pyramid_outputs]
    return logits, trace


def trace_records(trace: ForwardTrace) -> Dict[str, np.ndarray]:
    """Flatten a trace into named tensors (``ca/level{i}/{spa|sem}`` etc.)."""
    records: Dict[str, np.ndarray] = {"logits": trace.logits}
    for snap in trace.merges:
        if snap.s_spa is not None:
            records[f"ca/level{snap.level}/spa"] = snap.s_spa
            records[f"ca/level{snap.level}/sem"] = snap.s_sem
        if snap.m_spa is not None:
            records[f"srr/level{snap.level}/spa"] = snap.m_spa
            records[f"srr/level{snap.level}/sem"] = snap.m_sem
    for i, feat in enumerate(trace.level_features, start=1):
        records[f"features/level{i}"] = feat
    for i, out in enumerate(trace.pyramid_outputs, start=1):
        records[f"pyramid/level{i}"] = out
    return records


def export_trace(trace: ForwardTrace, out_dir) -> Path:
    out_dir = Path(out_dir) / "trace"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{trace.input_id}.tnsr"
    tario.save_named(path, trace_records(trace))
    return path


SUMMARY_HEADER = ["kind", "level", "flow", "mean", "std", "min", "max", "count"]


def activation_summary(traces: List[ForwardTrace]) -> List[List[str]]:
    """Aggregate gate statistics per (kind, level, flow) over all traces."""
    if not traces:
        raise ConfigurationError("no traces to summarize")
    pools: Dict[Tuple[str, int, str], List[np.ndarray]] = {}
    for trace in traces:
        for snap in trace.merges:
            for kind, flow, arr in (
                ("ca", "spa", snap.s_spa),
                ("ca", "sem", snap.s_sem),
                ("srr", "spa", snap.m_spa),
                ("srr", "sem", snap.m_sem),
            ):
                if arr is not None:
                    pools.setdefault((kind, snap.level, flow), []).append(arr.ravel())
    rows: List[List[str]] = []
    for (kind, level, flow) in sorted(pools):
        values = np.concatenate(pools[(kind, level, flow)])
        rows.append(
            [
                kind,
                str(level),
                flow,
                f"{values.mean():.17g}",
                f"{values.std():.17g}",
                f"{values.min():.17g}",
                f"{values.max():.17g}",
                str(values.size),
            ]
        )
    return rows


def write_summary_csv(rows: List[List[str]], path) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(rows)


def heatmap_to_pgm_bytes(heatmap: np.ndarray) -> bytes:
    """8-bit binary PGM of a 2-D map in [0,1]; quantization is round(v*255)."""
    if heatmap.ndim != 2:
        raise ConfigurationError(f"heatmap must be 2-D, got shape {heatmap.shape}")
    levels = np.clip(np.rint(heatmap * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{heatmap.shape[1]} {heatmap.shape[0]}\n255\n".encode("ascii")
    return header + levels.tobytes()


def save_heatmap_pgm(path, heatmap: np.ndarray) -> None:
    with open(path, "wb") as fp:
        fp.write(heatmap_to_pgm_bytes(heatmap))


def export_heatmaps(trace: ForwardTrace, out_dir) -> List[Path]:
    """One PGM per (merge level, flow, batch item) holding the pixel gates."""
    out_dir = Path(out_dir) / "heatmaps"
    written: List[Path] = []
    for snap in trace.merges:
        for flow, maps in (("spa", snap.m_spa), ("sem", snap.m_sem)):
            if maps is None:
                continue
            out_dir.mkdir(parents=True, exist_ok=True)
            for n in range(maps.shape[0]):
                path = out_dir / f"{trace.input_id}_level{snap.level}_{flow}_{n}.pgm"
                save_heatmap_pgm(path, maps[n, 0])
                written.append(path)
    return written
