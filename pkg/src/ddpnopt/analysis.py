"""Feedback-policy analysis: singular spectra, leading directions, update norms.

The prediction-layer gain is generally rectangular, so its spectrum is read
as singular values.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ddp_core import RankOneGain
from .errors import DDPError


@dataclass(frozen=True)
class SpectrumReport:
    layer: int
    singular_values: np.ndarray
    effective_rank: int
    threshold: float = 0.01

    def as_dict(self):
        return {"layer": self.layer, "threshold": self.threshold, "effective_rank": self.effective_rank,
                "singular_values": [float(s) for s in self.singular_values]}


def _materialize(K):
    if hasattr(K, "matrix") and callable(K.matrix):
        return np.asarray(K.matrix(), dtype=float)
    return np.asarray(K, dtype=float)


def feedback_spectrum(K, threshold: float = 0.01, layer: int = -1) -> SpectrumReport:
    """Singular values (descending) and ``#{s_i > threshold * s_1}``."""
    if isinstance(K, RankOneGain):
        s1 = float(np.linalg.norm(K.a) * np.linalg.norm(K.b))
        n = min(K.shape)
        if n == 0:
            raise DDPError("empty feedback matrix")
        sv = np.zeros(n)
        sv[0] = s1
    else:
        M = _materialize(K)
        if M.ndim != 2 or M.size == 0:
            raise DDPError("empty feedback matrix")
        sv = np.linalg.svd(M, compute_uv=False)
    top = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > threshold * top)) if top > 0 else 0
    return SpectrumReport(layer, sv, rank, threshold)


def leading_right_singular_vector(K) -> np.ndarray:
    """Unit ``v`` maximising ``|K v|``; sign chosen so the largest-magnitude entry is positive."""
    if isinstance(K, RankOneGain):
        if not np.any(K.a) or not np.any(K.b):
            raise DDPError("leading direction of a zero matrix is undefined")
        v = K.b / np.linalg.norm(K.b)
    else:
        M = _materialize(K)
        if M.size == 0 or not np.any(M):
            raise DDPError("leading direction of a zero matrix is undefined")
        v = np.linalg.svd(M)[2][0]
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v.copy()


def update_decomposition(metrics_stream):
    """Per-layer series of ``|k|``, ``|K dx|`` and their ratio, one entry per step.

    Returns a dict mapping layer index to a dict of equal-length lists.
    The ratio is ``inf`` where ``|k| = 0`` but the feedback is not, and ``0``
    where both vanish.
    """
    out = {}
    for m in metrics_stream:
        for t, (kn, fn) in enumerate(zip(m.k_norms, m.feedback_norms)):
            d = out.setdefault(t, {"k_norm": [], "feedback_norm": [], "ratio": []})
            d["k_norm"].append(kn)
            d["feedback_norm"].append(fn)
            if kn > 0:
                d["ratio"].append(fn / kn)
            else:
                d["ratio"].append(float("inf") if fn > 0 else 0.0)
    return out


def fmt(x) -> str:
    return "%.17g" % x


def write_spectrum_csv(reports, path, checkpoints=None):
    """One row per report: checkpoint, layer, effective_rank, then ``sv_0 .. sv_{n-1}``."""
    n = max((len(r.singular_values) for r in reports), default=0)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "layer", "effective_rank"] + [f"sv_{i}" for i in range(n)])
        for j, r in enumerate(reports):
            ck = "" if checkpoints is None else checkpoints[j]
            svs = [fmt(s) for s in r.singular_values] + [""] * (n - len(r.singular_values))
            w.writerow([ck, r.layer, r.effective_rank] + svs)


def export_vector_json(v, path, layer: int, shape=None, **meta):
    """Raw leading direction plus layer metadata, for external visualisation."""
    doc = {"layer": layer, "shape": list(shape) if shape is not None else [len(v)],
           "vector": [float(x) for x in v]}
    doc.update(meta)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def reports_to_json(reports) -> str:
    return json.dumps([r.as_dict() for r in reports], indent=2, sort_keys=True)
