"""Attention rollout: aggregate per-layer attention into per-patch saliency
scores and project them back onto the input mesh.

Per layer the residual connection is accounted for by adding the identity
and re-normalizing rows; the layer matrices are then multiplied last-to-
first and the prediction-token row, restricted to patch columns, gives the
scores.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError
from .mesh import TriMesh, save_mesh
from .model import AttentionStack, SiTModel, forward
from .patching import PatchSequence, PatchTable
from .resample import FeatureField

_ROW_TOL = 1e-4


@dataclass
class AttentionMap:
    """patch_scores: non-negative, sums to 1. vertex_field (optional) is
    the [0, 1] max-normalized projection onto the carrier mesh."""
    patch_scores: np.ndarray
    vertex_field: FeatureField | None = None
    provenance: dict = field(default_factory=dict)


def _select_head(matrices: np.ndarray, head_mode) -> np.ndarray:
    if head_mode == "averaged":
        return matrices.mean(axis=1)
    h = int(head_mode)
    if not 0 <= h < matrices.shape[1]:
        raise ValueError(f"head index {h} out of range")
    return matrices[:, h]


def rollout(stack: AttentionStack, head_mode="averaged") -> AttentionMap:
    """Residual-adjusted product of attention matrices; scores are the
    prediction-token row over patch columns, renormalized to sum 1.

    head_mode is "averaged" or a head index (the same head is used at every
    layer). An identity stack means the token never attends outward; that
    degenerate case falls back to uniform scores with a warning.
    """
    a = np.asarray(stack.matrices, dtype=np.float64)
    if a.ndim != 4 or a.shape[2] != a.shape[3]:
        raise ShapeError("attention stack must be (L, heads, T, T)")
    row_err = np.abs(a.sum(axis=-1) - 1.0).max()
    if row_err > _ROW_TOL:
        raise ValidationError(f"attention rows deviate from stochastic by {row_err:.2e}")
    sel = _select_head(a, head_mode)                     # (L, T, T)
    t = sel.shape[-1]
    eye = np.eye(t)
    result = eye
    for l in range(sel.shape[0]):
        adj = sel[l] + eye
        adj /= adj.sum(axis=-1, keepdims=True)
        result = adj @ result
    scores = result[0, 1:].copy()
    total = scores.sum()
    if total < 1e-12:
        warnings.warn("rollout degenerate: token attends only to itself; "
                      "returning uniform scores")
        scores = np.full(t - 1, 1.0 / (t - 1))
    else:
        scores /= total
    return AttentionMap(scores, provenance={
        "layers": [1, int(sel.shape[0])], "head": head_mode})


def upsample_map(amap: AttentionMap, table: PatchTable) -> FeatureField:
    """Each carrier vertex gets the mean score of the patches containing
    it, max-normalized to [0, 1]."""
    scores = np.asarray(amap.patch_scores, dtype=np.float64)
    if len(scores) != table.patch_count:
        raise ShapeError(f"{len(scores)} scores vs {table.patch_count} patches")
    sums = np.zeros(table.carrier_vertex_count)
    counts = np.zeros(table.carrier_vertex_count)
    per_row = np.repeat(scores, table.vertices_per_patch)
    np.add.at(sums, table.rows.ravel(), per_row)
    np.add.at(counts, table.rows.ravel(), 1.0)
    counts[counts == 0] = 1.0
    vals = sums / counts
    peak = vals.max()
    if peak > 0:
        vals = vals / peak
    out = FeatureField(vals[:, None].astype(np.float32), ["attention"])
    amap.vertex_field = out
    return out


def export_maps(model: SiTModel, seq: PatchSequence, table: PatchTable,
                mesh: TriMesh, out_dir, heads: list[int] | None = None,
                confound: float | None = None) -> dict:
    """Write one vertex-field channel per requested head plus the
    head-averaged map as a native mesh file, with a provenance manifest.
    Returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if mesh.vertex_count != table.carrier_vertex_count:
        raise ShapeError("mesh does not match patch table carrier")
    pred, stack = forward(seq, model, confound=confound, training=False)
    if heads is None:
        heads = list(range(stack.heads))
    channels: dict[str, np.ndarray] = {}
    provenance = []
    for h in heads:
        m = rollout(stack, head_mode=h)
        channels[f"head_{h}"] = upsample_map(m, table).values[:, 0]
        provenance.append({"channel": f"head_{h}", **m.provenance})
    avg = rollout(stack, head_mode="averaged")
    channels["average"] = upsample_map(avg, table).values[:, 0]
    provenance.append({"channel": "average", **avg.provenance})

    mesh_path = out_dir / "attention_maps.surfmesh"
    save_mesh(mesh.with_channels(channels), mesh_path)
    manifest = {
        "prediction": pred if isinstance(pred, float) else pred.tolist(),
        "heads": heads,
        "channels": list(channels),
        "provenance": provenance,
        "mesh_file": mesh_path.name,
        "value_range": [0.0, 1.0],
    }
    with open(out_dir / "attention_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
