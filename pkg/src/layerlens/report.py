"""Derived metrics and comparison reports: foreground/background concentration,
the parameter-rescaling coherency check, layerwise grids across models and
inputs, and heatmap/CSV emission."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import ModelGraph, rescale_pair
from .ru import DecoderSpec, estimate_ru
from .sid import DegenerateLayerError, SidConfig, estimate_sid
from .tensor import Tensor


class MaskError(ValueError):
    pass


@dataclass
class Mask:
    """Boolean foreground segment over spatial input positions."""

    inside: np.ndarray

    def __post_init__(self):
        self.inside = np.asarray(self.inside, dtype=bool)

    def validate(self) -> "Mask":
        if not self.inside.any():
            raise MaskError("mask has no foreground (inside) element")
        if self.inside.all():
            raise MaskError("mask has no background (outside) element")
        return self

    @classmethod
    def from_bbox(cls, x: int, y: int, w: int, h: int, shape: tuple) -> "Mask":
        grid = np.zeros(shape, dtype=bool)
        grid[y : y + h, x : x + w] = True
        return cls(grid)

    @classmethod
    def from_pgm(cls, path) -> "Mask":
        return cls(read_pgm(path) > 127)

    def to_pgm(self, path) -> None:
        write_pgm(path, np.where(self.inside, 255, 0).astype(np.uint8))


def channel_mean(H_i: np.ndarray) -> np.ndarray:
    """Collapse a (C,H,W) per-unit map to (H,W) by averaging channels."""
    H_i = np.asarray(H_i)
    if H_i.ndim == 3:
        return H_i.mean(axis=0)
    return H_i


def concentration(H_i: np.ndarray, mask: Mask) -> float:
    """Mean per-unit entropy outside the mask minus mean inside: how much more
    background than foreground information the layer discards."""
    mask.validate()
    field = channel_mean(H_i)
    if field.shape != mask.inside.shape:
        raise MaskError(f"mask shape {mask.inside.shape} does not match map {field.shape}")
    return float(field[~mask.inside].mean() - field[mask.inside].mean())


# ---------------------------------------------------------------------------
# coherency: parameter rescaling must not move the metric
# ---------------------------------------------------------------------------


@dataclass
class CoherencyReport:
    layer: str
    factor: float
    output_max_diff: float
    max_abs_delta_h: float
    normalized: bool
    passed: bool
    conformant: bool
    result_original: object = None  # SidResult pair, kept for report assembly
    result_rescaled: object = None

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "factor": self.factor,
            "output_max_diff": self.output_max_diff,
            "max_abs_delta_h": self.max_abs_delta_h,
            "normalized": self.normalized,
            "passed": self.passed,
            "conformant": self.conformant,
        }


def coherency_check(
    model: ModelGraph,
    layer: str,
    x,
    cfg: SidConfig,
    factor: float = 4.0,
    tolerance: float = 1e-6,
    output_tolerance: float = 1e-10,
) -> CoherencyReport:
    """Rescale the (layer, successor) pair, re-estimate with identical seeds,
    and report the largest per-unit entropy shift. With the feature-variance
    normalization in place the whole procedure is scale-invariant and the
    shift is zero to machine precision; cfg.normalize=False demonstrates the
    failure mode the normalization exists to prevent."""
    x = np.asarray(x, dtype=np.float64)
    rescaled = rescale_pair(model, layer, factor)
    with T.no_grad():
        y0 = model.forward(Tensor(x)).data
        y1 = rescaled.forward(Tensor(x)).data
    output_max_diff = float(np.abs(y0 - y1).max())
    r0 = estimate_sid(model, layer, x, cfg)
    r1 = estimate_sid(rescaled, layer, x, cfg)
    max_abs_delta_h = float(np.abs(r0.H_i - r1.H_i).max())
    passed = output_max_diff <= output_tolerance and max_abs_delta_h <= tolerance
    return CoherencyReport(
        layer=layer,
        factor=factor,
        output_max_diff=output_max_diff,
        max_abs_delta_h=max_abs_delta_h,
        normalized=cfg.normalize,
        passed=passed,
        conformant=r0.conformant and r1.conformant,
        result_original=r0,
        result_rescaled=r1,
    )


# ---------------------------------------------------------------------------
# layerwise grids
# ---------------------------------------------------------------------------


@dataclass
class LayerRecord:
    model: str
    layer: str
    input_set: str
    H_total: float
    H_hat_total: float | None
    concentration: float | None
    epsilon: float
    delta_f_sq: float
    conformant: bool


@dataclass
class LayerwiseReport:
    records: list[LayerRecord]

    def to_json(self) -> dict:
        return {"records": [vars(r) for r in self.records]}


def _estimate_cell(
    model: ModelGraph,
    layer: str,
    inputs: np.ndarray,
    cfg: SidConfig,
    decoder: DecoderSpec | None,
    mask: Mask | None,
):
    h_totals, hhat_totals, concs, epsilons, dfs, conform = [], [], [], [], [], True
    for x in inputs:
        res = estimate_sid(model, layer, x, cfg)
        h_totals.append(res.H_total)
        epsilons.append(res.epsilon_achieved)
        dfs.append(res.delta_f_sq)
        conform = conform and res.conformant
        if mask is not None:
            concs.append(concentration(res.H_i, mask))
        if decoder is not None:
            rr = estimate_ru(model, decoder, layer, x, cfg)
            hhat_totals.append(rr.H_hat_total)
            conform = conform and rr.conformant
    return (
        float(np.mean(h_totals)),
        float(np.mean(hhat_totals)) if hhat_totals else None,
        float(np.mean(concs)) if concs else None,
        float(np.mean(epsilons)),
        float(np.mean(dfs)),
        conform,
    )


def layerwise_report(
    models,
    layers: list[str],
    inputs: np.ndarray,
    cfg: SidConfig,
    decoders: dict | None = None,
    mask: Mask | None = None,
    input_set: str | None = None,
    jobs: int = 1,
) -> LayerwiseReport:
    """Complete (model x layer) grid of mean metrics over an input set.

    `models` is a list of (model_id, ModelGraph). `decoders`, when given, maps
    (model_id, layer) to a trained DecoderSpec and turns on reconstruction
    entropies for those cells. Per-cell failures (degenerate layers, missing
    layers) are recorded as NaN rows, never aborting the grid.
    """
    models = list(models)
    inputs = np.asarray(inputs, dtype=np.float64)
    label = f"{input_set or 'inputs'}[{len(inputs)}]"
    cells = [(mid, m, layer) for mid, m in models for layer in layers]

    def run(cell):
        mid, m, layer = cell
        decoder = (decoders or {}).get((mid, layer))
        try:
            h, hhat, conc, eps, dfs, ok = _estimate_cell(m, layer, inputs, cfg, decoder, mask)
        except (DegenerateLayerError, KeyError, T.NumericalError):
            h, hhat, conc, eps, dfs, ok = math.nan, None, None, math.nan, math.nan, False
        return LayerRecord(
            model=mid,
            layer=layer,
            input_set=label,
            H_total=h,
            H_hat_total=hhat,
            concentration=conc,
            epsilon=eps,
            delta_f_sq=dfs,
            conformant=ok,
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run, cells))
    else:
        records = [run(c) for c in cells]
    return LayerwiseReport(records=records)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

CSV_HEADER = [
    "model",
    "layer",
    "input_set",
    "H_total",
    "H_hat_total",
    "concentration",
    "epsilon",
    "delta_f_sq",
    "conformant",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_csv(report: LayerwiseReport, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in report.records:
            writer.writerow(
                [
                    r.model,
                    r.layer,
                    r.input_set,
                    _fmt(r.H_total),
                    _fmt(r.H_hat_total),
                    _fmt(r.concentration),
                    _fmt(r.epsilon),
                    _fmt(r.delta_f_sq),
                    _fmt(r.conformant),
                ]
            )
    os.replace(tmp, path)


def parse_csv(path) -> LayerwiseReport:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        for row in reader:
            records.append(
                LayerRecord(
                    model=row[0],
                    layer=row[1],
                    input_set=row[2],
                    H_total=float(row[3]),
                    H_hat_total=float(row[4]) if row[4] else None,
                    concentration=float(row[5]) if row[5] else None,
                    epsilon=float(row[6]),
                    delta_f_sq=float(row[7]),
                    conformant=row[8] == "true",
                )
            )
    return LayerwiseReport(records=records)


# ---------------------------------------------------------------------------
# PGM heatmaps
# ---------------------------------------------------------------------------


def write_pgm(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype=np.uint8)
    if grid.ndim != 2:
        raise ValueError(f"PGM needs a 2-D grid, got {grid.shape}")
    h, w = grid.shape
    payload = f"P5\n{w} {h}\n255\n".encode("ascii") + grid.tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise IOError(f"{path}: not a binary PGM (P5) file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise IOError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def export_heatmap(H_i: np.ndarray, path) -> None:
    """Min-max normalized 8-bit grayscale PGM of a 2-D entropy map, with the
    normalization bounds in a JSON sidecar. An all-constant map renders
    mid-gray (128)."""
    field = np.asarray(H_i, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"export_heatmap expects a 2-D map (channel-mean first), got {field.shape}")
    lo, hi = float(field.min()), float(field.max())
    if hi > lo:
        grid = np.round((field - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        grid = np.full(field.shape, 128, dtype=np.uint8)
    write_pgm(path, grid)
    sidecar = {"min": lo, "max": hi, "height": field.shape[0], "width": field.shape[1]}
    path = Path(path)
    side = path.with_name(path.name + ".json")
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, side)


def read_heatmap(path) -> np.ndarray:
    """Reconstruct the entropy map from a PGM and its sidecar (quantized)."""
    path = Path(path)
    grid = read_pgm(path).astype(np.float64)
    sidecar = json.loads(path.with_name(path.name + ".json").read_text())
    lo, hi = sidecar["min"], sidecar["max"]
    return lo + grid / 255.0 * (hi - lo)
