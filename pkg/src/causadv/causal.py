"""Counterfactual information of last-conv filters.

For an input x predicted as class phi with probability P, ablating one
filter f (zeroing its output feature map) and re-reading phi's
probability P'_f gives the per-filter counterfactual information
CI[f] = P - P'_f. Filters split into causal (CI above a small zero
threshold), negative (below minus the threshold) and zero filters.
"""

import json
import os
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import model as model_mod

DEFAULT_TAU_ZERO = 1e-6


class CIFormatError(Exception):
    pass


@dataclass
class CIVector:
    values: np.ndarray  # [K] float32, values[f] = P - P'_f
    predicted_label: int
    base_confidence: float
    model_id: str = ""
    image_id: str = ""

    def __len__(self):
        return len(self.values)


@dataclass
class FilterPartition:
    causal: List[int]
    negative: List[int]
    zero: List[int]
    tau_zero: float


def compute_ci_naive(spec, weights, x, model_id="", image_id=""):
    """One full masked forward pass per filter."""
    base = model_mod.forward(spec, weights, x)
    phi = base.label
    k = spec.num_filters
    values = np.empty(k, dtype=np.float32)
    for f in range(k):
        masked = model_mod.forward_masked(spec, weights, x, {f})
        values[f] = np.float32(base.probs[phi]) - np.float32(masked.probs[phi])
    return CIVector(values=values, predicted_label=phi,
                    base_confidence=base.confidence, model_id=model_id, image_id=image_id)


def compute_ci_cached(spec, weights, x, model_id="", image_id=""):
    """Prefix once, then one suffix-only pass per zeroed filter.

    Bit-equal to compute_ci_naive because masked forward and the cached
    suffix share the same code path.
    """
    base = model_mod.forward(spec, weights, x)
    phi = base.label
    acts = base.last_conv_activations
    k = spec.num_filters
    values = np.empty(k, dtype=np.float32)
    for f in range(k):
        ablated = acts.copy()
        ablated[f] = 0.0
        pred = model_mod.forward_from_activations(spec, weights, ablated)
        values[f] = np.float32(base.probs[phi]) - np.float32(pred.probs[phi])
    return CIVector(values=values, predicted_label=phi,
                    base_confidence=base.confidence, model_id=model_id, image_id=image_id)


def partition_filters(ci, tau_zero=DEFAULT_TAU_ZERO):
    """Three-way split of filter indices by CI against the zero threshold."""
    if tau_zero < 0:
        raise ValueError("tau_zero must be >= 0")
    values = np.asarray(ci.values)
    causal = [int(i) for i in np.nonzero(values > tau_zero)[0]]
    negative = [int(i) for i in np.nonzero(values < -tau_zero)[0]]
    zero = [int(i) for i in np.nonzero(np.abs(values) <= tau_zero)[0]]
    return FilterPartition(causal=causal, negative=negative, zero=zero, tau_zero=tau_zero)


def top_causal(ci, n, tau_zero=DEFAULT_TAU_ZERO):
    """Indices of the n largest-CI causal filters, CI descending, index ascending on ties."""
    if n < 0:
        raise ValueError("n must be >= 0")
    values = np.asarray(ci.values, dtype=np.float64)
    causal = [i for i in range(len(values)) if values[i] > tau_zero]
    causal.sort(key=lambda i: (-values[i], i))
    return causal[:n]


def ci_to_csv(ci, path, tau_zero=DEFAULT_TAU_ZERO):
    """Write the CI CSV plus its JSON sidecar (path + '.json')."""
    lines = ["filter_index,ci"]
    for i, v in enumerate(ci.values):
        lines.append(f"{i},{float(v):.9g}")
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    sidecar = {
        "model_id": ci.model_id,
        "image_id": ci.image_id,
        "predicted_label": ci.predicted_label,
        "base_confidence": float(ci.base_confidence),
        "tau_zero": tau_zero,
    }
    tmp = str(path) + ".json.tmp"
    with open(tmp, "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, str(path) + ".json")


def ci_from_csv(path):
    """Read a CI CSV and its sidecar back into a CIVector."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise CIFormatError(f"{path}: empty CI file")
    if lines[0] != "filter_index,ci":
        raise CIFormatError(f"{path}: bad header {lines[0]!r}")
    values = []
    for row, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != 2:
            raise CIFormatError(f"{path}: malformed row {row}: {line!r}")
        try:
            idx = int(parts[0])
            val = float(parts[1])
        except ValueError as exc:
            raise CIFormatError(f"{path}: malformed row {row}: {line!r}") from exc
        if idx != row:
            raise CIFormatError(f"{path}: row {row} has filter_index {idx}")
        values.append(val)
    if not values:
        raise CIFormatError(f"{path}: no CI rows")
    try:
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError as exc:
        raise CIFormatError(f"{path}: missing sidecar JSON") from exc
    return CIVector(values=np.asarray(values, dtype=np.float32),
                    predicted_label=int(sidecar["predicted_label"]),
                    base_confidence=float(sidecar["base_confidence"]),
                    model_id=sidecar.get("model_id", ""),
                    image_id=sidecar.get("image_id", ""))
