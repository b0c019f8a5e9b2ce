"""Per-class prototype selection and the prototype registry.

A class prototype is the correctly-classified training image the model
is most confident about; its CI vector anchors the correlation and
common-feature detectors.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import causal
from . import model as model_mod

log = logging.getLogger(__name__)


class PrototypeError(Exception):
    pass


class RegistryFormatError(PrototypeError):
    pass


@dataclass
class PrototypeRecord:
    class_label: int
    image_id: str
    confidence: float
    ci: causal.CIVector


@dataclass
class Registry:
    prototypes: Dict[int, PrototypeRecord]
    model_id: str
    tau_zero: float = causal.DEFAULT_TAU_ZERO

    def get(self, class_label, model_id=None):
        if model_id is not None and model_id != self.model_id:
            raise PrototypeError(
                f"registry was built for model {self.model_id}, asked with {model_id}")
        if class_label not in self.prototypes:
            raise PrototypeError(f"no prototype for class {class_label}")
        return self.prototypes[class_label]


def select_prototype(spec, weights, images, class_label, model_id="", batch=256):
    """Pick the most confidently correctly-classified image of the class.

    Ties break toward the lexicographically smallest image id.
    """
    candidates = [img for img in images if img.label == class_label]
    if not candidates:
        raise PrototypeError(f"no images of class {class_label}")
    best = None
    for start in range(0, len(candidates), batch):
        chunk = candidates[start:start + batch]
        probs = model_mod.predict_batch(spec, weights, np.stack([c.pixels for c in chunk]))
        for img, p in zip(chunk, probs):
            label = int(np.argmax(p))
            if label != class_label:
                continue
            conf = float(p[label])
            if best is None or conf > best[0] or (conf == best[0] and img.id < best[1].id):
                best = (conf, img)
    if best is None:
        raise PrototypeError(f"no correctly classified candidate for class {class_label}")
    conf, img = best
    ci = causal.compute_ci_cached(spec, weights, img.pixels, model_id=model_id, image_id=img.id)
    return PrototypeRecord(class_label=class_label, image_id=img.id, confidence=conf, ci=ci)


def build_registry(spec, weights, images, classes, model_id=None,
                   tau_zero=causal.DEFAULT_TAU_ZERO, strict_causal=False):
    """One prototype per class; deterministic given model + dataset."""
    if model_id is None:
        model_id = model_mod.weights_digest(weights)
    prototypes = {}
    for c in range(classes):
        rec = select_prototype(spec, weights, images, c, model_id=model_id)
        part = causal.partition_filters(rec.ci, tau_zero)
        if not part.causal:
            msg = f"prototype for class {c} ({rec.image_id}) has no causal filters"
            if strict_causal:
                raise PrototypeError(msg)
            log.warning(msg)
        prototypes[c] = rec
    return Registry(prototypes=prototypes, model_id=model_id, tau_zero=tau_zero)


def save_registry(registry, path):
    doc = {
        "model_id": registry.model_id,
        "tau_zero": registry.tau_zero,
        "prototypes": [
            {
                "class": rec.class_label,
                "image_id": rec.image_id,
                "confidence": float(rec.confidence),
                "base_confidence": float(rec.ci.base_confidence),
                "ci": [round(float(v), 9) for v in rec.ci.values],
            }
            for _, rec in sorted(registry.prototypes.items())
        ],
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _require(doc, key, pointer):
    if key not in doc:
        raise RegistryFormatError(f"missing field at {pointer}/{key}")
    return doc[key]


def load_registry(path):
    with open(path) as fh:
        doc = json.load(fh)
    model_id = _require(doc, "model_id", "")
    tau_zero = float(_require(doc, "tau_zero", ""))
    entries = _require(doc, "prototypes", "")
    prototypes = {}
    for i, entry in enumerate(entries):
        ptr = f"/prototypes/{i}"
        c = int(_require(entry, "class", ptr))
        ci = causal.CIVector(
            values=np.asarray(_require(entry, "ci", ptr), dtype=np.float32),
            predicted_label=c,
            base_confidence=float(_require(entry, "base_confidence", ptr)),
            model_id=model_id,
            image_id=_require(entry, "image_id", ptr),
        )
        if c in prototypes:
            raise RegistryFormatError(f"duplicate class {c} at {ptr}")
        prototypes[c] = PrototypeRecord(class_label=c, image_id=ci.image_id,
                                        confidence=float(_require(entry, "confidence", ptr)),
                                        ci=ci)
    return Registry(prototypes=prototypes, model_id=model_id, tau_zero=tau_zero)
