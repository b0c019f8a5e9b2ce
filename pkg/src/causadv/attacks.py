"""l-infinity gradient-sign attacks: FGSM, BIM and PGD.

All attacks operate on [0,1] images and guarantee that the emitted
perturbation stays inside the epsilon ball around the original and the
[0,1] box. Untargeted attacks ascend the cross-entropy of the truth
label; targeted attacks descend the cross-entropy of the target label.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as model_mod
from .datasets import LabeledImage


class AttackError(ValueError):
    pass


@dataclass
class AttackConfig:
    kind: str  # fgsm | bim | pgd
    epsilon: float
    step_alpha: Optional[float] = None
    iterations: Optional[int] = None
    targeted: bool = False
    target_label: Optional[int] = None
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("fgsm", "bim", "pgd"):
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise AttackError(f"epsilon must be in [0,1], got {self.epsilon}")
        if self.kind == "fgsm":
            self.iterations = 1
            if self.step_alpha is None:
                self.step_alpha = self.epsilon
        else:
            # conventional defaults; the budget itself comes from the caller
            if self.step_alpha is None:
                self.step_alpha = self.epsilon / (4.0 if self.kind == "bim" else 10.0)
            if self.iterations is None:
                self.iterations = 10 if self.kind == "bim" else 40
            if self.kind == "pgd" and self.random_start is False:
                pass  # explicit; pgd defaults to random_start=True only via forge presets
        if self.step_alpha > self.epsilon + 1e-12:
            raise AttackError(f"step_alpha {self.step_alpha} exceeds epsilon {self.epsilon}")
        if self.iterations < 1:
            raise AttackError("iterations must be >= 1")


@dataclass
class AdversarialSample:
    original: LabeledImage
    perturbed: np.ndarray
    original_pred: object
    adv_pred: object
    success: bool
    linf: float
    degenerate: bool = False
    config: Optional[AttackConfig] = None


def project_linf(x_adv, x_orig, epsilon):
    """Clamp x_adv into [x_orig - eps, x_orig + eps] intersected with [0,1]."""
    x_adv = np.asarray(x_adv)
    x_orig = np.asarray(x_orig)
    if x_adv.shape != x_orig.shape:
        raise AttackError(f"shape mismatch {x_adv.shape} vs {x_orig.shape}")
    out = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _check_target(config, truth_label):
    if config.targeted:
        if config.target_label is None:
            raise AttackError("targeted attack requires target_label")
        if config.target_label == truth_label:
            raise AttackError("target_label must differ from the truth label")


def _iterate(spec, weights, image, config):
    """Shared BIM/PGD/FGSM loop; returns (perturbed, degenerate)."""
    x0 = np.asarray(image.pixels, dtype=np.float32)
    loss_label = config.target_label if config.targeted else image.label
    sign = -1.0 if config.targeted else 1.0
    x = x0
    if config.random_start and config.kind == "pgd":
        rng = np.random.default_rng(config.seed)
        noise = rng.uniform(-config.epsilon, config.epsilon, size=x0.shape).astype(np.float32)
        x = project_linf(x0 + noise, x0, config.epsilon)
    degenerate = False
    for _ in range(config.iterations):
        _, grad = model_mod.loss_and_input_grad(spec, weights, x, loss_label)
        if not np.any(grad):
            if np.array_equal(x, x0):
                degenerate = True
            break
        step = np.float32(sign * config.step_alpha) * np.sign(grad).astype(np.float32)
        x = project_linf(x + step, x0, config.epsilon)
    return x.astype(np.float32), degenerate


def _finish(spec, weights, image, perturbed, config, degenerate):
    orig_pred = model_mod.forward(spec, weights, image.pixels)
    adv_pred = model_mod.forward(spec, weights, perturbed)
    if config.targeted:
        success = adv_pred.label == config.target_label
    else:
        success = adv_pred.label != orig_pred.label
    if degenerate:
        success = False
    linf = float(np.abs(perturbed - np.asarray(image.pixels, dtype=np.float32)).max())
    return AdversarialSample(original=image, perturbed=perturbed, original_pred=orig_pred,
                             adv_pred=adv_pred, success=success, linf=linf,
                             degenerate=degenerate, config=config)


def fgsm(spec, weights, image, config):
    """Single gradient-sign step of size epsilon."""
    _check_target(config, image.label)
    perturbed, degenerate = _iterate(spec, weights, image, config)
    return _finish(spec, weights, image, perturbed, config, degenerate)


def bim(spec, weights, image, config):
    """Iterated gradient-sign steps with per-step l-inf projection."""
    _check_target(config, image.label)
    perturbed, degenerate = _iterate(spec, weights, image, config)
    return _finish(spec, weights, image, perturbed, config, degenerate)


def pgd(spec, weights, image, config):
    """BIM with an optional seeded random start inside the epsilon ball."""
    _check_target(config, image.label)
    perturbed, degenerate = _iterate(spec, weights, image, config)
    return _finish(spec, weights, image, perturbed, config, degenerate)


_ATTACKS = {"fgsm": fgsm, "bim": bim, "pgd": pgd}


def forge_set(spec, weights, eval_set, config):
    """Attack every sample in the eval set.

    In targeted mode each sample gets a distinct target label drawn from a
    seeded PRNG. Returns (samples, summary); the success rate counts only
    originals the model classified correctly.
    """
    images = eval_set.all()
    if not images:
        raise AttackError("eval set is empty")
    rng = np.random.default_rng(config.seed + 1)
    attack = _ATTACKS[config.kind]
    samples = []
    for i, image in enumerate(images):
        cfg = AttackConfig(kind=config.kind, epsilon=config.epsilon,
                           step_alpha=config.step_alpha, iterations=config.iterations,
                           targeted=config.targeted, target_label=config.target_label,
                           random_start=config.random_start, seed=config.seed + 1000 + i)
        if config.targeted:
            others = [c for c in range(spec.num_classes) if c != image.label]
            cfg.target_label = int(others[rng.integers(0, len(others))])
        samples.append(attack(spec, weights, image, cfg))
    correct = [s for s in samples if s.original_pred.label == s.original.label]
    successes = sum(1 for s in correct if s.success)
    summary = {
        "kind": config.kind,
        "targeted": config.targeted,
        "epsilon": config.epsilon,
        "step_alpha": config.step_alpha,
        "iterations": config.iterations,
        "total": len(samples),
        "correctly_classified": len(correct),
        "successes": successes,
        "success_rate": successes / len(correct) if correct else 0.0,
        "degenerate": sum(1 for s in samples if s.degenerate),
    }
    return samples, summary


def save_adversarial_set(samples, summary, out_dir):
    """Persist a forged set: raw f32 tensors plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        fname = f"adv_{i:04d}.f32"
        np.ascontiguousarray(s.perturbed, dtype=np.float32).tofile(os.path.join(out_dir, fname))
        entries.append({
            "id": s.original.id,
            "file": fname,
            "shape": list(s.perturbed.shape),
            "kind": s.config.kind,
            "epsilon": s.config.epsilon,
            "targeted": s.config.targeted,
            "target_label": s.config.target_label,
            "truth_label": s.original.label,
            "original_label": s.original_pred.label,
            "adv_label": s.adv_pred.label,
            "success": s.success,
            "degenerate": s.degenerate,
            "linf": s.linf,
        })
    manifest = {"summary": summary, "samples": entries}
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def load_adversarial_set(out_dir):
    """Load a persisted set; returns (manifest, {id: perturbed tensor})."""
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    tensors_by_id = {}
    for entry in manifest["samples"]:
        arr = np.fromfile(os.path.join(out_dir, entry["file"]), dtype=np.float32)
        tensors_by_id[entry["id"]] = arr.reshape(entry["shape"])
    return manifest, tensors_by_id
