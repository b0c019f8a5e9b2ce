"""Detection strategies over CI vectors.

Four pure decision rules label an input clean or adversarial from the
statistics of its CI vector, optionally compared against the predicted
class's prototype:

  1. existence     — too few causal filters
  2. correlation   — CI poorly Pearson-correlated with the prototype's CI
  3. zero effect   — too few zero filters
  4. common top features — top causal filters disjoint from the prototype's

Strategy 4 flags a sample clean when its top-n causal filters intersect
the prototype's top-m; that is the direction the experimental counts
support (clean samples share top features, adversarials do not).
"""

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import causal

CLEAN = "clean"
ADVERSARIAL = "adversarial"

STRATEGY_NAMES = ("existence", "correlation", "zero_effect", "common_features")


class DegenerateCorrelation(ValueError):
    """Pearson is undefined: one of the vectors has zero variance."""


@dataclass
class DetectorConfig:
    strategy1_n: int = 5
    strategy2_mode: Tuple[str, float] = ("threshold", 0.5)  # or ("topk", k)
    strategy3_n: int = 5
    strategy4_n: int = 10
    strategy4_m: int = 30
    strategy4_k: int = 1
    tau_zero: float = causal.DEFAULT_TAU_ZERO

    def __post_init__(self):
        mode, param = self.strategy2_mode
        if mode not in ("threshold", "topk"):
            raise ValueError(f"unknown strategy2 mode {mode!r}")
        if mode == "threshold" and not -1.0 <= param <= 1.0:
            raise ValueError("correlation threshold must be in [-1,1]")
        if self.strategy4_m < self.strategy4_n:
            raise ValueError("strategy4 requires m >= n")


@dataclass
class DetectionVerdict:
    image_id: str
    strategy: str
    decision: str
    evidence: Dict[str, object] = field(default_factory=dict)


def pearson(u, v):
    """Sample Pearson correlation of two equal-length vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"pearson needs equal-length vectors, got {u.shape} and {v.shape}")
    if u.size < 2:
        raise ValueError("pearson needs at least 2 entries")
    du = u - u.mean()
    dv = v - v.mean()
    su = np.sqrt((du * du).sum())
    sv = np.sqrt((dv * dv).sum())
    if su == 0.0 or sv == 0.0:
        raise DegenerateCorrelation("zero variance input")
    rho = float((du * dv).sum() / (su * sv))
    return max(-1.0, min(1.0, rho))


def strategy1(ci, config):
    """Adversarial iff the number of causal filters is <= n."""
    part = causal.partition_filters(ci, config.tau_zero)
    num_causal = len(part.causal)
    decision = ADVERSARIAL if num_causal <= config.strategy1_n else CLEAN
    return DetectionVerdict(image_id=ci.image_id, strategy="existence", decision=decision,
                            evidence={"num_causal": num_causal, "n": config.strategy1_n})


def strategy2(ci, registry, config):
    """Clean iff the CI vector correlates with its class prototype's CI.

    threshold mode: rho against the predicted class's prototype >= rho_min.
    topk mode: the predicted class is among the k classes whose prototype
    CI correlates highest (prototypes never compared with themselves).
    """
    mode, param = config.strategy2_mode
    if mode == "threshold":
        proto = registry.get(ci.predicted_label, model_id=ci.model_id or None)
        try:
            rho = pearson(ci.values, proto.ci.values)
        except DegenerateCorrelation:
            return DetectionVerdict(image_id=ci.image_id, strategy="correlation",
                                    decision=ADVERSARIAL,
                                    evidence={"rho": None, "degenerate": True})
        decision = CLEAN if rho >= param else ADVERSARIAL
        return DetectionVerdict(image_id=ci.image_id, strategy="correlation", decision=decision,
                                evidence={"rho": rho, "rho_min": param})
    # topk
    k = int(param)
    rhos = {}
    for c, proto in registry.prototypes.items():
        if proto.image_id == ci.image_id:
            continue  # a prototype is never correlated with itself
        try:
            rhos[c] = pearson(ci.values, proto.ci.values)
        except DegenerateCorrelation:
            continue
    if not rhos:
        return DetectionVerdict(image_id=ci.image_id, strategy="correlation",
                                decision=ADVERSARIAL,
                                evidence={"rho": None, "degenerate": True})
    ranked = sorted(rhos, key=lambda c: (-rhos[c], c))
    decision = CLEAN if ci.predicted_label in ranked[:k] else ADVERSARIAL
    return DetectionVerdict(image_id=ci.image_id, strategy="correlation", decision=decision,
                            evidence={"rho": rhos.get(ci.predicted_label),
                                      "topk": k, "rank": ranked.index(ci.predicted_label)
                                      if ci.predicted_label in ranked else None})


def strategy3(ci, config):
    """Adversarial iff the number of zero filters is < n."""
    part = causal.partition_filters(ci, config.tau_zero)
    num_zero = len(part.zero)
    decision = ADVERSARIAL if num_zero < config.strategy3_n else CLEAN
    return DetectionVerdict(image_id=ci.image_id, strategy="zero_effect", decision=decision,
                            evidence={"num_zero": num_zero, "n": config.strategy3_n})


def strategy4(ci, registry, config):
    """Clean iff top-n causal filters share >= k entries with the prototype's top-m."""
    proto = registry.get(ci.predicted_label, model_id=ci.model_id or None)
    top_x = causal.top_causal(ci, config.strategy4_n, config.tau_zero)
    top_p = causal.top_causal(proto.ci, config.strategy4_m, config.tau_zero)
    inter = sorted(set(top_x) & set(top_p))
    decision = CLEAN if len(inter) >= config.strategy4_k else ADVERSARIAL
    return DetectionVerdict(image_id=ci.image_id, strategy="common_features", decision=decision,
                            evidence={"intersection": len(inter), "n": config.strategy4_n,
                                      "m": config.strategy4_m, "k": config.strategy4_k})


def run_all(ci, registry, config):
    """All four strategies for one CI vector."""
    return [
        strategy1(ci, config),
        strategy2(ci, registry, config),
        strategy3(ci, config),
        strategy4(ci, registry, config),
    ]


@dataclass
class StrategyReport:
    strategy: str
    tpr: float
    fpr: float
    clean_flagged: str  # "x/N" counts of clean samples flagged adversarial
    adv_flagged: str
    clean_mean: Optional[float]  # strategy-specific evidence mean per population
    adv_mean: Optional[float]


@dataclass
class EvalReport:
    strategies: Dict[str, StrategyReport]


_EVIDENCE_KEY = {"existence": "num_causal", "correlation": "rho",
                 "zero_effect": "num_zero", "common_features": "intersection"}


def _mean_evidence(verdicts, key):
    vals = [v.evidence.get(key) for v in verdicts]
    vals = [float(v) for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else None


def evaluate(clean_verdicts, adv_verdicts):
    """Aggregate per-strategy verdicts into detection rates and x/N counts."""
    if not clean_verdicts or not adv_verdicts:
        raise ValueError("evaluate needs nonempty clean and adversarial verdict sets")
    report = {}
    for name in STRATEGY_NAMES:
        cv = [v for v in clean_verdicts if v.strategy == name]
        av = [v for v in adv_verdicts if v.strategy == name]
        if not cv and not av:
            continue
        fp = sum(1 for v in cv if v.decision == ADVERSARIAL)
        tp = sum(1 for v in av if v.decision == ADVERSARIAL)
        key = _EVIDENCE_KEY[name]
        report[name] = StrategyReport(
            strategy=name,
            tpr=tp / len(av) if av else math.nan,
            fpr=fp / len(cv) if cv else math.nan,
            clean_flagged=f"{fp}/{len(cv)}",
            adv_flagged=f"{tp}/{len(av)}",
            clean_mean=_mean_evidence(cv, key),
            adv_mean=_mean_evidence(av, key),
        )
    return EvalReport(strategies=report)


def verdicts_to_jsonl(verdicts, path):
    """Persist verdicts as JSON lines: {image_id, strategy, decision, evidence}."""
    import os
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        for v in verdicts:
            fh.write(json.dumps({"image_id": v.image_id, "strategy": v.strategy,
                                 "decision": v.decision, "evidence": v.evidence},
                                sort_keys=True) + "\n")
    os.replace(tmp, path)


def verdicts_from_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            out.append(DetectionVerdict(image_id=doc["image_id"], strategy=doc["strategy"],
                                        decision=doc["decision"], evidence=doc["evidence"]))
    return out
