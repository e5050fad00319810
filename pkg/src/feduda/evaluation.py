"""Verification and rank-1 identification metrics by exact threshold enumeration.

A pair is accepted when its cosine similarity is ``>= threshold``.  Because
accuracy and acceptance rates are piecewise constant in the threshold, only
the observed similarity values plus ``+inf`` (accept nothing) need checking.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .model import BackboneParams, embed
from .synth import EvalSplit

__all__ = [
    "FAR_LEVELS",
    "EvalReport",
    "VerificationResult",
    "verification_from_scores",
    "verification_eval",
    "rank1_from_embeddings",
    "identification_eval",
    "evaluate",
    "roc_points",
    "write_roc_csv",
]

FAR_LEVELS = (0.1, 0.01, 0.001)


@dataclass(frozen=True)
class VerificationResult:
    accuracy: float
    threshold: float
    tar_at_far: dict
    achieved_far: dict


@dataclass(frozen=True)
class EvalReport:
    verification_accuracy: float
    tar_at_far: dict
    rank1: float
    threshold: float
    achieved_far: dict = field(default_factory=dict)

    def as_record(self, prefix: str = "") -> dict:
        rec = {
            f"{prefix}verification_accuracy": self.verification_accuracy,
            f"{prefix}rank1": self.rank1,
            f"{prefix}threshold": self.threshold,
        }
        for far in sorted(self.tar_at_far, reverse=True):
            rec[f"{prefix}tar@far={far:g}"] = self.tar_at_far[far]
            if far in self.achieved_far:
                rec[f"{prefix}achieved_far@{far:g}"] = self.achieved_far[far]
        return rec

    def to_json(self) -> str:
        return json.dumps(self.as_record(), sort_keys=True)


def _sweep(scores: np.ndarray, genuine: np.ndarray):
    """Acceptance counts at every candidate threshold, in increasing order."""
    thresholds = np.append(np.unique(scores), np.inf)
    order = np.sort(scores[genuine])
    imp = np.sort(scores[~genuine])
    gen_acc = len(order) - np.searchsorted(order, thresholds, side="left")
    imp_acc = len(imp) - np.searchsorted(imp, thresholds, side="left")
    return thresholds, gen_acc, imp_acc


def verification_from_scores(scores, genuine, far_levels=FAR_LEVELS) -> VerificationResult:
    """Best-threshold accuracy and TAR at each FAR level.

    TAR@f is taken at the most permissive threshold whose empirical impostor
    acceptance rate is ``<= f``; the achieved rate is reported next to it.
    Among equally accurate thresholds, the smallest wins.
    """
    scores = np.asarray(scores, dtype=np.float64)
    genuine = np.asarray(genuine, dtype=bool)
    n_gen, n_imp = int(genuine.sum()), int((~genuine).sum())
    if n_gen == 0 or n_imp == 0:
        raise ValueError("need at least one genuine and one impostor pair")
    thresholds, gen_acc, imp_acc = _sweep(scores, genuine)
    correct = gen_acc + (n_imp - imp_acc)
    best = int(np.argmax(correct))
    tar, achieved = {}, {}
    far = imp_acc / n_imp
    for f in far_levels:
        ok = np.flatnonzero(far <= f)
        k = ok[0]  # rates decrease with threshold, so the first hit is the most permissive
        tar[f] = float(gen_acc[k] / n_gen)
        achieved[f] = float(far[k])
    return VerificationResult(float(correct[best] / (n_gen + n_imp)), float(thresholds[best]), tar, achieved)


def _pair_scores(emb: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", emb[pairs[:, 0]], emb[pairs[:, 1]])


def verification_eval(backbone: BackboneParams, split: EvalSplit):
    """Return ``(accuracy, tar_at_far)`` on the split's test pairs."""
    if len(split.pairs) == 0:
        raise ValueError("split has no test pairs")
    res = verification_from_scores(_pair_scores(embed(backbone, split.dataset.features), split.pairs), split.genuine)
    return res.accuracy, res.tar_at_far


def rank1_from_embeddings(query, query_ids, gallery, gallery_ids) -> float:
    query, gallery = np.atleast_2d(query), np.atleast_2d(gallery)
    if query.shape[0] == 0:
        raise ValueError("empty query set")
    if gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    best = np.argmax(query @ gallery.T, axis=1)
    return float(np.mean(np.asarray(gallery_ids)[best] == np.asarray(query_ids)))


def identification_eval(backbone: BackboneParams, query, gallery) -> float:
    """Rank-1 accuracy of ``query`` against ``gallery`` (both ``LabeledDataset``)."""
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    if len(query) == 0:
        raise ValueError("empty query set")
    return rank1_from_embeddings(
        embed(backbone, query.features), query.identities, embed(backbone, gallery.features), gallery.identities
    )


def evaluate(backbone: BackboneParams, split: EvalSplit) -> EvalReport:
    emb = embed(backbone, split.dataset.features)
    ver = verification_from_scores(_pair_scores(emb, split.pairs), split.genuine)
    ids = split.dataset.identities
    rank1 = rank1_from_embeddings(emb[split.query_idx], ids[split.query_idx], emb[split.gallery_idx], ids[split.gallery_idx])
    return EvalReport(ver.accuracy, ver.tar_at_far, rank1, ver.threshold, ver.achieved_far)


def roc_points(backbone: BackboneParams, split: EvalSplit) -> np.ndarray:
    """Rows ``(threshold, far, tar)`` at every candidate threshold."""
    scores = _pair_scores(embed(backbone, split.dataset.features), split.pairs)
    thresholds, gen_acc, imp_acc = _sweep(scores, split.genuine)
    n_gen = split.genuine.sum()
    return np.stack([thresholds, imp_acc / (len(scores) - n_gen), gen_acc / n_gen], axis=1)


def write_roc_csv(path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "tar"])
        w.writerows(points.tolist())
