"""Scoring, top-ratio selection, and detection metrics.

Score conventions: higher means "more consistent, keep". The planted-noise
oracle marks items that *should be dropped* (corrupt = positive for the
detection metrics), so a good scorer ranks corrupt items lowest.
"""

import json
from dataclasses import dataclass, field
from math import ceil

import numpy as np

from . import autodiff as ad
from .model import ModelError, model_forward

METHODS = ("hicqa", "nli", "clip", "nclip")
HIST_BINS = 50


@dataclass
class ScoreSet:
    method: str
    qa_ids: list  # qualified 'sample_id/qa_id'
    scores: np.ndarray
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "format": "hicqa-scores",
            "version": 1,
            "method": self.method,
            "qa_ids": list(self.qa_ids),
            "scores": [float(s) for s in self.scores],
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            method=doc["method"],
            qa_ids=list(doc["qa_ids"]),
            scores=np.asarray(doc["scores"], dtype=np.float64),
            params=dict(doc.get("params", {})),
        )


@dataclass
class FilterManifest:
    method: str
    keep_ratio: float
    kept_qa_ids: list
    dropped_qa_ids: list
    graph_hash: str = None
    checkpoint_hash: str = None
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "format": "hicqa-filter",
            "version": 1,
            "method": self.method,
            "keep_ratio": self.keep_ratio,
            "graph_hash": self.graph_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "params": self.params,
            "kept_qa_ids": list(self.kept_qa_ids),
            "dropped_qa_ids": list(self.dropped_qa_ids),
        }


def score_hicqa(graph, params, graph_hash_value, ckpt_graph_hash, ckpt_hash, force=False):
    """Keep probability from a trained model, eval mode (deterministic)."""
    if ckpt_graph_hash is not None and ckpt_graph_hash != graph_hash_value and not force:
        raise ModelError(
            "checkpoint was trained on a different graph "
            f"({ckpt_graph_hash[:12]} != {graph_hash_value[:12]}); pass force to override"
        )
    with ad.no_grad():
        out = model_forward(graph, params, mode="eval")
    scores = ad.softmax(out.z_keep.data)[:, 1].astype(np.float64)
    return ScoreSet(
        method="hicqa",
        qa_ids=graph.qa_ids(),
        scores=scores,
        params={"checkpoint_hash": ckpt_hash, "graph_hash": graph_hash_value},
    )


def score_baseline(graph, method, weight=0.5):
    """Per-item baselines: entailment probability, the QA consistency
    token, or their linear fusion (nclip)."""
    qa_ids = graph.qa_ids()
    supports = graph.relations["supports"]
    n_qa = graph.nodes["qa"].n
    nli = np.zeros(n_qa, dtype=np.float64)
    nli[supports.dst] = supports.attr
    clip = graph.nodes["qa"].features[:, graph.f].astype(np.float64)
    if method == "nli":
        scores, params = nli, {}
    elif method == "clip":
        scores, params = clip, {}
    elif method == "nclip":
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"nclip weight must be in [0, 1], got {weight}")
        scores, params = weight * clip + (1.0 - weight) * nli, {"weight": float(weight)}
    else:
        raise ValueError(f"unknown baseline method {method!r}")
    return ScoreSet(method=method, qa_ids=qa_ids, scores=scores, params=params)


def filter_topk(scores, ratio, graph_hash_value=None, checkpoint_hash=None):
    """Keep the ceil(ratio*n) highest-scoring QAs; ties broken by ascending
    qualified qa_id, so the kept set depends only on the score ranking."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"keep ratio must be in (0, 1], got {ratio}")
    n = len(scores.qa_ids)
    n_keep = ceil(ratio * n)
    order = sorted(range(n), key=lambda i: (-scores.scores[i], scores.qa_ids[i]))
    kept = sorted(scores.qa_ids[i] for i in order[:n_keep])
    dropped = sorted(scores.qa_ids[i] for i in order[n_keep:])
    return FilterManifest(
        method=scores.method,
        keep_ratio=float(ratio),
        kept_qa_ids=kept,
        dropped_qa_ids=dropped,
        graph_hash=graph_hash_value,
        checkpoint_hash=checkpoint_hash,
        params=dict(scores.params),
    )


def filtered_corpus(corpus, manifest):
    """Corpus containing only kept QAs; samples left with no QAs are dropped."""
    from .corpus import Corpus, Sample

    kept = set(manifest.kept_qa_ids)
    samples = []
    for s in corpus.samples:
        qas = [qa for qa in s.qas if f"{s.sample_id}/{qa.qa_id}" in kept]
        if qas:
            samples.append(
                Sample(
                    sample_id=s.sample_id,
                    image_embedding=s.image_embedding,
                    caption_embedding=s.caption_embedding,
                    caption_text=s.caption_text,
                    qas=qas,
                )
            )
    return Corpus(f=corpus.f, samples=samples, source_meta=dict(corpus.source_meta))


# ---------------------------------------------------------------------------
# detection metrics


def auroc(scores, positives):
    """Tie-aware rank AUROC: probability a positive outranks a negative.

    Returns None when either class is empty (undefined, reported as
    absent rather than 0).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives).astype(bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[positives].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class DetectionMetrics:
    auroc: float
    per_ratio: dict  # ratio -> {"precision": ..., "recall": ...}
    histograms: dict  # {"clean": [...], "corrupt": [...]} 50 bins on [0, 1]
    n_corrupt: int
    n_clean: int

    def to_dict(self):
        return {
            "format": "hicqa-metrics",
            "version": 1,
            "auroc": self.auroc,
            "per_ratio": {f"{r:g}": v for r, v in sorted(self.per_ratio.items())},
            "histograms": self.histograms,
            "n_corrupt": self.n_corrupt,
            "n_clean": self.n_clean,
        }


def eval_detection(scores, corrupt_ids, ratios):
    """Detection quality of a score set against oracle corrupt tags.

    AUROC treats clean as the high-score class. Precision/recall are of
    the dropped set at each keep ratio (how many dropped items were truly
    corrupt; how many corrupt items got dropped).
    """
    corrupt_mask = np.asarray([qid in corrupt_ids for qid in scores.qa_ids], dtype=bool)
    clean_scores = scores.scores[~corrupt_mask]
    corrupt_scores = scores.scores[corrupt_mask]
    # clean should outrank corrupt: positives = clean
    overall = auroc(scores.scores, ~corrupt_mask)

    per_ratio = {}
    for ratio in ratios:
        manifest = filter_topk(scores, ratio)
        dropped = set(manifest.dropped_qa_ids)
        n_dropped = len(dropped)
        true_drops = sum(1 for qid in scores.qa_ids if qid in dropped and qid in corrupt_ids)
        n_corrupt = int(corrupt_mask.sum())
        per_ratio[float(ratio)] = {
            "precision": (true_drops / n_dropped) if n_dropped else None,
            "recall": (true_drops / n_corrupt) if n_corrupt else None,
        }

    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    histograms = {
        "clean": np.histogram(np.clip(clean_scores, 0, 1), bins=edges)[0].tolist(),
        "corrupt": np.histogram(np.clip(corrupt_scores, 0, 1), bins=edges)[0].tolist(),
    }
    return DetectionMetrics(
        auroc=overall,
        per_ratio=per_ratio,
        histograms=histograms,
        n_corrupt=int(corrupt_mask.sum()),
        n_clean=int((~corrupt_mask).sum()),
    )


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj.to_dict() if hasattr(obj, "to_dict") else obj, fh, indent=2)
        fh.write("\n")
