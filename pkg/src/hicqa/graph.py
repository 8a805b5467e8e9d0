"""Heterogeneous graph construction from a corpus.

Three node types (image, caption, qa) and four directed relations:

    (image,   described_by, caption)   one edge per sample
    (image,   asked_about,  qa)        one edge per QA
    (caption, supports,     qa)        one edge per QA, attr = entailment
    (qa,      similar,      qa)        all ordered within-sample pairs,
                                       attr = nonnegative cosine

Image and QA features carry a trailing consistency token (cosine with the
sample's image embedding mapped to [0, 1]); captions are the bare text
embedding. Per-QA weak keep labels fuse the QA consistency token with the
entailment probability through the mixing weight alpha. Construction is a
pure function of (corpus, alpha, ablation flags): node and edge order
follow manifest order, so two builds are bit-identical.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CAPACITY_LABELS

GRAPH_FORMAT = "hicqa-graph"
GRAPH_VERSION = 1

NODE_TYPES = ("image", "caption", "qa")
RELATIONS = ("described_by", "asked_about", "supports", "similar")
RELATION_TYPES = {
    "described_by": ("image", "caption"),
    "asked_about": ("image", "qa"),
    "supports": ("caption", "qa"),
    "similar": ("qa", "qa"),
}


def cosine_consistency(u, v):
    """Cosine of two unit vectors mapped onto [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    return float(np.clip((np.dot(u, v) + 1.0) / 2.0, 0.0, 1.0))


def nonneg_cosine(u, v):
    """Cosine of two unit vectors clamped below at 0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    return float(np.clip(np.dot(u, v), 0.0, 1.0))


def keep_score(clip_consistency, nli_entailment, alpha):
    """Weighted fusion alpha*clip + (1-alpha)*nli; exact at both endpoints."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * clip_consistency + (1.0 - alpha) * nli_entailment


@dataclass
class NodeTable:
    node_type: str
    features: np.ndarray
    node_ids: list  # image/caption: sample_id; qa: (sample_id, qa_id)

    @property
    def n(self):
        return self.features.shape[0]

    def features_as(self, dtype):
        """Cast memo keyed on the features array's identity; replacing
        ``features`` (the supported way to modify a graph) invalidates it."""
        cached = getattr(self, "_cast", None)
        if cached is not None and cached[0] is self.features and cached[1].dtype == dtype:
            return cached[1]
        cast = np.ascontiguousarray(self.features, dtype=dtype)
        object.__setattr__(self, "_cast", (self.features, cast))
        return cast


@dataclass
class EdgeRelation:
    relation: str
    src_type: str
    dst_type: str
    src: np.ndarray
    dst: np.ndarray
    attr: np.ndarray  # empty for attribute-free relations

    @property
    def n_edges(self):
        return self.src.shape[0]

    def attr_as(self, dtype):
        cached = getattr(self, "_attr_cast", None)
        if cached is not None and cached[0] is self.attr and cached[1].dtype == dtype:
            return cached[1]
        cast = np.ascontiguousarray(self.attr, dtype=dtype).reshape(-1, 1)
        object.__setattr__(self, "_attr_cast", (self.attr, cast))
        return cast


@dataclass
class WeakLabels:
    keep_soft: np.ndarray
    capacity: np.ndarray  # int indices into CAPACITY_LABELS


@dataclass
class HeteroGraph:
    nodes: dict
    relations: dict
    labels: WeakLabels
    alpha: float
    f: int
    flags: dict = field(default_factory=dict)

    def qa_ids(self):
        """Qualified ids 'sample_id/qa_id', aligned with QA node rows."""
        return [f"{sid}/{qid}" for sid, qid in self.nodes["qa"].node_ids]

    @property
    def n_nodes(self):
        return sum(t.n for t in self.nodes.values())


def build_graph(corpus, alpha=0.5, no_clip_token=False, no_nli=False):
    """Construct the graph; ablation flags zero the consistency tokens
    (keep label falls back to entailment only) or drop the entailment
    channel (keep label is the token; supports attrs become 1.0)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    f = corpus.f

    img_rows, cap_rows, qa_rows = [], [], []
    img_ids, cap_ids, qa_ids = [], [], []
    desc_src, desc_dst = [], []
    ask_src, ask_dst = [], []
    sup_src, sup_dst, sup_attr = [], [], []
    sim_src, sim_dst, sim_attr = [], [], []
    keep_soft, capacity = [], []

    for s in corpus.samples:
        i_row = len(img_rows)
        c_row = len(cap_rows)
        tok_img_cap = cosine_consistency(s.image_embedding, s.caption_embedding)
        if no_clip_token:
            tok_img_cap = 0.0
        img_rows.append(np.concatenate([s.image_embedding, [tok_img_cap]]))
        img_ids.append(s.sample_id)
        cap_rows.append(np.asarray(s.caption_embedding, dtype=np.float64))
        cap_ids.append(s.sample_id)
        desc_src.append(i_row)
        desc_dst.append(c_row)

        sample_qa_rows = []
        for qa in s.qas:
            q_row = len(qa_rows)
            sample_qa_rows.append(q_row)
            tok = cosine_consistency(s.image_embedding, qa.qa_embedding)
            stored_tok = 0.0 if no_clip_token else tok
            qa_rows.append(np.concatenate([qa.qa_embedding, [stored_tok]]))
            qa_ids.append((s.sample_id, qa.qa_id))
            ask_src.append(i_row)
            ask_dst.append(q_row)
            sup_src.append(c_row)
            sup_dst.append(q_row)
            sup_attr.append(1.0 if no_nli else qa.nli_entailment)
            if no_clip_token:
                label = qa.nli_entailment
            elif no_nli:
                label = tok
            else:
                label = keep_score(tok, qa.nli_entailment, alpha)
            keep_soft.append(label)
            capacity.append(CAPACITY_LABELS.index(qa.capacity_label))
        for k in sample_qa_rows:
            for m in sample_qa_rows:
                if k == m:
                    continue
                sim_src.append(k)
                sim_dst.append(m)
                sim_attr.append(
                    nonneg_cosine(
                        qa_rows[k][:f],
                        qa_rows[m][:f],
                    )
                )

    def table(node_type, rows, ids, dim):
        feats = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
        return NodeTable(node_type=node_type, features=feats, node_ids=ids)

    def rel(name, src, dst, attr):
        s_t, d_t = RELATION_TYPES[name]
        return EdgeRelation(
            relation=name,
            src_type=s_t,
            dst_type=d_t,
            src=np.asarray(src, dtype=np.int64),
            dst=np.asarray(dst, dtype=np.int64),
            attr=np.asarray(attr, dtype=np.float64),
        )

    return HeteroGraph(
        nodes={
            "image": table("image", img_rows, img_ids, f + 1),
            "caption": table("caption", cap_rows, cap_ids, f),
            "qa": table("qa", qa_rows, qa_ids, f + 1),
        },
        relations={
            "described_by": rel("described_by", desc_src, desc_dst, []),
            "asked_about": rel("asked_about", ask_src, ask_dst, []),
            "supports": rel("supports", sup_src, sup_dst, sup_attr),
            "similar": rel("similar", sim_src, sim_dst, sim_attr),
        },
        labels=WeakLabels(
            keep_soft=np.asarray(keep_soft, dtype=np.float64),
            capacity=np.asarray(capacity, dtype=np.int64),
        ),
        alpha=float(alpha),
        f=f,
        flags={"no_clip_token": bool(no_clip_token), "no_nli": bool(no_nli)},
    )


# ---------------------------------------------------------------------------
# serialization and hashing


def _canonical_dict(graph):
    return {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "f": graph.f,
        "alpha": graph.alpha,
        "flags": graph.flags,
        "nodes": {
            t: {
                "ids": [list(i) if isinstance(i, tuple) else i for i in tb.node_ids],
                "features": [[float(v) for v in row] for row in tb.features],
            }
            for t, tb in sorted(graph.nodes.items())
        },
        "relations": {
            name: {
                "src_type": r.src_type,
                "dst_type": r.dst_type,
                "src": r.src.tolist(),
                "dst": r.dst.tolist(),
                "attr": [float(a) for a in r.attr],
            }
            for name, r in sorted(graph.relations.items())
        },
        "labels": {
            "keep_soft": [float(v) for v in graph.labels.keep_soft],
            "capacity": [CAPACITY_LABELS[c] for c in graph.labels.capacity],
        },
    }


def graph_hash(graph):
    """SHA-256 over the canonical JSON serialization; stable across
    inline/packed storage because it always hashes in-memory values."""
    text = json.dumps(_canonical_dict(graph), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def with_float32_features(graph):
    """Copy of the graph with features degraded to float32 resolution,
    matching what a packed save will produce on reload."""
    nodes = {
        t: NodeTable(tb.node_type, tb.features.astype(np.float32).astype(np.float64), tb.node_ids)
        for t, tb in graph.nodes.items()
    }
    return HeteroGraph(
        nodes=nodes,
        relations=graph.relations,
        labels=graph.labels,
        alpha=graph.alpha,
        f=graph.f,
        flags=graph.flags,
    )


def save_graph(graph, path, packed=False):
    """Write a graph archive. ``packed`` puts feature matrices in float32
    sidecar files ``<path>.<type>.f32`` (the graph is degraded to float32
    first so the recorded hash matches the reloaded artifact)."""
    path = Path(path)
    if packed:
        graph = with_float32_features(graph)
    doc = _canonical_dict(graph)
    doc["hash"] = graph_hash(graph)
    if packed:
        doc["packed"] = True
        for t, tb in graph.nodes.items():
            fname = f"{path.name}.{t}.f32"
            tb.features.astype("<f4").tofile(path.parent / fname)
            doc["nodes"][t]["features"] = {
                "file": fname,
                "rows": int(tb.features.shape[0]),
                "cols": int(tb.features.shape[1]),
            }
    path.write_text(json.dumps(doc), encoding="utf-8")
    return doc["hash"]


def load_graph(path):
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != GRAPH_FORMAT:
        raise ValueError(f"{path}: not a graph archive")
    nodes = {}
    for t, nd in doc["nodes"].items():
        feats = nd["features"]
        if isinstance(feats, dict):
            raw = np.fromfile(path.parent / feats["file"], dtype="<f4")
            mat = raw.reshape(feats["rows"], feats["cols"]).astype(np.float64)
        else:
            mat = np.asarray(feats, dtype=np.float64).reshape(len(nd["ids"]), -1)
        ids = [tuple(i) if isinstance(i, list) else i for i in nd["ids"]]
        nodes[t] = NodeTable(node_type=t, features=mat, node_ids=ids)
    relations = {}
    for name, rd in doc["relations"].items():
        relations[name] = EdgeRelation(
            relation=name,
            src_type=rd["src_type"],
            dst_type=rd["dst_type"],
            src=np.asarray(rd["src"], dtype=np.int64),
            dst=np.asarray(rd["dst"], dtype=np.int64),
            attr=np.asarray(rd["attr"], dtype=np.float64),
        )
    labels = WeakLabels(
        keep_soft=np.asarray(doc["labels"]["keep_soft"], dtype=np.float64),
        capacity=np.asarray(
            [CAPACITY_LABELS.index(c) for c in doc["labels"]["capacity"]], dtype=np.int64
        ),
    )
    graph = HeteroGraph(
        nodes=nodes,
        relations=relations,
        labels=labels,
        alpha=float(doc["alpha"]),
        f=int(doc["f"]),
        flags=dict(doc.get("flags", {})),
    )
    recorded = doc.get("hash")
    if recorded is not None and graph_hash(graph) != recorded:
        raise ValueError(f"{path}: content hash mismatch (corrupt archive?)")
    return graph
