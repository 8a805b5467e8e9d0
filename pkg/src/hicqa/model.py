"""The consistency-scoring GNN.

Per-type input projections into a shared hidden width d, then L layers of
per-relation convolutions fused by summation per destination type:

  * mean-aggregating conv (described_by, asked_about): attribute-free
    cross-type messages from image nodes,
  * edge-aware attention conv (supports, similar): multi-head attention
    whose logits see the scalar edge attribute through a learned per-head
    weight; head outputs are averaged back to width d.

Each layer ends with ReLU on the fused sum, a residual connection,
per-type LayerNorm, and dropout. Image nodes receive no messages and pass
through the residual path. Two MLP heads read the final QA states: a
2-way keep head and a 3-way capacity head.

Head packing: per-head weights live column-blocked in single tensors
(`W` is (d, H*d), attention vectors are (d, H) columns). Head-wise
primitives never mix columns across heads, so heads stay independent;
the packing only keeps the op count low.
"""

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import RELATION_TYPES
from .rng import STREAM_DROPOUT, STREAM_INIT, rng_for

CKPT_FORMAT = "hicqa-ckpt"
CKPT_VERSION = 1

SAGE_RELATIONS = ("described_by", "asked_about")
GAT_RELATIONS = ("supports", "similar")
_TYPE_INDEX = {"image": 0, "caption": 1, "qa": 2}


class ModelError(Exception):
    pass


@dataclass
class HyperParams:
    d: int = 256
    layers: int = 2
    heads: int = 4
    dropout_p: float = 0.1
    leaky_slope: float = 0.2
    layer_norm_eps: float = 1e-5
    precision: str = "single"  # single | double

    def __post_init__(self):
        if self.d <= 0 or self.layers < 1 or self.heads < 1:
            raise ValueError("d, layers, heads must be positive")
        if self.d % self.heads != 0:
            raise ValueError(f"hidden width {self.d} not divisible by {self.heads} heads")
        if self.precision not in ("single", "double"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _glorot(rng, shape, dtype):
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def parameter_shapes(f, hyper):
    """Name -> shape map; the parameter count is a pure function of
    (f, d, layers, heads)."""
    d, h = hyper.d, hyper.heads
    shapes = {
        "proj.image.W": (f + 1, d),
        "proj.image.b": (1, d),
        "proj.caption.W": (f, d),
        "proj.caption.b": (1, d),
        "proj.qa.W": (f + 1, d),
        "proj.qa.b": (1, d),
    }
    for layer in range(hyper.layers):
        for rel in SAGE_RELATIONS:
            base = f"layer{layer}.{rel}"
            shapes[f"{base}.W_self"] = (d, d)
            shapes[f"{base}.b_self"] = (1, d)
            shapes[f"{base}.W_neigh"] = (d, d)
            shapes[f"{base}.b_neigh"] = (1, d)
        for rel in GAT_RELATIONS:
            base = f"layer{layer}.{rel}"
            shapes[f"{base}.W"] = (d, h * d)
            shapes[f"{base}.b"] = (1, h * d)
            shapes[f"{base}.att_u"] = (d, h)
            shapes[f"{base}.att_v"] = (d, h)
            shapes[f"{base}.att_e"] = (1, h)
            shapes[f"{base}.w_e"] = (1, h)
        for node_type in ("image", "caption", "qa"):
            shapes[f"layer{layer}.ln.{node_type}.gamma"] = (1, d)
            shapes[f"layer{layer}.ln.{node_type}.beta"] = (1, d)
    shapes.update(
        {
            "head.keep.0.W": (d, d),
            "head.keep.0.b": (1, d),
            "head.keep.1.W": (d, 2),
            "head.keep.1.b": (1, 2),
            "head.cap.0.W": (d, d),
            "head.cap.0.b": (1, d),
            "head.cap.1.W": (d, 3),
            "head.cap.1.b": (1, 3),
        }
    )
    return shapes


def parameter_count(f, hyper):
    return sum(int(np.prod(s)) for s in parameter_shapes(f, hyper).values())


@dataclass
class ModelParams:
    f: int
    hyper: HyperParams
    tensors: dict
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    @classmethod
    def init(cls, f, hyper, seed):
        """Glorot-uniform weights and attention vectors; zero biases and
        LayerNorm shifts; unit LayerNorm gains. Deterministic in seed."""
        shapes = parameter_shapes(f, hyper)
        dtype = hyper.dtype
        tensors = {}
        for i, (name, shape) in enumerate(sorted(shapes.items())):
            rng = rng_for(seed, STREAM_INIT, i)
            leaf = name.rsplit(".", 1)[-1]
            d = hyper.d
            if leaf == "gamma":
                data = np.ones(shape, dtype=dtype)
            elif leaf in ("beta",) or leaf.startswith("b"):
                data = np.zeros(shape, dtype=dtype)
            elif leaf in ("att_u", "att_v"):
                # columns are slices of per-head attention vectors of
                # length 2d+1, so share that vector's glorot fan
                limit = math.sqrt(6.0 / (2 * d + 1 + 1))
                data = rng.uniform(-limit, limit, size=shape).astype(dtype)
            elif leaf == "att_e":
                limit = math.sqrt(6.0 / (2 * d + 1 + 1))
                data = rng.uniform(-limit, limit, size=shape).astype(dtype)
            elif leaf == "w_e":
                data = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=shape).astype(dtype)
            elif leaf == "W" and name.split(".")[1] in GAT_RELATIONS:
                # packed heads: glorot per (d, d) head block
                limit = math.sqrt(6.0 / (d + d))
                data = rng.uniform(-limit, limit, size=shape).astype(dtype)
            else:
                data = _glorot(rng, shape, dtype)
            tensors[name] = ad.parameter(data, name=name)
        return cls(
            f=f,
            hyper=hyper,
            tensors=tensors,
            seed=int(seed),
            metadata={"init": "glorot_uniform"},
        )

    def __getitem__(self, name):
        return self.tensors[name]

    def named(self):
        """(name, tensor) pairs in sorted-name order (determinism anchor)."""
        return sorted(self.tensors.items())

    def parameters(self):
        return [t for _, t in self.named()]

    def zero_grad(self):
        for p in self.tensors.values():
            p.zero_grad()

    def copy(self):
        tensors = {
            n: ad.parameter(t.data.copy(), name=n) for n, t in self.tensors.items()
        }
        return ModelParams(
            f=self.f,
            hyper=self.hyper,
            tensors=tensors,
            seed=self.seed,
            metadata=dict(self.metadata),
        )


# ---------------------------------------------------------------------------
# convolutions


def sage_conv(h_src, h_dst, src_idx, dst_idx, w_self, b_self, w_neigh, b_neigh):
    """ReLU(W_self h_u + W_neigh mean{h_v}); destinations without incoming
    edges use a zero neighbor term."""
    n_dst = h_dst.data.shape[0]
    neigh = ad.segment_mean(ad.gather_rows(h_src, src_idx), dst_idx, n_dst)
    return ad.relu(
        ad.add(ad.affine(h_dst, w_self, b_self), ad.affine(neigh, w_neigh, b_neigh))
    )


def gatv2_conv(
    h_src,
    h_dst,
    src_idx,
    dst_idx,
    edge_attr,
    w,
    b,
    att_u,
    att_v,
    att_e,
    w_e,
    heads,
    leaky_slope=0.2,
    capture=None,
):
    """Edge-aware multi-head attention conv.

    Per head: logits a . leaky([W h_u || W h_v || w_e * e]), softmax over
    each destination's incoming edges, messages sum alpha * W h_v, then
    ReLU of the head average. Destinations with no incoming edges produce
    a zero pre-activation.
    """
    n_dst = h_dst.data.shape[0]
    src_idx = np.asarray(src_idx, dtype=np.int64)
    dst_idx = np.asarray(dst_idx, dtype=np.int64)
    wh_src = ad.affine(h_src, w, b)
    wh_dst = wh_src if h_src is h_dst else ad.affine(h_dst, w, b)
    u = ad.gather_rows(wh_dst, dst_idx)
    v = ad.gather_rows(wh_src, src_idx)
    attr = np.asarray(edge_attr)
    if attr.shape[0] != src_idx.shape[0]:
        raise ValueError("edge_attr misaligned with edges")
    e_col = ad.Tensor(attr.reshape(-1, 1).astype(w.dtype, copy=False))
    scores = ad.add(
        ad.add(
            ad.headwise_dot(ad.leaky_relu(u, leaky_slope), att_u),
            ad.headwise_dot(ad.leaky_relu(v, leaky_slope), att_v),
        ),
        ad.scale_cols(ad.leaky_relu(ad.matmul(e_col, w_e), leaky_slope), att_e),
    )
    alpha = ad.segment_softmax(scores, dst_idx, n_dst)
    if capture is not None:
        capture["alpha"] = alpha.data.copy()
        capture["scores"] = scores.data.copy()
        capture["dst"] = dst_idx.copy()
    msg = ad.scatter_add_rows(ad.headwise_scale(v, alpha), dst_idx, n_dst)
    return ad.relu(ad.head_mean(msg, heads))


def hetero_layer(h_all, graph, params, layer, mode, seed=0, step=0, capture=None):
    """One message-passing layer: per-relation convs, summed per destination
    type, then Dropout(LN(ReLU(sum) + h)). Types receiving no messages
    (images) pass through Dropout(LN(h))."""
    hyper = params.hyper
    fused = {t: None for t in h_all}
    for rel_name, rel in graph.relations.items():
        s_t, d_t = RELATION_TYPES[rel_name]
        base = f"layer{layer}.{rel_name}"
        if rel_name in SAGE_RELATIONS:
            out = sage_conv(
                h_all[s_t],
                h_all[d_t],
                rel.src,
                rel.dst,
                params[f"{base}.W_self"],
                params[f"{base}.b_self"],
                params[f"{base}.W_neigh"],
                params[f"{base}.b_neigh"],
            )
        else:
            cap = None
            if capture is not None:
                cap = {}
                capture[(layer, rel_name)] = cap
            out = gatv2_conv(
                h_all[s_t],
                h_all[d_t],
                rel.src,
                rel.dst,
                rel.attr_as(hyper.dtype),
                params[f"{base}.W"],
                params[f"{base}.b"],
                params[f"{base}.att_u"],
                params[f"{base}.att_v"],
                params[f"{base}.att_e"],
                params[f"{base}.w_e"],
                hyper.heads,
                hyper.leaky_slope,
                capture=cap,
            )
        fused[d_t] = out if fused[d_t] is None else ad.add(fused[d_t], out)

    result = {}
    for t, h_prev in h_all.items():
        if fused[t] is None:
            pre = h_prev
        else:
            pre = ad.add(ad.relu(fused[t]), h_prev)
        normed = ad.layer_norm(
            pre,
            params[f"layer{layer}.ln.{t}.gamma"],
            params[f"layer{layer}.ln.{t}.beta"],
            hyper.layer_norm_eps,
        )
        if mode == "train" and hyper.dropout_p > 0.0:
            rng = rng_for(seed, STREAM_DROPOUT, step, layer, _TYPE_INDEX[t])
            result[t] = ad.dropout(normed, hyper.dropout_p, mode, rng)
        else:
            result[t] = ad.dropout(normed, hyper.dropout_p, mode, None)
    return result


def project_inputs(graph, params):
    dtype = params.hyper.dtype
    out = {}
    for t, table in graph.nodes.items():
        x = ad.Tensor(table.features_as(dtype))
        out[t] = ad.affine(x, params[f"proj.{t}.W"], params[f"proj.{t}.b"])
    return out


def _mlp_head(h, params, head):
    hidden = ad.relu(ad.affine(h, params[f"head.{head}.0.W"], params[f"head.{head}.0.b"]))
    return ad.affine(hidden, params[f"head.{head}.1.W"], params[f"head.{head}.1.b"])


@dataclass
class ForwardOutput:
    hidden: dict
    z_keep: ad.Tensor
    z_cap: ad.Tensor
    attention: dict = field(default_factory=dict)


def model_forward(graph, params, mode="eval", seed=0, step=0, capture_attention=False):
    """Project, run all layers, apply the QA heads. Raises ModelError with
    the layer index if an activation goes non-finite."""
    if graph.f != params.f:
        raise ModelError(f"graph f={graph.f} does not match params f={params.f}")
    capture = {} if capture_attention else None
    h = project_inputs(graph, params)
    for layer in range(params.hyper.layers):
        h = hetero_layer(h, graph, params, layer, mode, seed=seed, step=step, capture=capture)
        for t, tensor in h.items():
            if not np.isfinite(tensor.data.sum()):
                raise ModelError(f"non-finite activation in layer {layer} ({t})")
    z_keep = _mlp_head(h["qa"], params, "keep")
    z_cap = _mlp_head(h["qa"], params, "cap")
    if not (np.isfinite(z_keep.data.sum()) and np.isfinite(z_cap.data.sum())):
        raise ModelError("non-finite logits in task heads")
    return ForwardOutput(hidden=h, z_keep=z_keep, z_cap=z_cap, attention=capture or {})


def keep_probabilities(graph, params):
    """Eval-mode keep probability (class-1 softmax of the keep head) per QA row."""
    with ad.no_grad():
        out = model_forward(graph, params, mode="eval")
    return ad.softmax(out.z_keep.data)[:, 1].astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoints


def _ckpt_core(params, graph_hash_value, train_config=None):
    return {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "f": params.f,
        "hyper": params.hyper.to_dict(),
        "graph_hash": graph_hash_value,
        "seed": params.seed,
        "train_config": train_config,
        "metadata": params.metadata,
        "tensors": [
            {
                "name": name,
                "shape": list(t.data.shape),
                "data": [float(v) for v in t.data.reshape(-1)],
            }
            for name, t in params.named()
        ],
    }


def checkpoint_hash(doc):
    """Hash over everything except volatile fields (created timestamp)."""
    core = {k: v for k, v in doc.items() if k not in ("created", "checkpoint_hash")}
    text = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(params, path, graph_hash_value, train_config=None):
    doc = _ckpt_core(params, graph_hash_value, train_config)
    doc["created"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    doc["checkpoint_hash"] = checkpoint_hash(doc)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return doc["checkpoint_hash"]


def load_checkpoint(path):
    """Returns (ModelParams, graph_hash, checkpoint_hash, full doc)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CKPT_FORMAT:
        raise ModelError(f"{path}: not a checkpoint file")
    hyper = HyperParams.from_dict(doc["hyper"])
    dtype = hyper.dtype
    tensors = {}
    for entry in doc["tensors"]:
        data = np.asarray(entry["data"], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = ad.parameter(data, name=entry["name"])
    expected = set(parameter_shapes(doc["f"], hyper))
    if set(tensors) != expected:
        missing = expected.symmetric_difference(tensors)
        raise ModelError(f"{path}: tensor names do not match hyperparameters: {sorted(missing)[:4]}")
    params = ModelParams(
        f=int(doc["f"]),
        hyper=hyper,
        tensors=tensors,
        seed=int(doc.get("seed", 0)),
        metadata=dict(doc.get("metadata", {})),
    )
    return params, doc.get("graph_hash"), doc.get("checkpoint_hash"), doc
