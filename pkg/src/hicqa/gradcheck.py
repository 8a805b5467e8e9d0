"""End-to-end finite-difference verification of the full model.

Builds a small random corpus, runs the complete forward (projections,
all layers, both heads, multi-task loss) in eval mode, and compares tape
gradients of every parameter element against central differences.

The single-precision check shares the double-precision finite-difference
reference: parameters are initialized at float32-representable values and
lifted to float64, so both models sit at the same base point. Comparing
float32 tape gradients against the accurate float64 differences avoids
the kink-crossing noise a float32-sized step would introduce.
"""

import numpy as np

from . import autodiff as ad
from .corpus import CAPACITY_LABELS, Corpus, QARecord, Sample
from .graph import build_graph
from .model import HyperParams, ModelParams, _mlp_head, hetero_layer, project_inputs
from .rng import rng_for
from .train import inverse_frequency_weights

_STREAM_TOY = 7


def toy_corpus(f=4, n_samples=2, qas_per_sample=3, seed=0):
    rng = rng_for(seed, _STREAM_TOY)

    def unit():
        v = rng.normal(size=f)
        return v / np.linalg.norm(v)

    samples = []
    q = 0
    for i in range(n_samples):
        qas = []
        for _ in range(qas_per_sample):
            qas.append(
                QARecord(
                    qa_id=f"q{q}",
                    question_text=f"toy question {q}",
                    answer_text=f"toy answer {q}",
                    qa_embedding=unit(),
                    nli_entailment=float(rng.uniform(0.05, 0.95)),
                    capacity_label=CAPACITY_LABELS[q % 3],
                )
            )
            q += 1
        samples.append(
            Sample(
                sample_id=f"s{i}",
                image_embedding=unit(),
                caption_embedding=unit(),
                caption_text=f"toy caption {i}",
                qas=qas,
            )
        )
    return Corpus(f=f, samples=samples)


def _loss_fn(graph, params, loss_mix):
    """Multi-task eval-mode loss closures with label constants hoisted out.

    Returns (fn, tail): ``fn()`` runs the full forward and returns the 1x1
    loss tensor; ``tail(h_qa)`` applies only the heads and loss to a final
    QA hidden state (same ops in the same order as the end of ``fn``).
    """
    dtype = params.hyper.dtype
    y = np.asarray(graph.labels.keep_soft, dtype=dtype)
    keep_targets = np.stack([1.0 - y, y], axis=1)
    cap = graph.labels.capacity
    onehot = np.zeros((cap.shape[0], len(CAPACITY_LABELS)), dtype=dtype)
    onehot[np.arange(cap.shape[0]), cap] = 1.0
    weights = inverse_frequency_weights(cap)[cap].astype(dtype)

    def tail(h_qa):
        z_keep = _mlp_head(h_qa, params, "keep")
        z_cap = _mlp_head(h_qa, params, "cap")
        keep_loss = ad.softmax_xent(z_keep, keep_targets)
        cap_loss = ad.softmax_xent(z_cap, onehot, weights)
        return ad.add(ad.scale(keep_loss, loss_mix), ad.scale(cap_loss, 1.0 - loss_mix))

    def fn():
        h = project_inputs(graph, params)
        for layer in range(params.hyper.layers):
            h = hetero_layer(h, graph, params, layer, "eval")
        return tail(h["qa"])

    return fn, tail


def _lift_double(params):
    hyper64 = HyperParams(**{**params.hyper.to_dict(), "precision": "double"})
    tensors = {
        n: ad.parameter(t.data.astype(np.float64), name=n) for n, t in params.tensors.items()
    }
    return ModelParams(
        f=params.f, hyper=hyper64, tensors=tensors, seed=params.seed, metadata={}
    )


def _stage_of(name, n_layers):
    """Earliest stage whose recomputation a perturbation of ``name`` needs:
    stage 0 recomputes the projections, stage l+1 starts at layer l's
    input, stage n_layers+1 only reruns the heads."""
    if name.startswith("proj."):
        return 0
    if name.startswith("layer"):
        return int(name.split(".", 1)[0][len("layer") :]) + 1
    return n_layers + 1


def _structured_fd(graph, params, tail, step):
    """Central differences reusing cached hidden states below the perturbed
    parameter. Values are bit-identical to a from-scratch forward because
    the same ops run in the same order from the same inputs."""
    n_layers = params.hyper.layers
    grads = []
    with ad.no_grad():
        stages = [project_inputs(graph, params)]
        for layer in range(n_layers):
            stages.append(hetero_layer(stages[-1], graph, params, layer, "eval"))

        def loss_at(stage):
            h = project_inputs(graph, params) if stage == 0 else stages[stage - 1]
            for layer in range(max(0, stage - 1), n_layers):
                h = hetero_layer(h, graph, params, layer, "eval")
            return tail(h["qa"]).data[0, 0]

        for _, p in params.named():
            stage = _stage_of(p.name, n_layers)
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            g = np.zeros(flat.size, dtype=np.float64)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = loss_at(stage)
                flat[i] = orig - step
                f_minus = loss_at(stage)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise FloatingPointError("non-finite value in finite differences")
                g[i] = (f_plus - f_minus) / (2.0 * step)
            grads.append(g.reshape(p.data.shape))
    return grads


def toy_gradcheck_both(
    f=4,
    d=16,
    heads=4,
    layers=2,
    step=1e-4,
    seed=0,
    n_samples=2,
    qas_per_sample=3,
    loss_mix=0.5,
):
    """(double_error, single_error) from one shared float64 FD sweep."""
    corpus = toy_corpus(f=f, n_samples=n_samples, qas_per_sample=qas_per_sample, seed=seed)
    graph = build_graph(corpus, alpha=0.5)
    hyper32 = HyperParams(d=d, layers=layers, heads=heads, dropout_p=0.0, precision="single")
    params32 = ModelParams.init(f, hyper32, seed)
    params64 = _lift_double(params32)

    fn64, tail64 = _loss_fn(graph, params64, loss_mix)
    fn32, _ = _loss_fn(graph, params32, loss_mix)

    analytic64 = ad.tape_grads(fn64, params64.parameters())
    analytic32 = ad.tape_grads(fn32, params32.parameters())
    numeric = _structured_fd(graph, params64, tail64, step)

    return (
        ad.max_relative_error(analytic64, numeric),
        ad.max_relative_error(analytic32, numeric),
    )


def toy_gradcheck(f=4, d=16, heads=4, layers=2, precision="double", step=1e-4, seed=0,
                  n_samples=2, qas_per_sample=3, loss_mix=0.5):
    """Max relative gradient error of the full model loss on a toy graph."""
    double_err, single_err = toy_gradcheck_both(
        f=f,
        d=d,
        heads=heads,
        layers=layers,
        step=step,
        seed=seed,
        n_samples=n_samples,
        qas_per_sample=qas_per_sample,
        loss_mix=loss_mix,
    )
    return double_err if precision == "double" else single_err
