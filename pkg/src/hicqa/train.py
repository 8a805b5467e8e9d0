"""Multi-task training on weak labels.

Full-graph gradient steps: soft-target cross-entropy on the keep head
mixed with class-weighted cross-entropy on the capacity head via
loss_mix (lambda). lambda=1 is the capacity-free ablation and never
touches capacity labels. Deterministic given (graph, seed, config).
"""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import CAPACITY_LABELS
from .filtering import auroc
from .graph import graph_hash
from .model import ModelError, ModelParams, model_forward


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    loss_mix: float = 0.5  # weight of keep loss; 1.0 disables the capacity task
    class_weights_cap: tuple = None  # None = inverse frequency
    seed: int = 0
    optimizer: str = "adamw"
    eval_every: int = 10

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if not 0.0 <= self.loss_mix <= 1.0:
            raise ValueError("loss_mix must be in [0, 1]")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        d = asdict(self)
        if d["class_weights_cap"] is not None:
            d["class_weights_cap"] = list(d["class_weights_cap"])
        return d


def inverse_frequency_weights(capacity):
    """Mean-one weights proportional to inverse class frequency; absent
    classes get weight 0."""
    counts = np.bincount(capacity, minlength=len(CAPACITY_LABELS)).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    present = inv[inv > 0]
    if present.size:
        inv *= present.size / present.sum()
    return inv


def multitask_loss(z_keep, z_cap, labels, config):
    """Returns (total 1x1 tensor, keep_loss float, cap_loss float | None)."""
    lam = config.loss_mix
    dtype = z_keep.dtype
    y = np.asarray(labels.keep_soft, dtype=dtype)
    keep_targets = np.stack([1.0 - y, y], axis=1)
    keep_loss = ad.softmax_xent(z_keep, keep_targets)
    if lam >= 1.0:
        return keep_loss, keep_loss.item(), None
    weights = (
        np.asarray(config.class_weights_cap, dtype=np.float64)
        if config.class_weights_cap is not None
        else inverse_frequency_weights(labels.capacity)
    )
    cap = np.asarray(labels.capacity, dtype=np.int64)
    onehot = np.zeros((cap.shape[0], len(CAPACITY_LABELS)), dtype=dtype)
    onehot[np.arange(cap.shape[0]), cap] = 1.0
    cap_loss = ad.softmax_xent(z_cap, onehot, weights[cap])
    if lam <= 0.0:
        return cap_loss, keep_loss.item(), cap_loss.item()
    total = ad.add(ad.scale(keep_loss, lam), ad.scale(cap_loss, 1.0 - lam))
    return total, keep_loss.item(), cap_loss.item()


def gradient_norm(params):
    total = 0.0
    for _, p in params.named():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def clip_gradients(params, clip_norm):
    """Scale all gradients uniformly so the global L2 norm is <= clip_norm;
    returns the applied scale (1.0 when already within bounds or all-zero)."""
    norm = gradient_norm(params)
    if norm <= clip_norm or norm == 0.0:
        return 1.0
    scale = clip_norm / norm
    for _, p in params.named():
        if p.grad is not None:
            p.grad *= scale
    return scale


class AdamW:
    def __init__(self, config, betas=(0.9, 0.999), eps=1e-8):
        self.lr = config.learning_rate
        self.wd = config.weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in params.named():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.wd * p.data
            p.data = p.data - self.lr * update.astype(p.data.dtype)


class SGD:
    def __init__(self, config):
        self.lr = config.learning_rate
        self.wd = config.weight_decay

    def step(self, params):
        for _, p in params.named():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data = p.data - self.lr * (g + self.wd * p.data).astype(p.data.dtype)


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_epoch: int
    report: list
    diverged: bool
    graph_hash: str

    @property
    def final_loss(self):
        return self.report[-1]["total_loss"] if self.report else None


def _eval_metrics(graph, params, lam):
    with ad.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        out = model_forward(graph, params, mode="eval")
    scores = ad.softmax(out.z_keep.data)[:, 1]
    classes = (np.asarray(graph.labels.keep_soft) >= 0.5).astype(np.int64)
    keep_auroc = auroc(scores, classes)
    if lam >= 1.0:
        return keep_auroc, None
    pred = out.z_cap.data.argmax(axis=1)
    return keep_auroc, float((pred == graph.labels.capacity).mean())


def train(graph, hyper, config):
    """Full-graph training loop; aborts on divergence keeping the last
    finite parameters. Reports one row per epoch."""
    params = ModelParams.init(graph.f, hyper, config.seed)
    params.metadata["optimizer"] = config.optimizer
    ghash = graph_hash(graph)
    opt = AdamW(config) if config.optimizer == "adamw" else SGD(config)
    best = params.copy()
    best_epoch = -1
    best_loss = np.inf
    report = []
    diverged = False

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        try:
            # overflow here surfaces as a non-finite loss, which aborts below
            with np.errstate(over="ignore", invalid="ignore"):
                out = model_forward(graph, params, mode="train", seed=config.seed, step=epoch)
                total, keep_l, cap_l = multitask_loss(
                    out.z_keep, out.z_cap, graph.labels, config
                )
        except (ModelError, FloatingPointError):
            diverged = True
            break
        total_val = total.item()
        if not np.isfinite(total_val):
            diverged = True
            break
        params.zero_grad()
        ad.backward(total)
        grad_norm = gradient_norm(params)
        clip_gradients(params, config.clip_norm)
        opt.step(params)
        step_ms = (time.perf_counter() - t0) * 1000.0

        row = {
            "epoch": epoch,
            "keep_loss": keep_l,
            "cap_loss": cap_l,
            "total_loss": total_val,
            "grad_norm": grad_norm,
            "keep_auroc": None,
            "cap_accuracy": None,
            "step_ms": step_ms,
        }
        if epoch % max(1, config.eval_every) == 0 or epoch == config.epochs - 1:
            try:
                row["keep_auroc"], row["cap_accuracy"] = _eval_metrics(
                    graph, params, config.loss_mix
                )
            except (ModelError, FloatingPointError):
                report.append(row)
                diverged = True
                break
        report.append(row)
        if total_val < best_loss:
            best_loss = total_val
            best = params.copy()
            best_epoch = epoch

    if diverged and not all(
        np.all(np.isfinite(t.data)) for _, t in params.named()
    ):
        params = best.copy()  # last finite checkpoint

    return TrainResult(
        params=params,
        best_params=best if best_epoch >= 0 else params.copy(),
        best_epoch=best_epoch,
        report=report,
        diverged=diverged,
        graph_hash=ghash,
    )
