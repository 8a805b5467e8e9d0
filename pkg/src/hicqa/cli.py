"""Command-line pipeline: synth | validate | build | train | score | filter | eval | gradcheck.

Every subcommand writes ``<output>.run.json`` echoing the fully resolved
configuration so any artifact can be reproduced from its recorded command
line and seed. Exit codes: 0 success, 1 validation/usage errors,
2 runtime fault, 3 training divergence.

Environment: ``HICQA_THREADS`` caps BLAS threads, ``HICQA_LOG`` sets the
log level, ``HICQA_KERNELS`` forces the kernel backend.
"""

import argparse
import json
import logging
import os
import sys
import time

log = logging.getLogger("hicqa")


def _apply_thread_env():
    threads = os.environ.get("HICQA_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


_apply_thread_env()

from . import __version__  # noqa: E402
from .corpus import CorpusError, load_corpus, validate_corpus, write_corpus  # noqa: E402
from .filtering import (  # noqa: E402
    ScoreSet,
    eval_detection,
    filter_topk,
    filtered_corpus,
    score_baseline,
    score_hicqa,
    write_json,
)
from .graph import build_graph, graph_hash, load_graph, save_graph  # noqa: E402
from .model import (  # noqa: E402
    HyperParams,
    ModelError,
    load_checkpoint,
    save_checkpoint,
)
from .synth import SynthConfig, oracle_from_dict, oracle_to_dict, synth_corpus  # noqa: E402
from .train import TrainConfig, train  # noqa: E402


def _write_run_json(out_path, args, extra=None):
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "resolved": resolved,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "version": __version__,
    }
    if extra:
        doc.update(extra)
    path = str(out_path) + ".run.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, default=str)
        fh.write("\n")


def _hyper_from_args(args):
    return HyperParams(
        d=args.d,
        layers=args.layers,
        heads=args.heads,
        dropout_p=args.dropout,
        leaky_slope=args.leaky_slope,
        precision=args.precision,
    )


def cmd_synth(args):
    config = SynthConfig(
        n_samples=args.n_samples,
        qas_min=args.qas_min,
        qas_max=args.qas_max,
        f=args.f,
        noise_rate=args.noise_rate,
        noise_kinds=tuple(args.noise_kinds.split(",")),
        seed=args.seed,
    )
    corpus, oracle = synth_corpus(config)
    write_corpus(corpus, args.out, packed=args.packed)
    if args.oracle:
        write_json(oracle_to_dict(oracle, config), args.oracle)
    _write_run_json(args.out, args, {"n_qas": corpus.n_qas, "n_corrupt": len(oracle)})
    log.info("synth: %d samples, %d QAs, %d corrupt -> %s", len(corpus.samples), corpus.n_qas, len(oracle), args.out)
    return 0


def cmd_validate(args):
    try:
        corpus = load_corpus(args.corpus)
        report = validate_corpus(corpus)
    except CorpusError as exc:
        log.error("%s", exc)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump({"fatal": str(exc)}, fh, indent=2)
        return 1
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        _write_run_json(args.out, args)
    print(
        f"samples={report.n_samples} qas={report.n_qas} "
        f"errors={len(report.errors)} warnings={len(report.warnings)}"
    )
    for sid, code, msg in report.warnings[:20]:
        log.warning("%s: %s: %s", sid, code, msg)
    return 0 if report.ok else 1


def cmd_build(args):
    corpus = load_corpus(args.corpus)
    graph = build_graph(
        corpus,
        alpha=args.alpha,
        no_clip_token=args.no_clip_token,
        no_nli=args.no_nli,
    )
    h = save_graph(graph, args.out, packed=args.packed)
    _write_run_json(args.out, args, {"graph_hash": h, "n_nodes": graph.n_nodes})
    log.info("build: %d nodes, hash %s -> %s", graph.n_nodes, h[:12], args.out)
    return 0


def cmd_train(args):
    graph = load_graph(args.graph)
    hyper = _hyper_from_args(args)
    config = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        clip_norm=args.clip_norm,
        loss_mix=getattr(args, "lambda"),
        class_weights_cap=(
            tuple(float(w) for w in args.class_weights.split(","))
            if args.class_weights
            else None
        ),
        seed=args.seed,
        optimizer=args.optimizer,
        eval_every=args.eval_every,
    )
    result = train(graph, hyper, config)
    ckpt_hash = save_checkpoint(result.params, args.out, result.graph_hash, config.to_dict())
    best_path = str(args.out) + ".best.json"
    save_checkpoint(result.best_params, best_path, result.graph_hash, config.to_dict())
    report_path = args.report or (str(args.out) + ".report.jsonl")
    with open(report_path, "w", encoding="utf-8") as fh:
        for row in result.report:
            fh.write(json.dumps(row) + "\n")
    _write_run_json(
        args.out,
        args,
        {
            "graph_hash": result.graph_hash,
            "checkpoint_hash": ckpt_hash,
            "diverged": result.diverged,
            "best_epoch": result.best_epoch,
            "final_loss": result.final_loss,
        },
    )
    if result.diverged:
        log.error("training diverged; last finite checkpoint written to %s", args.out)
        return 3
    log.info("train: %d epochs, final loss %.6f -> %s", len(result.report), result.final_loss or float("nan"), args.out)
    return 0


def cmd_score(args):
    graph = load_graph(args.graph)
    if args.method == "hicqa":
        if not args.checkpoint:
            log.error("--checkpoint is required for method hicqa")
            return 1
        params, ckpt_ghash, ckpt_hash, _ = load_checkpoint(args.checkpoint)
        scores = score_hicqa(
            graph, params, graph_hash(graph), ckpt_ghash, ckpt_hash, force=args.force
        )
    else:
        scores = score_baseline(graph, args.method, weight=args.weight)
    write_json(scores, args.out)
    _write_run_json(args.out, args)
    return 0


def cmd_filter(args):
    graph = load_graph(args.graph)
    with open(args.scores, encoding="utf-8") as fh:
        scores = ScoreSet.from_dict(json.load(fh))
    if scores.qa_ids != graph.qa_ids():
        log.error("scores were computed for a different graph (qa ids differ)")
        return 1
    manifest = filter_topk(
        scores,
        args.ratio,
        graph_hash_value=graph_hash(graph),
        checkpoint_hash=scores.params.get("checkpoint_hash"),
    )
    write_json(manifest, args.out)
    if args.corpus and args.filtered_corpus:
        corpus = load_corpus(args.corpus)
        write_corpus(filtered_corpus(corpus, manifest), args.filtered_corpus)
    _write_run_json(args.out, args, {"kept": len(manifest.kept_qa_ids)})
    log.info("filter: kept %d of %d", len(manifest.kept_qa_ids), len(scores.qa_ids))
    return 0


def cmd_eval(args):
    with open(args.scores, encoding="utf-8") as fh:
        scores = ScoreSet.from_dict(json.load(fh))
    with open(args.oracle, encoding="utf-8") as fh:
        corrupt = oracle_from_dict(json.load(fh))
    if args.graph:
        graph = load_graph(args.graph)
        if scores.qa_ids != graph.qa_ids():
            log.error("scores do not align with the graph's QA ids")
            return 1
    ratios = [float(r) for r in args.ratios.split(",")]
    metrics = eval_detection(scores, set(corrupt), ratios)
    write_json(metrics, args.out)
    _write_run_json(args.out, args)
    print(json.dumps({"method": scores.method, "auroc": metrics.auroc}))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import toy_gradcheck_both

    double_err, single_err = toy_gradcheck_both(
        f=args.f,
        d=args.d,
        heads=args.heads,
        layers=args.layers,
        step=args.step,
        seed=args.seed,
    )
    print(f"max relative gradient error: double={double_err:.3e} single={single_err:.3e}")
    ok = double_err < args.tolerance_double and single_err < args.tolerance_single
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "max_rel_error_double": double_err,
                    "max_rel_error_single": single_err,
                    "tolerance_double": args.tolerance_double,
                    "tolerance_single": args.tolerance_single,
                    "ok": ok,
                },
                fh,
                indent=2,
            )
        _write_run_json(args.out, args)
    return 0 if ok else 2


def build_parser():
    p = argparse.ArgumentParser(prog="hicqa", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a planted-noise corpus with oracle labels")
    sp.add_argument("--n-samples", type=int, default=100)
    sp.add_argument("--qas-min", type=int, default=2)
    sp.add_argument("--qas-max", type=int, default=4)
    sp.add_argument("--f", type=int, default=64)
    sp.add_argument("--noise-rate", type=float, default=0.25)
    sp.add_argument("--noise-kinds", default="caption_contradiction,image_misalignment,duplicate_qa")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--packed", action="store_true")
    sp.add_argument("--out", required=True)
    sp.add_argument("--oracle")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("validate", help="validate a corpus manifest")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("build", help="build the hetero graph from a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--no-clip-token", action="store_true")
    sp.add_argument("--no-nli", action="store_true")
    sp.add_argument("--packed", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("train", help="train the model on a graph's weak labels")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--weight-decay", type=float, default=1e-4)
    sp.add_argument("--clip-norm", type=float, default=1.0)
    sp.add_argument("--lambda", type=float, default=0.5, dest="lambda")
    sp.add_argument("--class-weights")
    sp.add_argument("--optimizer", choices=("adamw", "sgd"), default="adamw")
    sp.add_argument("--eval-every", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--d", type=int, default=256)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--dropout", type=float, default=0.1)
    sp.add_argument("--leaky-slope", type=float, default=0.2)
    sp.add_argument("--precision", choices=("single", "double"), default="single")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="score QAs with a checkpoint or a baseline")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--method", choices=("hicqa", "nli", "clip", "nclip"), default="hicqa")
    sp.add_argument("--checkpoint")
    sp.add_argument("--weight", type=float, default=0.5, help="nclip fusion weight")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("filter", help="emit a keep manifest at a ratio")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--ratio", type=float, required=True)
    sp.add_argument("--corpus")
    sp.add_argument("--filtered-corpus")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("eval", help="detection metrics against an oracle")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--oracle", required=True)
    sp.add_argument("--graph")
    sp.add_argument("--ratios", default="0.25,0.5,0.75")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    sp.add_argument("--f", type=int, default=4)
    sp.add_argument("--d", type=int, default=16)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--step", type=float, default=1e-4)
    sp.add_argument("--tolerance-double", type=float, default=1e-5)
    sp.add_argument("--tolerance-single", type=float, default=1e-3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("HICQA_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (CorpusError, ModelError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
