"""CLI: encode a raw image/caption/QA directory into a corpus manifest."""

import argparse
import logging
import sys

from .bridge import BridgeConfig, encode_corpus
from .encoders import BridgeError

log = logging.getLogger("hicqa-bridge")


def build_parser():
    p = argparse.ArgumentParser(prog="hicqa-bridge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("encode", help="encode a raw directory into a manifest")
    sp.add_argument("--raw", required=True, help="directory containing raw.json and images")
    sp.add_argument("--out", required=True)
    sp.add_argument("--backend", choices=("hf", "stub"), default="hf")
    sp.add_argument("--clip-model", default="openai/clip-vit-large-patch14")
    sp.add_argument("--nli-model", default="joeddav/xlm-roberta-large-xnli")
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--device", default="cpu")
    sp.add_argument("--truncation", choices=("truncate", "error"), default="truncate")
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    config = BridgeConfig(
        clip_model=args.clip_model,
        nli_model=args.nli_model,
        backend=args.backend,
        batch_size=args.batch_size,
        device=args.device,
        truncation_policy=args.truncation,
    )
    try:
        n = encode_corpus(args.raw, args.out, config)
    except BridgeError as exc:
        log.error("%s", exc)
        return 1
    log.info("encoded %d samples -> %s", n, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
