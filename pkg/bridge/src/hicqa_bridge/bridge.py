"""Export a raw image/caption/QA directory into a corpus manifest.

Input layout: a directory holding image files and a ``raw.json``::

    {"samples": [
        {"sample_id": "...", "image": "relative/path.png",
         "caption_text": "...",
         "qas": [{"qa_id": "...", "question_text": "...",
                  "answer_text": "...", "capacity_label": "EU"|"HG"|"EP"}]}
    ]}

The output is the primary pipeline's JSONL corpus manifest: header line
``{"format": "hicqa-corpus", "version": 1, "f": <int>}`` then one sample
object per line with unit-norm embeddings and the entailment probability
of (premise = caption, hypothesis = answer) per QA. The file is written
to a temp path and atomically renamed.
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path

from PIL import Image

from .encoders import CLIP_TOKEN_LIMIT, BridgeError, make_backend

CAPACITY_LABELS = ("EU", "HG", "EP")


@dataclass
class BridgeConfig:
    clip_model: str = "openai/clip-vit-large-patch14"
    nli_model: str = "joeddav/xlm-roberta-large-xnli"
    backend: str = "hf"  # hf | stub
    batch_size: int = 16
    device: str = "cpu"
    truncation_policy: str = "truncate"  # truncate | error

    def __post_init__(self):
        if self.truncation_policy not in ("truncate", "error"):
            raise BridgeError(f"unknown truncation policy {self.truncation_policy!r}")
        if self.backend not in ("hf", "stub"):
            raise BridgeError(f"unknown backend {self.backend!r}")


def _load_raw(raw_dir):
    raw_dir = Path(raw_dir)
    spec_path = raw_dir / "raw.json"
    try:
        doc = json.loads(spec_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise BridgeError(f"cannot read {spec_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BridgeError(f"{spec_path}: malformed JSON: {exc}") from exc
    samples = doc.get("samples")
    if not isinstance(samples, list) or not samples:
        raise BridgeError(f"{spec_path}: 'samples' must be a nonempty list")
    for s in samples:
        for key in ("sample_id", "image", "caption_text", "qas"):
            if key not in s:
                raise BridgeError(f"{spec_path}: sample missing field {key!r}")
        if not s["qas"]:
            raise BridgeError(f"sample {s['sample_id']!r} has no QAs")
        for qa in s["qas"]:
            for key in ("qa_id", "question_text", "answer_text", "capacity_label"):
                if key not in qa:
                    raise BridgeError(
                        f"sample {s['sample_id']!r} QA missing field {key!r}"
                    )
            if qa["capacity_label"] not in CAPACITY_LABELS:
                raise BridgeError(
                    f"sample {s['sample_id']!r} QA {qa['qa_id']!r}: "
                    f"unknown capacity label {qa['capacity_label']!r}"
                )
    return raw_dir, samples


def _apply_text_policy(texts, owners, encoder, policy):
    """Enforce the effective text-length window; the policy decides
    between hard truncation and rejection."""
    out = []
    for text, owner in zip(texts, owners):
        if encoder.token_count(text) > CLIP_TOKEN_LIMIT:
            if policy == "error":
                raise BridgeError(
                    f"{owner}: text exceeds {CLIP_TOKEN_LIMIT} tokens under policy 'error'"
                )
            text = encoder.truncate(text, CLIP_TOKEN_LIMIT)
        out.append(text)
    return out


def encode_corpus(raw_dir, out_path, config=None):
    """Encode a raw directory into a manifest at ``out_path``; returns the
    number of samples written."""
    config = config or BridgeConfig()
    raw_dir, samples = _load_raw(raw_dir)
    encoder, nli = make_backend(
        config.backend,
        config.clip_model,
        config.nli_model,
        device=config.device,
        batch_size=config.batch_size,
    )

    images = []
    for s in samples:
        path = raw_dir / s["image"]
        try:
            with Image.open(path) as img:
                images.append(img.convert("RGB"))
        except OSError as exc:
            raise BridgeError(f"unreadable image {path}: {exc}") from exc

    captions = _apply_text_policy(
        [s["caption_text"] for s in samples],
        [f"sample {s['sample_id']!r} caption" for s in samples],
        encoder,
        config.truncation_policy,
    )
    qa_texts, qa_owners, premises, hypotheses = [], [], [], []
    for s, caption in zip(samples, captions):
        for qa in s["qas"]:
            qa_texts.append(f"{qa['question_text']} {qa['answer_text']}")
            qa_owners.append(f"sample {s['sample_id']!r} QA {qa['qa_id']!r}")
            premises.append(caption)
            hypotheses.append(qa["answer_text"])
    qa_texts = _apply_text_policy(qa_texts, qa_owners, encoder, config.truncation_policy)

    image_emb = encoder.encode_images(images)
    caption_emb = encoder.encode_texts(captions)
    qa_emb = encoder.encode_texts(qa_texts)
    entailment = nli.entailment_probability(premises, hypotheses)

    f = image_emb.shape[1]
    header = {
        "format": "hicqa-corpus",
        "version": 1,
        "f": f,
        "source_meta": {
            "bridge": "hicqa-bridge",
            "backend": config.backend,
            "clip_model": config.clip_model if config.backend == "hf" else "stub",
            "nli_model": config.nli_model if config.backend == "hf" else "stub",
        },
    }
    lines = [json.dumps(header)]
    qa_at = 0
    for i, (s, caption) in enumerate(zip(samples, captions)):
        qas = []
        for qa in s["qas"]:
            qas.append(
                {
                    "qa_id": qa["qa_id"],
                    "question_text": qa["question_text"],
                    "answer_text": qa["answer_text"],
                    "qa_embedding": [float(v) for v in qa_emb[qa_at]],
                    "nli_entailment": float(entailment[qa_at]),
                    "capacity_label": qa["capacity_label"],
                }
            )
            qa_at += 1
        lines.append(
            json.dumps(
                {
                    "sample_id": s["sample_id"],
                    "image_embedding": [float(v) for v in image_emb[i]],
                    "caption_embedding": [float(v) for v in caption_emb[i]],
                    "caption_text": caption,
                    "qas": qas,
                }
            )
        )

    out_path = Path(out_path)
    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, out_path)
    return len(samples)
