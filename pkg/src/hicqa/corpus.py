"""Corpus manifest loading, validation, and persistence.

A corpus bundles precomputed embeddings and entailment scores, so nothing
downstream needs a vision or language model. The on-disk format is JSONL:
a header line ``{"format": "hicqa-corpus", "version": 1, "f": <int>}``
followed by one sample object per line. Embedding fields are either an
inline float array of length f or ``{"ref": <row>}`` pointing into a
packed float32 sidecar (``<manifest>.f32``, little-endian row-major, with
a ``<manifest>.f32.index.json`` id-to-row map).
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_NAME = "hicqa-corpus"
FORMAT_VERSION = 1
CAPACITY_LABELS = ("EU", "HG", "EP")
CLIP_TOKEN_LIMIT = 75

# validation codes
DUP_ID = "DUP_ID"
DUP_QA_ID = "DUP_QA_ID"
DIM_MISMATCH = "DIM_MISMATCH"
NLI_RANGE = "NLI_RANGE"
BAD_CAPACITY = "BAD_CAPACITY"
ZERO_NORM = "ZERO_NORM"
NOT_NORMALIZED = "NOT_NORMALIZED"
NO_QAS = "NO_QAS"
BAD_F = "BAD_F"
TEXT_OVER_CLIP_LIMIT = "TEXT_OVER_CLIP_LIMIT"


class CorpusError(Exception):
    """Manifest cannot be loaded or fails validation."""


@dataclass
class QARecord:
    qa_id: str
    question_text: str
    answer_text: str
    qa_embedding: np.ndarray
    nli_entailment: float
    capacity_label: str


@dataclass
class Sample:
    sample_id: str
    image_embedding: np.ndarray
    caption_embedding: np.ndarray
    caption_text: str
    qas: list


@dataclass
class Corpus:
    f: int
    samples: list
    source_meta: dict = field(default_factory=dict)

    @property
    def n_qas(self):
        return sum(len(s.qas) for s in self.samples)


@dataclass
class ValidationReport:
    n_samples: int
    n_qas: int
    errors: list
    warnings: list

    @property
    def ok(self):
        return not self.errors

    def to_dict(self):
        return {
            "n_samples": self.n_samples,
            "n_qas": self.n_qas,
            "errors": [list(e) for e in self.errors],
            "warnings": [list(w) for w in self.warnings],
        }


def normalize_rows(vec):
    """Unit-normalize, skipping vectors already within 1e-12 of unit norm
    so that reloading a written corpus is bit-exact."""
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:
        raise CorpusError("zero-norm embedding cannot be normalized")
    if abs(norm - 1.0) <= 1e-12:
        return vec
    return vec / norm


def _token_count(text):
    return len(text.split())


class _SidecarReader:
    def __init__(self, manifest_path, f):
        self.path = Path(str(manifest_path) + ".f32")
        self.f = f
        self._matrix = None

    def row(self, ref):
        if self._matrix is None:
            if not self.path.exists():
                raise CorpusError(f"embedding ref used but sidecar {self.path} is missing")
            raw = np.fromfile(self.path, dtype="<f4")
            if raw.size % self.f != 0:
                raise CorpusError(f"sidecar {self.path} size is not a multiple of f={self.f}")
            self._matrix = raw.reshape(-1, self.f)
        if not 0 <= ref < self._matrix.shape[0]:
            raise CorpusError(f"sidecar row {ref} out of range")
        return self._matrix[ref].astype(np.float64)


def _parse_embedding(obj, f, sidecar, where):
    if isinstance(obj, dict):
        if "ref" not in obj:
            raise CorpusError(f"{where}: embedding object must carry a 'ref' row")
        return sidecar.row(int(obj["ref"]))
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != f:
        raise CorpusError(f"{where}: embedding length {arr.shape} does not match f={f}")
    if not np.all(np.isfinite(arr)):
        raise CorpusError(f"{where}: embedding contains non-finite values")
    return arr


def _parse_qa(obj, f, sidecar, sample_id):
    qa_id = str(obj["qa_id"])
    where = f"sample {sample_id!r} qa {qa_id!r}"
    nli = obj["nli_entailment"]
    if not isinstance(nli, (int, float)) or math.isnan(nli) or not 0.0 <= nli <= 1.0:
        raise CorpusError(f"{where}: nli_entailment {nli!r} outside [0, 1]")
    cap = obj["capacity_label"]
    if cap not in CAPACITY_LABELS:
        raise CorpusError(f"{where}: unknown capacity label {cap!r}")
    emb = normalize_rows(_parse_embedding(obj["qa_embedding"], f, sidecar, where))
    return QARecord(
        qa_id=qa_id,
        question_text=str(obj.get("question_text", "")),
        answer_text=str(obj.get("answer_text", "")),
        qa_embedding=emb,
        nli_entailment=float(nli),
        capacity_label=cap,
    )


def load_corpus(path):
    """Parse, normalize, and validate a manifest; raises CorpusError on any
    structural problem (with the offending line) or validation error."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise CorpusError(f"{path}: empty manifest")

    def parse_line(i):
        try:
            return json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{i + 1}: malformed JSON: {exc}") from exc

    header = parse_line(0)
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise CorpusError(f"{path}:1: missing '{FORMAT_NAME}' header")
    if header.get("version") != FORMAT_VERSION:
        raise CorpusError(f"{path}:1: unsupported version {header.get('version')!r}")
    f = header.get("f")
    if not isinstance(f, int) or f <= 0:
        raise CorpusError(f"{path}:1: header f must be a positive integer")

    sidecar = _SidecarReader(path, f)
    samples = []
    for i in range(1, len(lines)):
        if not lines[i].strip():
            continue
        obj = parse_line(i)
        try:
            sample_id = str(obj["sample_id"])
            where = f"sample {sample_id!r}"
            image = normalize_rows(_parse_embedding(obj["image_embedding"], f, sidecar, where))
            caption = normalize_rows(
                _parse_embedding(obj["caption_embedding"], f, sidecar, where)
            )
            qas = [_parse_qa(q, f, sidecar, sample_id) for q in obj["qas"]]
        except KeyError as exc:
            raise CorpusError(f"{path}:{i + 1}: missing field {exc}") from exc
        except CorpusError as exc:
            raise CorpusError(f"{path}:{i + 1}: {exc}") from exc
        samples.append(
            Sample(
                sample_id=sample_id,
                image_embedding=image,
                caption_embedding=caption,
                caption_text=str(obj.get("caption_text", "")),
                qas=qas,
            )
        )

    corpus = Corpus(f=f, samples=samples, source_meta=dict(header.get("source_meta", {})))
    report = validate_corpus(corpus)
    if not report.ok:
        details = "; ".join(f"{sid}: {code}: {msg}" for sid, code, msg in report.errors[:8])
        raise CorpusError(f"{path}: {len(report.errors)} validation error(s): {details}")
    return corpus


def validate_corpus(corpus):
    """Enumerate every violated invariant; never raises on bad data."""
    errors = []
    warnings = []
    if corpus.f <= 0:
        errors.append(("", BAD_F, f"f must be positive, got {corpus.f}"))
    seen_ids = set()
    for s in corpus.samples:
        if s.sample_id in seen_ids:
            errors.append((s.sample_id, DUP_ID, "duplicate sample_id"))
        seen_ids.add(s.sample_id)
        if not s.qas:
            errors.append((s.sample_id, NO_QAS, "sample has no QA records"))
        if _token_count(s.caption_text) > CLIP_TOKEN_LIMIT:
            warnings.append(
                (
                    s.sample_id,
                    TEXT_OVER_CLIP_LIMIT,
                    f"caption has {_token_count(s.caption_text)} tokens (> {CLIP_TOKEN_LIMIT})",
                )
            )
        for name, vec in (("image", s.image_embedding), ("caption", s.caption_embedding)):
            if vec.shape != (corpus.f,):
                errors.append(
                    (s.sample_id, DIM_MISMATCH, f"{name} embedding has length {vec.shape[0]}")
                )
                continue
            norm = float(np.linalg.norm(vec))
            if norm < 1e-12:
                errors.append((s.sample_id, ZERO_NORM, f"{name} embedding has zero norm"))
            elif abs(norm - 1.0) > 1e-4:
                errors.append(
                    (s.sample_id, NOT_NORMALIZED, f"{name} embedding norm {norm:.6f}")
                )
        seen_qa = set()
        for qa in s.qas:
            if qa.qa_id in seen_qa:
                errors.append((s.sample_id, DUP_QA_ID, f"duplicate qa_id {qa.qa_id!r}"))
            seen_qa.add(qa.qa_id)
            if qa.qa_embedding.shape != (corpus.f,):
                errors.append(
                    (
                        s.sample_id,
                        DIM_MISMATCH,
                        f"qa {qa.qa_id!r} embedding has length {qa.qa_embedding.shape[0]}",
                    )
                )
            else:
                norm = float(np.linalg.norm(qa.qa_embedding))
                if norm < 1e-12:
                    errors.append((s.sample_id, ZERO_NORM, f"qa {qa.qa_id!r} zero norm"))
                elif abs(norm - 1.0) > 1e-4:
                    errors.append(
                        (s.sample_id, NOT_NORMALIZED, f"qa {qa.qa_id!r} norm {norm:.6f}")
                    )
            if not 0.0 <= qa.nli_entailment <= 1.0:
                errors.append(
                    (s.sample_id, NLI_RANGE, f"qa {qa.qa_id!r} nli {qa.nli_entailment}")
                )
            if qa.capacity_label not in CAPACITY_LABELS:
                errors.append(
                    (s.sample_id, BAD_CAPACITY, f"qa {qa.qa_id!r} label {qa.capacity_label!r}")
                )
            qa_tokens = _token_count(qa.question_text) + _token_count(qa.answer_text)
            if qa_tokens > CLIP_TOKEN_LIMIT:
                warnings.append(
                    (
                        s.sample_id,
                        TEXT_OVER_CLIP_LIMIT,
                        f"qa {qa.qa_id!r} question+answer has {qa_tokens} tokens",
                    )
                )
    return ValidationReport(
        n_samples=len(corpus.samples),
        n_qas=corpus.n_qas,
        errors=errors,
        warnings=warnings,
    )


def _qa_to_dict(qa, emb):
    return {
        "qa_id": qa.qa_id,
        "question_text": qa.question_text,
        "answer_text": qa.answer_text,
        "qa_embedding": emb,
        "nli_entailment": qa.nli_entailment,
        "capacity_label": qa.capacity_label,
    }


def write_corpus(corpus, path, packed=False):
    """Write a manifest. Inline mode round-trips bit-exactly; packed mode
    stores embeddings as float32 sidecar rows (lossy, compact)."""
    path = Path(path)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "f": corpus.f}
    if corpus.source_meta:
        header["source_meta"] = corpus.source_meta

    rows = []
    index = {}

    def emb_field(key, vec):
        if not packed:
            return [float(v) for v in vec]
        index[key] = len(rows)
        rows.append(np.asarray(vec, dtype="<f4"))
        return {"ref": index[key]}

    lines = [json.dumps(header)]
    for s in corpus.samples:
        obj = {
            "sample_id": s.sample_id,
            "image_embedding": emb_field(f"image:{s.sample_id}", s.image_embedding),
            "caption_embedding": emb_field(f"caption:{s.sample_id}", s.caption_embedding),
            "caption_text": s.caption_text,
            "qas": [
                _qa_to_dict(qa, emb_field(f"qa:{s.sample_id}/{qa.qa_id}", qa.qa_embedding))
                for qa in s.qas
            ],
        }
        lines.append(json.dumps(obj))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        if packed:
            matrix = np.concatenate(rows) if rows else np.empty(0, dtype="<f4")
            matrix.tofile(str(path) + ".f32")
            Path(str(path) + ".f32.index.json").write_text(
                json.dumps(index, indent=0), encoding="utf-8"
            )
    except OSError as exc:
        raise CorpusError(f"cannot write {path}: {exc}") from exc
