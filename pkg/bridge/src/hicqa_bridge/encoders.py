"""Pluggable embedding and entailment backends.

Two families:

  * ``hf``: CLIP ViT-L/14-style image/text towers and an XLM-R NLI
    cross-encoder via HuggingFace transformers. Heavy deps are imported
    lazily so the stub path needs neither torch nor transformers.
  * ``stub``: deterministic, dependency-light encoders (pixel thumbnails,
    hashed character n-grams, lexical-overlap entailment). They produce
    valid, reproducible manifests for tests and offline smoke runs; they
    are not semantically meaningful.

Both satisfy the same contract: unit-norm float vectors of a fixed width,
and 3-class probability rows that sum to 1.
"""

import hashlib

import numpy as np

CLIP_TOKEN_LIMIT = 75


class BridgeError(Exception):
    pass


def _l2_normalize(mat):
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise BridgeError("encoder produced a zero-norm embedding")
    return mat / norms


# ---------------------------------------------------------------------------
# stub backend


class StubEncoder:
    """Deterministic image/text encoder: 8x8 grayscale thumbnails and
    hashed character trigrams, both L2-normalized. f = 64."""

    f = 64

    def encode_images(self, images):
        rows = []
        for img in images:
            thumb = img.convert("L").resize((8, 8))
            rows.append(np.asarray(thumb, dtype=np.float64).reshape(-1) + 1.0)
        return _l2_normalize(np.stack(rows))

    def encode_texts(self, texts):
        rows = np.zeros((len(texts), self.f), dtype=np.float64)
        for i, text in enumerate(texts):
            padded = f"  {text.lower()} "
            for j in range(len(padded) - 2):
                gram = padded[j : j + 3].encode("utf-8")
                h = int.from_bytes(hashlib.blake2b(gram, digest_size=8).digest(), "little")
                rows[i, h % self.f] += 1.0 if (h >> 8) % 2 else -1.0
            if not rows[i].any():
                rows[i, 0] = 1.0
        return _l2_normalize(rows)

    def token_count(self, text):
        return len(text.split())

    def truncate(self, text, limit):
        return " ".join(text.split()[:limit])


class StubNli:
    """Lexical-overlap entailment: the fraction of hypothesis tokens found
    in the premise drives the entailment probability. Rows sum to 1."""

    labels = ("contradiction", "neutral", "entailment")

    def probabilities(self, premises, hypotheses):
        out = np.zeros((len(premises), 3), dtype=np.float64)
        for i, (prem, hyp) in enumerate(zip(premises, hypotheses)):
            p_tokens = set(prem.lower().split())
            h_tokens = hyp.lower().split()
            overlap = (
                sum(1 for t in h_tokens if t in p_tokens) / len(h_tokens) if h_tokens else 0.0
            )
            logits = np.array([1.0 - overlap, 1.0, 1.0 + 2.0 * overlap])
            e = np.exp(logits - logits.max())
            out[i] = e / e.sum()
        return out

    def entailment_probability(self, premises, hypotheses):
        return self.probabilities(premises, hypotheses)[:, self.labels.index("entailment")]


# ---------------------------------------------------------------------------
# huggingface backend


class HfClipEncoder:
    """CLIP image/text towers; embeddings are the projected features,
    L2-normalized. Text is tokenized with the model's own tokenizer and
    hard-limited to the 75-token effective window."""

    def __init__(self, model_id, device="cpu", batch_size=16):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise BridgeError(f"hf backend needs torch+transformers: {exc}") from exc
        self._torch = torch
        try:
            self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
            self.processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise BridgeError(f"cannot load CLIP model {model_id!r}: {exc}") from exc
        self.device = device
        self.batch_size = batch_size
        self.f = int(self.model.config.projection_dim)

    def _batches(self, items):
        for i in range(0, len(items), self.batch_size):
            yield items[i : i + self.batch_size]

    def encode_images(self, images):
        chunks = []
        with self._torch.no_grad():
            for batch in self._batches(images):
                inputs = self.processor(images=batch, return_tensors="pt").to(self.device)
                feats = self.model.get_image_features(**inputs)
                chunks.append(feats.cpu().double().numpy())
        return _l2_normalize(np.concatenate(chunks))

    def encode_texts(self, texts):
        chunks = []
        with self._torch.no_grad():
            for batch in self._batches(texts):
                inputs = self.processor(
                    text=batch, return_tensors="pt", padding=True, truncation=True
                ).to(self.device)
                feats = self.model.get_text_features(**inputs)
                chunks.append(feats.cpu().double().numpy())
        return _l2_normalize(np.concatenate(chunks))

    def token_count(self, text):
        return len(self.processor.tokenizer(text, add_special_tokens=False)["input_ids"])

    def truncate(self, text, limit):
        ids = self.processor.tokenizer(text, add_special_tokens=False)["input_ids"][:limit]
        return self.processor.tokenizer.decode(ids).strip()


class HfNliScorer:
    """Cross-encoder NLI probabilities; the entailment class index is read
    from the model's label map."""

    def __init__(self, model_id, device="cpu", batch_size=16):
        try:
            import torch
            from transformers import AutoModelForSequenceClassification, AutoTokenizer
        except ImportError as exc:
            raise BridgeError(f"hf backend needs torch+transformers: {exc}") from exc
        self._torch = torch
        try:
            self.model = (
                AutoModelForSequenceClassification.from_pretrained(model_id).to(device).eval()
            )
            self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        except Exception as exc:
            raise BridgeError(f"cannot load NLI model {model_id!r}: {exc}") from exc
        self.device = device
        self.batch_size = batch_size
        id2label = {int(k): v.lower() for k, v in self.model.config.id2label.items()}
        self.labels = tuple(id2label[i] for i in sorted(id2label))
        matches = [i for i, lab in enumerate(self.labels) if "entail" in lab]
        if len(matches) != 1:
            raise BridgeError(
                f"cannot locate the entailment class in labels {self.labels}"
            )
        self.entailment_index = matches[0]

    def probabilities(self, premises, hypotheses):
        chunks = []
        with self._torch.no_grad():
            for i in range(0, len(premises), self.batch_size):
                inputs = self.tokenizer(
                    premises[i : i + self.batch_size],
                    hypotheses[i : i + self.batch_size],
                    return_tensors="pt",
                    padding=True,
                    truncation=True,
                ).to(self.device)
                logits = self.model(**inputs).logits
                probs = self._torch.softmax(logits, dim=-1)
                chunks.append(probs.cpu().double().numpy())
        return np.concatenate(chunks)

    def entailment_probability(self, premises, hypotheses):
        return self.probabilities(premises, hypotheses)[:, self.entailment_index]


def make_backend(name, clip_model, nli_model, device="cpu", batch_size=16):
    if name == "stub":
        return StubEncoder(), StubNli()
    if name == "hf":
        return (
            HfClipEncoder(clip_model, device=device, batch_size=batch_size),
            HfNliScorer(nli_model, device=device, batch_size=batch_size),
        )
    raise BridgeError(f"unknown backend {name!r}")


def entailment_calibration_probe(nli):
    """Sanity check for a competent NLI model: a premise should entail
    itself with high probability. Returns the probability."""
    probe = "the image shows stained mitochondria in a fibroblast"
    return float(nli.entailment_probability([probe], [probe])[0])
