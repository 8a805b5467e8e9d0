"""Synthetic corpora with planted corruption and a ground-truth oracle.

Clean QAs point near their sample's image direction on the unit sphere
and carry high entailment. Three corruption kinds:

  caption_contradiction  entailment resampled in [0, 0.2]; embedding clean
  image_misalignment     embedding redrawn nearly orthogonal to the image
  duplicate_qa           exact clone of a sibling QA (embedding,
                         entailment, capacity copied); only the clone is
                         marked corrupt, so it is separable from its
                         original solely through graph structure

The oracle maps qualified qa ids to their corruption kind. Generation is
a pure function of the config (Philox streams keyed by seed), so reruns
are byte-identical.
"""

from dataclasses import dataclass, field

import numpy as np

from .corpus import CAPACITY_LABELS, Corpus, QARecord, Sample
from .rng import STREAM_SYNTH, rng_for

NOISE_KINDS = ("caption_contradiction", "image_misalignment", "duplicate_qa")

# cosine-to-image bands for the generator (consistency token = (cos+1)/2)
_CLEAN_COS = (0.55, 0.90)
_MISALIGNED_COS = (-0.08, 0.08)
_CAPTION_COS = (0.60, 0.95)
_CLEAN_NLI = (0.70, 0.98)
_CORRUPT_NLI = (0.0, 0.2)


@dataclass
class SynthConfig:
    n_samples: int = 100
    qas_min: int = 2
    qas_max: int = 4
    f: int = 64
    noise_rate: float = 0.25
    noise_kinds: tuple = NOISE_KINDS
    seed: int = 0

    def __post_init__(self):
        if self.n_samples <= 0 or self.f <= 0:
            raise ValueError("n_samples and f must be positive")
        if not 1 <= self.qas_min <= self.qas_max:
            raise ValueError("need 1 <= qas_min <= qas_max")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        kinds = tuple(self.noise_kinds)
        unknown = set(kinds) - set(NOISE_KINDS)
        if unknown or not kinds:
            raise ValueError(f"noise_kinds must be a nonempty subset of {NOISE_KINDS}")
        self.noise_kinds = kinds
        if kinds == ("duplicate_qa",) and self.qas_max < 2:
            raise ValueError("duplicate_qa requires samples with at least 2 QAs")

    def to_dict(self):
        d = {
            "n_samples": self.n_samples,
            "qas_min": self.qas_min,
            "qas_max": self.qas_max,
            "f": self.f,
            "noise_rate": self.noise_rate,
            "noise_kinds": list(self.noise_kinds),
            "seed": self.seed,
        }
        return d


def _unit(v):
    return v / np.linalg.norm(v)


def _near(rng, anchor, cos_range):
    """Unit vector at a cosine to ``anchor`` drawn uniformly in cos_range."""
    while True:
        g = rng.normal(size=anchor.shape[0])
        ortho = g - np.dot(g, anchor) * anchor
        norm = np.linalg.norm(ortho)
        if norm > 1e-9:
            break
    ortho = ortho / norm
    c = rng.uniform(*cos_range)
    return _unit(c * anchor + np.sqrt(max(0.0, 1.0 - c * c)) * ortho)


def _capacity_for(embedding):
    """Deterministic capacity label from the embedding's leading coords,
    so the capacity head has a learnable target on synthetic data."""
    return CAPACITY_LABELS[int(np.argmax(embedding[:3]))]


def synth_corpus(config):
    """Returns (Corpus, oracle) where oracle maps 'sample_id/qa_id' of every
    corrupted QA to its noise kind. Exactly round(noise_rate * n_qas) QAs
    are corrupted."""
    rng = rng_for(config.seed, STREAM_SYNTH)
    ks = rng.integers(config.qas_min, config.qas_max + 1, size=config.n_samples)
    total = int(ks.sum())
    n_corrupt = int(round(config.noise_rate * total))

    # walk a random slot order assigning kinds until the exact quota is
    # met; duplicate_qa needs a sibling to clone, so each sample keeps at
    # least one non-duplicate slot
    slot_sample = np.repeat(np.arange(config.n_samples), ks)
    kinds = {}
    dup_count = {}
    for slot in rng.permutation(total).tolist():
        if len(kinds) == n_corrupt:
            break
        kind = config.noise_kinds[int(rng.integers(len(config.noise_kinds)))]
        sample = int(slot_sample[slot])
        if kind == "duplicate_qa":
            k = int(ks[sample])
            if k < 2 or dup_count.get(sample, 0) >= k - 1:
                fallback = [kd for kd in config.noise_kinds if kd != "duplicate_qa"]
                if not fallback:
                    continue  # this slot cannot host a duplicate; try others
                kind = fallback[int(rng.integers(len(fallback)))]
            else:
                dup_count[sample] = dup_count.get(sample, 0) + 1
        kinds[slot] = kind
    if len(kinds) < n_corrupt:
        raise ValueError(
            f"infeasible config: only {len(kinds)} of {n_corrupt} corruption "
            "slots can be placed (duplicate_qa needs >= 2 QAs per sample)"
        )

    samples = []
    oracle = {}
    slot = 0
    for i in range(config.n_samples):
        sid = f"s{i:05d}"
        image = _unit(rng.normal(size=config.f))
        caption = _near(rng, image, _CAPTION_COS)
        qas = []
        dup_requests = []  # (position in qas, slot id)
        for k in range(int(ks[i])):
            qid = f"q{slot:06d}"
            kind = kinds.get(slot)
            if kind == "duplicate_qa":
                dup_requests.append((len(qas), slot))
                qas.append(None)
                oracle[f"{sid}/{qid}"] = kind
            else:
                if kind == "image_misalignment":
                    emb = _near(rng, image, _MISALIGNED_COS)
                    nli = rng.uniform(*_CLEAN_NLI)
                elif kind == "caption_contradiction":
                    emb = _near(rng, image, _CLEAN_COS)
                    nli = rng.uniform(*_CORRUPT_NLI)
                else:
                    emb = _near(rng, image, _CLEAN_COS)
                    nli = rng.uniform(*_CLEAN_NLI)
                if kind is not None:
                    oracle[f"{sid}/{qid}"] = kind
                qas.append(
                    QARecord(
                        qa_id=qid,
                        question_text=f"what does region {k} of {sid} show",
                        answer_text=f"finding {k} in {sid}",
                        qa_embedding=emb,
                        nli_entailment=float(nli),
                        capacity_label=_capacity_for(emb),
                    )
                )
            slot += 1
        for pos, dup_slot in dup_requests:
            donors = [q for q in qas if q is not None]
            donor = donors[int(rng.integers(len(donors)))]
            qid = f"q{dup_slot:06d}"
            qas[pos] = QARecord(
                qa_id=qid,
                question_text=donor.question_text,
                answer_text=donor.answer_text,
                qa_embedding=donor.qa_embedding.copy(),
                nli_entailment=donor.nli_entailment,
                capacity_label=donor.capacity_label,
            )
        samples.append(
            Sample(
                sample_id=sid,
                image_embedding=image,
                caption_embedding=caption,
                caption_text=f"synthetic caption for {sid}",
                qas=qas,
            )
        )

    corpus = Corpus(
        f=config.f,
        samples=samples,
        source_meta={"generator": "synth", "seed": str(config.seed)},
    )
    return corpus, oracle


def oracle_to_dict(oracle, config):
    return {
        "format": "hicqa-oracle",
        "version": 1,
        "config": config.to_dict(),
        "corrupt": dict(sorted(oracle.items())),
    }


def oracle_from_dict(doc):
    return dict(doc["corrupt"])
