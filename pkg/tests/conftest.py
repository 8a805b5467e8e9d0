import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hicqa.corpus import CAPACITY_LABELS, Corpus, QARecord, Sample


def unit_vec(rng, f):
    v = rng.normal(size=f)
    return v / np.linalg.norm(v)


def random_corpus(rng, n_samples=3, qas=(1, 4), f=6):
    """Hand-rolled valid corpus with random unit embeddings."""
    samples = []
    q = 0
    for i in range(n_samples):
        k = int(rng.integers(qas[0], qas[1] + 1))
        qa_list = []
        for _ in range(k):
            qa_list.append(
                QARecord(
                    qa_id=f"q{q:04d}",
                    question_text=f"question {q}",
                    answer_text=f"answer {q}",
                    qa_embedding=unit_vec(rng, f),
                    nli_entailment=float(rng.uniform()),
                    capacity_label=CAPACITY_LABELS[int(rng.integers(3))],
                )
            )
            q += 1
        samples.append(
            Sample(
                sample_id=f"s{i:03d}",
                image_embedding=unit_vec(rng, f),
                caption_embedding=unit_vec(rng, f),
                caption_text=f"caption for sample {i}",
                qas=qa_list,
            )
        )
    return Corpus(f=f, samples=samples)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
