import json

import numpy as np
import pytest
from PIL import Image

CAPACITIES = ("EU", "HG", "EP")


@pytest.fixture
def raw_fixture(tmp_path):
    """10-image raw directory with captions and 1-2 QAs per sample."""
    rng = np.random.default_rng(7)
    samples = []
    for i in range(10):
        name = f"img_{i:02d}.png"
        pixels = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        Image.fromarray(pixels, "RGB").save(tmp_path / name)
        qas = []
        for k in range(1 + i % 2):
            qas.append(
                {
                    "qa_id": f"q{i}_{k}",
                    "question_text": f"what structure appears in region {k} of figure {i}",
                    "answer_text": f"a stained cell nucleus variant {i}",
                    "capacity_label": CAPACITIES[(i + k) % 3],
                }
            )
        samples.append(
            {
                "sample_id": f"fig{i:03d}",
                "image": name,
                "caption_text": f"figure {i} shows a stained cell nucleus variant {i} under light microscopy",
                "qas": qas,
            }
        )
    (tmp_path / "raw.json").write_text(json.dumps({"samples": samples}), encoding="utf-8")
    return tmp_path
