import json

import numpy as np
import pytest

from kgfusion.kg import parse_triples, save_triples
from kgfusion.model import EncoderConfig, build_encoder
from kgfusion.synthetic import make_planted_kg, make_probe_task
from kgfusion.tasks import rows_from_tuples, save_task


@pytest.fixture
def typed_lines():
    return [
        "s1\tinduces\to1\tsubstance\tdisease",
        "s2\tinduces\to2\tphysiology\tdisease",
        "s3\ttreats\to3\tsubstance\tdisease",
    ]


@pytest.fixture
def typed_kg(typed_lines):
    return parse_triples(typed_lines, "typed")


@pytest.fixture
def fused_kg(typed_lines):
    return parse_triples(typed_lines, "fused")


@pytest.fixture
def tiny_encoder():
    cfg = EncoderConfig(vocab_size=30, max_positions=10, hidden=16, layers=2, heads=2, dropout=0.0)
    return build_encoder(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _write_inputs(root):
    """Small planted graph, probe task and pipeline config under ``root``; returns the config path."""
    planted = make_planted_kg(40, 150, n_communities=2, seed=0)
    save_triples(planted.kg, root / "kg.tsv")
    for split, rows in make_probe_task(planted, seed=0).items():
        save_task(rows_from_tuples(rows), root / f"{split}.tsv")
    cfg = {
        "triples": str(root / "kg.tsv"), "out_dir": str(root / "run"), "partition": {"k": 2},
        "encoder": {"hidden": 16, "layers": 2, "heads": 2, "init_std": 0.1},
        "adapter_train": {"epochs": 2, "max_seq_len": 12, "holdout_fraction": 0.0},
        "fusion_train": {"epochs": 2, "max_seq_len": 12},
        "task": {s: str(root / f"{s}.tsv") for s in ("train", "val", "test")},
        "seeds": [0, 1],
    }
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root / "cfg.json"


@pytest.fixture(scope="session")
def write_inputs():
    return _write_inputs
