import math

import numpy as np
import pytest

from kgfusion import tensor as T
from kgfusion.corpus import MaskedEntityExample, PartitionDataset
from kgfusion.model import AdapterModule
from kgfusion.train import (
    AdamState,
    KnowledgeModel,
    NonFiniteError,
    RunReport,
    TrainConfig,
    accuracy,
    adam_update,
    clip_by_global_norm,
    evaluate,
    micro_f1,
    repeated_runs,
    stlr_lr,
    train_adapter,
    train_classifier,
    train_fusion,
)


def test_stlr_examples():
    peak = 1e-5
    assert stlr_lr(10, 100, peak) == peak
    assert stlr_lr(55, 100, peak) == pytest.approx(0.5 * peak)
    assert stlr_lr(100, 100, peak) == 0.0
    assert stlr_lr(1, 100, peak) == pytest.approx(0.1 * peak)
    with pytest.raises(ValueError):
        stlr_lr(0, 100, peak)
    with pytest.raises(ValueError):
        stlr_lr(101, 100, peak)


@pytest.mark.parametrize("total", [10, 100, 1000])
def test_stlr_shape(total):
    lrs = np.array([stlr_lr(s, total, 1.0) for s in range(1, total + 1)])
    peak = math.ceil(0.1 * total)
    assert lrs.argmax() + 1 == peak and lrs.max() == 1.0
    rise, fall = lrs[:peak], lrs[peak - 1:]
    if len(rise) > 2:
        assert np.abs(np.diff(rise, 2)).max() < 1e-12
    assert np.abs(np.diff(fall, 2)).max() < 1e-12


def test_adam_first_step_is_signed_lr():
    p = T.tensor([1.0, -2.0, 0.5])
    state = AdamState.for_params([p])
    adam_update([p], [np.array([0.3, -4.0, 0.0])], state, lr=0.01)
    assert np.allclose(p.data, [0.99, -1.99, 0.5], atol=1e-8)
    assert state.step == 1


def test_adam_zero_gradient_leaves_parameter():
    p = T.tensor([1.5, -0.5])
    state = AdamState.for_params([p])
    for _ in range(5):
        adam_update([p], [np.zeros(2)], state, lr=0.1)
    assert np.array_equal(p.data, [1.5, -0.5])


def test_adam_rejects_non_finite_and_misaligned():
    p = T.tensor([1.0])
    state = AdamState.for_params([p])
    with pytest.raises(NonFiniteError):
        adam_update([p], [np.array([np.nan])], state, 0.1)
    assert p.data[0] == 1.0 and state.step == 0
    with pytest.raises(ValueError):
        adam_update([p], [], state, 0.1)


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_by_global_norm(g, 1.0) == 5.0
    assert np.allclose([g[0][0], g[1][0]], [0.6, 0.8])
    h = [np.array([0.1])]
    clip_by_global_norm(h, 1.0)
    assert h[0][0] == 0.1


def test_metrics():
    assert accuracy([1, 0, 1], [1, 1, 1]) == pytest.approx(2 / 3)
    y = np.array([[1, 0], [1, 1]])
    p = np.array([[1, 1], [0, 1]])
    assert micro_f1(y, p) == pytest.approx(2 / 3)
    assert micro_f1(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert micro_f1(y, y) == 1.0 and accuracy([0, 1], [0, 1]) == 1.0
    assert accuracy([0, 1] * 5, [0] * 10) == 0.5
    with pytest.raises(ValueError):
        accuracy([], [])


def test_run_report_tsv_round_trip(tmp_path):
    r = RunReport([0, 1, 2], [0.5, 0.7, 0.9], [3, 4, 5])
    assert r.std == pytest.approx(0.2)
    text = r.to_tsv()
    assert text.splitlines()[0] == "seed\tmetric\tscore\tbest_epoch"
    assert text.splitlines()[-1] == "mean\t0.700000\tstd\t0.200000"
    r.save(tmp_path / "r.tsv")
    back = RunReport.load(tmp_path / "r.tsv")
    assert (back.seeds, back.scores, back.best_epochs) == (r.seeds, r.scores, r.best_epochs)


def test_repeated_runs_constant():
    r = repeated_runs(lambda s: (7, s), [1, 2, 3])
    assert r.scores == [7, 7, 7] and r.std == 0.0 and r.best_epochs == [1, 2, 3]
    with pytest.raises(ValueError):
        repeated_runs(lambda s: (0, 0), [])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(metric="auc")


def _entity_dataset(rng, n=12, labels=3, s=6):
    ids = rng.integers(5, 30, size=(n, s))
    ids[:, 0] = 2
    ex = [MaskedEntityExample(i, np.ones(s, dtype=np.int64), int(k % labels)) for k, i in enumerate(ids)]
    return PartitionDataset(0, list(range(labels)), ex, s)


def test_adapter_training_keeps_base_bytes(tiny_encoder, rng):
    before = tiny_encoder.to_bytes()
    cfg = TrainConfig(epochs=5, batch_size=4, learning_rate=1e-2, max_seq_len=6, holdout_fraction=0.25)
    adapter, head, report = train_adapter(tiny_encoder, _entity_dataset(rng), cfg, bottleneck=4)
    assert tiny_encoder.to_bytes() == before
    assert adapter.layer_indices == (0, 1)
    assert head.n_labels == 3
    assert report.history[0]["epoch"] == 0


def test_adapter_training_is_deterministic(tiny_encoder, rng):
    ds = _entity_dataset(rng)
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=1e-2, max_seq_len=6, seed=5)
    a1, h1, _ = train_adapter(tiny_encoder, ds, cfg, bottleneck=4)
    a2, h2, _ = train_adapter(tiny_encoder, ds, cfg, bottleneck=4)
    assert a1.to_bytes() == a2.to_bytes() and h1.to_bytes() == h2.to_bytes()


def test_early_stopping_respects_patience(tiny_encoder, rng):
    ds = _entity_dataset(rng)
    cfg = TrainConfig(epochs=50, patience=2, batch_size=4, learning_rate=5e-1, max_seq_len=6,
                      holdout_fraction=0.25)
    _, _, report = train_adapter(tiny_encoder, ds, cfg, bottleneck=4)
    last = report.history[-1]["epoch"]
    best = report.best_epochs[0]
    assert last - best <= 2
    losses = [h["monitor_loss"] for h in report.history]
    assert losses[best] == min(losses) <= losses[0]


def _task(rng, n=24, s=6):
    ids = rng.integers(5, 30, size=(n, s))
    ids[:, 0] = 2
    y = (ids[:, 1] > 17).astype(np.int64)
    return ids, np.ones_like(ids), y


def test_fusion_training_keeps_adapters_bytes(tiny_encoder, rng):
    adapters = [AdapterModule(16, 4, (0, 1), seed=i) for i in range(2)]
    for a in adapters:
        for p in a.parameters():
            p.data = rng.normal(scale=0.1, size=p.shape)
    before = [a.to_bytes() for a in adapters]
    base_before = tiny_encoder.to_bytes()
    cfg = TrainConfig(epochs=3, batch_size=8, max_seq_len=6)
    fusion, head, report = train_fusion(tiny_encoder, adapters, _task(rng), _task(rng), cfg, 2)
    assert [a.to_bytes() for a in adapters] == before
    assert tiny_encoder.to_bytes() == base_before
    assert all(a.frozen for a in adapters)
    assert 0.0 <= report.scores[0] <= 1.0
    with pytest.raises(ValueError):
        train_fusion(tiny_encoder, [], _task(rng), None, cfg, 2)


def test_single_zero_adapter_fusion_matches_baseline(tiny_encoder, rng):
    train, val = _task(rng), _task(rng)
    cfg = TrainConfig(epochs=4, batch_size=8, learning_rate=1e-2, max_seq_len=6)
    fusion, head, _ = train_classifier(tiny_encoder, train, val, cfg, 2, [AdapterModule(16, 4, (0, 1))])
    _, base_head, _ = train_classifier(tiny_encoder, train, val, cfg, 2)
    fused = evaluate(KnowledgeModel(tiny_encoder, head, fusion), *val)
    plain = evaluate(KnowledgeModel(tiny_encoder, base_head, None), *val)
    assert fused >= plain - 1e-12


def test_multilabel_classifier(tiny_encoder, rng):
    ids, mask, y = _task(rng)
    Y = np.stack([y, 1 - y, np.zeros_like(y)], axis=1)
    cfg = TrainConfig(epochs=2, batch_size=8, max_seq_len=6, metric="micro_f1")
    _, head, report = train_classifier(tiny_encoder, (ids, mask, Y), None, cfg, 3, multilabel=True)
    assert head.multilabel
    assert 0.0 <= report.scores[0] <= 1.0
    with pytest.raises(ValueError):
        train_classifier(tiny_encoder, (ids, mask, y), None, cfg, 3, multilabel=True)


def test_label_range_checked(tiny_encoder, rng):
    ids, mask, y = _task(rng)
    with pytest.raises(ValueError):
        train_classifier(tiny_encoder, (ids, mask, y + 5), None, TrainConfig(epochs=1), 2)
