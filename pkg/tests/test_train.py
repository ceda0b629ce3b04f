"""Optimizer behavior, checkpoint round trips, training loop, gradcheck."""

import numpy as np
import pytest

from mlffnet.data import synth_generate
from mlffnet.errors import ContractViolation, DataIOError
from mlffnet.tensor import Tensor
from mlffnet.train import (AdamW, TrainConfig, ablate, ablation_csv, evaluate,
                           gradcheck, load_checkpoint, predict,
                           save_checkpoint, train)

SMALL = dict(steps=3, batch=2, channels=(4, 8, 12, 16), decoder_width=8,
             attn_width=4)


@pytest.fixture(scope="module")
def dataset():
    return synth_generate(0, 2, 64)


class FakeGrads:
    def __init__(self, mapping):
        self.mapping = mapping

    def get(self, p):
        return self.mapping[id(p)]


def test_adamw_single_step_matches_manual_update():
    p = Tensor(np.array([1.0, -2.0]))
    g = np.array([0.5, -0.25])
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.01, grad_clip=None)
    opt.step(FakeGrads({id(p): g}))
    m = 0.1 * g
    v = 0.001 * g * g
    mhat = m / 0.1
    vhat = v / 0.001
    expected = np.array([1.0, -2.0]) - 0.1 * (
        mhat / (np.sqrt(vhat) + 1e-8) + 0.01 * np.array([1.0, -2.0])
    )
    assert np.allclose(p.data, expected, atol=1e-12)


def test_adamw_decay_is_decoupled_from_gradient():
    """Zero gradient + weight decay still shrinks the parameter."""
    p = Tensor(np.array([4.0]))
    opt = AdamW([("p", p)], lr=0.5, weight_decay=0.1, grad_clip=None)
    opt.step(FakeGrads({id(p): np.zeros(1)}))
    assert p.data[0] == pytest.approx(4.0 - 0.5 * 0.1 * 4.0)


def test_adamw_global_clip_bounds_effective_norm():
    p1 = Tensor(np.zeros(3))
    p2 = Tensor(np.zeros(2))
    opt = AdamW([("a", p1), ("b", p2)], lr=1.0, grad_clip=1.0)
    g1, g2 = np.full(3, 10.0), np.full(2, 10.0)
    opt.step(FakeGrads({id(p1): g1, id(p2): g2}))
    scale = 1.0 / np.sqrt(np.sum(g1 * g1) + np.sum(g2 * g2))
    assert np.allclose(opt.m["a"], 0.1 * g1 * scale)
    assert np.allclose(opt.m["b"], 0.1 * g2 * scale)


def test_train_config_validation():
    with pytest.raises(ContractViolation):
        TrainConfig(lr=0.0)
    with pytest.raises(ContractViolation):
        TrainConfig(steps=0)
    with pytest.raises(ContractViolation):
        TrainConfig(variant="vgg")


def test_train_decreases_loss_and_is_seed_deterministic(dataset):
    cfg = TrainConfig(variant="bas", lr=3e-3, weight_decay=0.0, seed=1,
                      steps=10, batch=2, channels=(4, 8, 12, 16),
                      decoder_width=8, attn_width=4)
    r1 = train(cfg, dataset)
    r2 = train(cfg, dataset)
    assert r1.log == r2.log
    first = float(r1.log[0].split(",")[1])
    last = float(r1.log[-1].split(",")[1])
    assert last < first
    assert r1.log_csv().startswith("step,total,lb_p1,lb_p2,lb_p3\n1,")
    for (_, pa), (_, pb) in zip(r1.model.named_params(),
                                r2.model.named_params()):
        assert np.array_equal(pa.data, pb.data)


def test_train_rejects_bad_datasets(dataset):
    cfg = TrainConfig(variant="bas", **SMALL)
    with pytest.raises(ContractViolation):
        train(cfg, [])
    mixed = dataset + synth_generate(1, 1, 96)
    with pytest.raises(ContractViolation):
        train(cfg, mixed)


def test_checkpoint_bitwise_round_trip(tmp_path, dataset):
    cfg = TrainConfig(variant="mam_hfem", lr=1e-3, seed=3, **SMALL)
    result = train(cfg, dataset)
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, result.model, cfg, cfg.steps, result.optimizer)
    with open(path, "rb") as fh:
        assert fh.read(4) == b"MLFF"
    model, meta, opt = load_checkpoint(path)
    assert meta["variant"] == "mam_hfem"
    assert meta["step"] == cfg.steps
    for (na, pa), (nb, pb) in zip(result.model.named_params(),
                                  model.named_params()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data)
    for (na, ba), (nb, bb) in zip(result.model.buffers(), model.buffers()):
        assert na == nb
        assert np.array_equal(ba, bb)
    assert opt is not None
    assert opt.t == result.optimizer.t
    for name, _ in result.optimizer.params:
        assert np.array_equal(opt.m[name], result.optimizer.m[name])
        assert np.array_equal(opt.v[name], result.optimizer.v[name])


def test_checkpoint_rejects_corruption(tmp_path, dataset):
    cfg = TrainConfig(variant="bas", **SMALL)
    result = train(cfg, dataset)
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, result.model, cfg, 1)
    raw = bytearray(open(path, "rb").read())
    raw[:4] = b"XXXX"
    bad = str(tmp_path / "bad.bin")
    open(bad, "wb").write(bytes(raw))
    with pytest.raises(DataIOError, match="magic"):
        load_checkpoint(bad)
    with pytest.raises(DataIOError):
        load_checkpoint(str(tmp_path / "missing.bin"))


def test_loaded_model_reproduces_predictions(tmp_path, dataset):
    cfg = TrainConfig(variant="full", lr=1e-3, seed=4, **SMALL)
    result = train(cfg, dataset)
    before = predict(result.model, dataset[0]).p1.data.copy()
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, result.model, cfg, cfg.steps)
    model, _, _ = load_checkpoint(path)
    after = predict(model, dataset[0]).p1.data
    assert np.array_equal(before, after)


def test_evaluate_reports_seven_metrics(dataset):
    cfg = TrainConfig(variant="bas", **SMALL)
    model = cfg.build()
    rep = evaluate(model, dataset)
    vals = rep.as_tuple()
    assert len(vals) == 7
    assert all(np.isfinite(vals))
    with pytest.raises(ContractViolation):
        evaluate(model, [])


def test_gradcheck_passes_and_reports():
    rep = gradcheck("bas", seed=0)
    assert rep["passed"]
    assert rep["max_rel_err"] <= 1e-4
    assert rep["checked"] >= 10
    mods = {r["param"].split(".")[0] for r in rep["results"]}
    assert "encoder" in mods and "head" in mods


def test_ablate_structure(dataset):
    cfg = TrainConfig(variant="full", lr=1e-3, seed=0, steps=2, batch=2,
                      channels=(4, 8, 12, 16), decoder_width=8, attn_width=4)
    rows = ablate(cfg, dataset, {"train": dataset})
    assert [r["label"] for r in rows] == ["Bas.", "+MAM", "+MAM+HFEM", "Ours"]
    counts = [r["param_count"] for r in rows]
    assert all(a < b for a, b in zip(counts, counts[1:]))
    assert all(np.isfinite(r["final_loss"]) for r in rows)
    csv = ablation_csv(rows)
    lines = csv.strip().split("\n")
    assert lines[0] == "config,train_mDice,train_mIoU"
    assert len(lines) == 5
