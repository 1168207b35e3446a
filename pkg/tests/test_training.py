import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navtrans import autodiff as ad
from navtrans.autodiff import Tape, Tensor, grad_check
from navtrans.corpus import CorpusConfig, build_corpus
from navtrans.decoder import DecodeResult
from navtrans.model import NavTranslator
from navtrans.training import (
    Adam,
    NumericalError,
    TrainConfig,
    batch_loss,
    build_model,
    clip_grad_norm,
    cross_entropy_loss,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def tiny():
    return build_corpus(
        CorpusConfig(num_maps=3, samples_per_map=12, rooms_min=4, rooms_max=8, split_ratios=(0.5, 0.25, 0.25), seed=4)
    )


def small_config(**kw):
    base = dict(epochs=2, batch_size=8, hidden_size=8, embedding_dim=6, context_dim=6, heads=2)
    base.update(kw)
    return TrainConfig(**base)


def np_log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def test_confident_correct_prediction_costs_nothing():
    logits = Tensor(np.array([[50.0, 0.0, 0.0]]))
    assert cross_entropy_loss(logits, [0]).item() < 1e-20


def test_uniform_logits_cost_log_five():
    assert math.isclose(cross_entropy_loss(Tensor(np.zeros((3, 5))), [0, 4, 2]).item(), math.log(5), rel_tol=1e-12)


def test_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    gold = np.array([1, 0, 4, 4])
    with Tape() as tape:
        loss = cross_entropy_loss(z, gold)
    tape.backward(loss)
    expect = np.exp(np_log_softmax(z.data))
    expect[np.arange(4), gold] -= 1
    np.testing.assert_allclose(z.grad, expect / 4, atol=1e-14)


def test_padded_batch_is_mean_of_sample_means():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    batch = np.zeros((2, 3, 4))
    batch[0], batch[1, :2] = a, b
    target = np.array([[1, 2, 3], [0, 3, 0]])
    mask = np.array([[1, 1, 1], [1, 1, 0]])
    got = cross_entropy_loss(Tensor(batch), target, mask).item()
    ref = 0.5 * (cross_entropy_loss(Tensor(a), target[0]).item() + cross_entropy_loss(Tensor(b), target[1, :2]).item())
    assert math.isclose(got, ref, rel_tol=1e-12)


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(ValueError):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [0])


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    gold = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 1, 1], [1, 1, 0]])
    f = lambda z: cross_entropy_loss(z, gold, mask)
    assert grad_check(f, [Tensor(rng.uniform(-1, 1, (2, 3, 5)))]).passed


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.floats(0.01, 10), st.integers(0, 2**31 - 1))
def test_clipping_never_increases_norm(n, max_norm, seed):
    rng = np.random.default_rng(seed)
    grads = [rng.normal(scale=rng.uniform(0.01, 5), size=rng.integers(1, 6, size=2)) for _ in range(n)]
    before = clip_grad_norm(grads, max_norm)
    after = math.sqrt(sum(float((g * g).sum()) for g in grads))
    assert after <= before + 1e-12
    assert after <= max_norm * (1 + 1e-12)
    if before <= max_norm:
        assert math.isclose(after, before, rel_tol=1e-12)


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.array([0.5, -3.0])
    Adam(["w"], lr=0.1).step(p)
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9], atol=1e-7)


def test_model_gradient_end_to_end(tiny):
    model = build_model(small_config(hidden_size=2, embedding_dim=2, context_dim=3, heads=1), tiny)
    batch = model.make_batch(tiny.splits["train"][:2], tiny.graphs)
    params = model.named_parameters()
    # the word table is large and sparse; the rest is checked densely
    dense = [t for n, t in params.items() if not n.startswith("embedding")]
    report = grad_check(lambda *_: batch_loss(model, batch), dense)
    assert report.passed, report.max_rel_error


def test_loss_decreases_after_first_epoch(tiny):
    res = train(small_config(epochs=3, learning_rate=5e-3), tiny)
    losses = [r["train_loss"] for r in res.log]
    assert losses[-1] < losses[0]


def test_training_is_deterministic(tiny):
    a = train(small_config(), tiny)
    b = train(small_config(), tiny)
    assert [r["train_loss"] for r in a.log] == [r["train_loss"] for r in b.log]
    for k, v in a.model.state_dict().items():
        assert v.tobytes() == b.model.state_dict()[k].tobytes()


def test_zero_learning_rate_changes_nothing(tiny):
    cfg = small_config(epochs=1, learning_rate=0.0)
    model = build_model(cfg, tiny)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    train(cfg, tiny, model=model)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_every_parameter_gets_gradient(tiny):
    assert train(small_config(epochs=1), tiny).dead_params == []


def test_head_count_only_changes_fusion_weights(tiny):
    a = build_model(small_config(heads=1), tiny).state_dict()
    b = build_model(small_config(heads=4), tiny).state_dict()
    for k in a:
        if not k.startswith("fusion"):
            np.testing.assert_array_equal(a[k], b[k])


def test_non_finite_loss_is_reported(tiny):
    cfg = small_config(epochs=1)
    model = build_model(cfg, tiny)
    next(iter(model.named_parameters().values())).data[:] = np.nan
    with pytest.raises(NumericalError) as info:
        train(cfg, tiny, model=model)
    assert info.value.epoch == 1 and info.value.batch == 0


def test_checkpoint_round_trip(tiny, tmp_path):
    cfg = small_config()
    res = train(cfg, tiny, tmp_path)
    model, meta = load_checkpoint(res.checkpoint)
    assert meta["epoch"] == 2 and meta["config"] == cfg.to_dict()
    for k, v in res.model.state_dict().items():
        assert model.state_dict()[k].tobytes() == v.tobytes()
    split = tiny.splits["test_repeated"]
    r1, rec1 = evaluate(res.model, tiny.graphs, split)
    r2, rec2 = evaluate(model, tiny.graphs, split)
    assert r1 == r2 and [r.pred for r in rec1] == [r.pred for r in rec2]
    save_checkpoint(tmp_path / "again.nvts", model, cfg, meta["epoch"], meta["rng_state"])
    assert (tmp_path / "again.nvts").read_bytes() == res.checkpoint.read_bytes()


def test_epoch_log_lines(tiny, tmp_path):
    import json

    train(small_config(eval_every=1), tiny, tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "epochs.jsonl").read_text().splitlines()]
    assert [x["epoch"] for x in lines] == [1, 2]
    assert all(set(x) == {"epoch", "train_loss", "val_M@0", "wall_time"} for x in lines)
    assert all(x["val_M@0"] is not None for x in lines)


class EchoGold:
    """Stands in for a trained model and returns the gold plan."""

    def __init__(self, behaviors):
        self.behaviors = list(behaviors)

    def make_batch(self, samples, graphs, with_targets=True):
        return samples

    def predict(self, samples, max_len=16):
        ids = [[self.behaviors.index(b) for b in s.target_plan] for s in samples]
        return DecodeResult(ids, [False] * len(samples))

    def plan_names(self, ids):
        return [self.behaviors[i] for i in ids]


def test_perfect_predictions_score_perfectly(tiny):
    behaviors = next(iter(tiny.graphs.values())).behaviors
    rep, recs = evaluate(EchoGold(behaviors), tiny.graphs, tiny.splits["test_new"])
    assert rep.as_row() == [100.0, 100.0, 100.0, 100.0, 0.0]
    assert all(r.valid and r.reached == s.goal for r, s in zip(recs, tiny.splits["test_new"]))


def test_invalid_predictions_are_flagged(tiny):
    class Wrong(EchoGold):
        def predict(self, samples, max_len=16):
            return DecodeResult([[0] * 12 for _ in samples], [True] * len(samples))

    behaviors = next(iter(tiny.graphs.values())).behaviors
    _, recs = evaluate(Wrong(behaviors), tiny.graphs, tiny.splits["test_new"])
    assert all(r.truncated for r in recs)
    assert any(r.valid is False and r.failed_step is not None for r in recs)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(heads=3).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})
