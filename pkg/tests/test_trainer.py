import math

import numpy as np
import pytest

from bbuda.benchgen import BenchmarkSpec, generate, train_source
from bbuda.blackbox import CountingPredictor, InProcessPredictor, TransportError, fill_cache, serve
from bbuda.evaluation import GroundTruth
from bbuda.model import forward_batch, init_model
from bbuda.numerics import InvalidInput, entropy
from bbuda.objective import distillation_loss
from bbuda.trainer import (AdaptationError, AdaptConfig, TrainHistory, adapt, alpha_schedule, predict,
                           sgd_step)

SMALL = BenchmarkSpec(source_per_class=20, target_per_class=20, seed=1)
FAST = AdaptConfig(epochs=4, m_prototypes=10, seed=2)


@pytest.fixture(scope="module")
def setup():
    src, tgt, part = generate(SMALL)
    source = train_source(src, part.k).model
    return tgt, part, source


class TestAlpha:
    @pytest.mark.parametrize("t,a", [(0, 1.0), (50, 0.5), (100, 0.0), (120, 0.0), (250, 0.0)])
    def test_values(self, t, a):
        assert alpha_schedule(t) == a

    def test_custom_total(self):
        assert alpha_schedule(5, 10) == 0.5

    def test_negative(self):
        with pytest.raises(InvalidInput):
            alpha_schedule(-1)


class TestSgd:
    def test_plain_step(self):
        p, v = np.array([1.0, 2.0]), np.zeros(2)
        sgd_step(p, np.array([0.5, -1.0]), v, 0.1, 0.0)
        np.testing.assert_allclose(p, [0.95, 2.1])

    def test_zero_gradient_no_move(self):
        p, v = np.array([1.0, 2.0]), np.zeros(2)
        sgd_step(p, np.zeros(2), v, 0.1, 0.9)
        np.testing.assert_array_equal(p, [1.0, 2.0])

    def test_two_momentum_steps(self):
        g = np.array([1.0, -3.0])
        p, v = np.zeros(2), np.zeros(2)
        sgd_step(p, g, v, 0.01, 0.9)
        sgd_step(p, g, v, 0.01, 0.9)
        np.testing.assert_allclose(p, -0.01 * g * 2.9, atol=1e-15)
        np.testing.assert_allclose(v, 1.9 * g)


def test_zero_epochs_returns_initial_model(setup):
    tgt, part, source = setup
    res = adapt(tgt.inputs, InProcessPredictor(source), AdaptConfig(epochs=0, seed=5))
    ref = init_model([16, 64, 64, 32], part.k, seed=5)
    for a, b in zip(res.model.arrays(), ref.arrays()):
        assert a.tobytes() == b.tobytes()
    assert len(res.history) == 0


def test_reduces_to_distillation_on_default_benchmark():
    src, tgt, part = generate(BenchmarkSpec())
    source = train_source(src, part.k).model
    cfg = AdaptConfig(beta=0.0, rho=math.log(part.k) / 2 + 1.0, alpha_fixed=1.0)
    res = adapt(tgt.inputs, InProcessPredictor(source), cfg)
    F = res.cache.outputs
    before = distillation_loss(forward_batch(res.initial_model, tgt.inputs)[1], F)[0]
    after = distillation_loss(forward_batch(res.model, tgt.inputs)[1], F)[0]
    assert all(r.loss_self == 0.0 and r.loss_reg == 0.0 for r in res.history.records)
    assert after < 0.5 * before
    # the reducible part (KL to the teacher) shrinks far more
    floor = float(np.mean(entropy(F)))
    assert after - floor < 0.05 * (before - floor)


def test_query_once_independent_of_epochs(setup):
    tgt, _, source = setup
    counts = []
    for epochs in (1, 3):
        counter = CountingPredictor(InProcessPredictor(source))
        adapt(tgt.inputs, counter, AdaptConfig(epochs=epochs, m_prototypes=10, max_batch=50))
        counts.append(counter.calls)
    assert counts == [math.ceil(len(tgt) / 50)] * 2


def test_bit_identical_reruns(setup):
    tgt, _, source = setup
    a = adapt(tgt.inputs, InProcessPredictor(source), FAST)
    b = adapt(tgt.inputs, InProcessPredictor(source), FAST)
    for x, y in zip(a.model.arrays(), b.model.arrays()):
        assert x.tobytes() == y.tobytes()
    assert a.history.to_csv() == b.history.to_csv()


def test_history_invariants(setup):
    tgt, part, source = setup
    cfg = AdaptConfig(epochs=6, m_prototypes=10, alpha_horizon=5, beta=0.7)
    res = adapt(tgt.inputs, InProcessPredictor(source), cfg, truth=GroundTruth(tgt.labels, part.k))
    recs = res.history.records
    assert [r.epoch for r in recs] == list(range(6))
    assert recs[0].alpha == 1.0
    assert recs[-1].alpha <= 1 / 5
    for r in recs:
        expect = r.alpha * r.loss_distill + (1 - r.alpha) * r.loss_self + 0.7 * r.loss_reg
        assert abs(r.loss_total - expect) <= 1e-12
        assert 0.0 <= r.h_score <= 1.0 and 0.0 <= r.aa <= 1.0


def test_history_csv_roundtrip(setup):
    tgt, part, source = setup
    res = adapt(tgt.inputs, InProcessPredictor(source), FAST, truth=GroundTruth(tgt.labels, part.k))
    text = res.history.to_csv()
    assert text.splitlines()[0] == "epoch,alpha,loss_distill,loss_self,loss_reg,loss_total,h_score,aa"
    assert TrainHistory.from_csv(text).to_csv() == text


def test_history_csv_without_truth_has_no_metric_columns(setup):
    tgt, _, source = setup
    res = adapt(tgt.inputs, InProcessPredictor(source), FAST)
    assert res.history.to_csv().splitlines()[0].endswith("loss_total")


def test_in_process_and_remote_histories_identical(setup):
    tgt, _, source = setup
    local = adapt(tgt.inputs, InProcessPredictor(source), FAST)
    with serve(source) as srv:
        from bbuda.blackbox import RemotePredictor
        rp = RemotePredictor(srv.url, max_batch=FAST.max_batch)
        remote = adapt(tgt.inputs, rp, FAST)
    assert rp.predict_requests == math.ceil(len(tgt) / FAST.max_batch)
    assert local.history.to_csv() == remote.history.to_csv()
    for x, y in zip(local.model.arrays(), remote.model.arrays()):
        assert x.tobytes() == y.tobytes()


def test_prefilled_cache_skips_predictor(setup):
    tgt, _, source = setup
    cache = fill_cache(InProcessPredictor(source), tgt.inputs)
    counter = CountingPredictor(InProcessPredictor(source))
    a = adapt(tgt.inputs, counter, FAST, cache=cache)
    assert counter.calls == 0
    assert a.history.to_csv() == adapt(tgt.inputs, InProcessPredictor(source), FAST).history.to_csv()


def test_cache_must_match_inputs(setup):
    tgt, _, source = setup
    cache = fill_cache(InProcessPredictor(source), tgt.inputs[:10])
    with pytest.raises(InvalidInput):
        adapt(tgt.inputs, InProcessPredictor(source), FAST, cache=cache)


class _Broken:
    def __init__(self, inner):
        self.inner = inner

    def predict(self, batch):
        raise TransportError("unreachable", 4)

    def num_classes(self):
        return self.inner.num_classes()

    def input_dim(self):
        return self.inner.input_dim()


def test_predictor_failure_aborts_before_training(setup, monkeypatch):
    tgt, _, source = setup
    import bbuda.trainer as trainer_mod
    called = []
    monkeypatch.setattr(trainer_mod, "total_loss", lambda *a, **k: called.append(1))
    with pytest.raises(TransportError):
        adapt(tgt.inputs, _Broken(InProcessPredictor(source)), FAST)
    assert not called


def test_dimension_mismatch(setup):
    _, _, source = setup
    with pytest.raises(InvalidInput):
        adapt(np.zeros((5, 3)), InProcessPredictor(source), FAST)


def test_divergence_aborts_with_diagnostic(setup):
    tgt, _, source = setup
    cfg = AdaptConfig(epochs=3, learning_rate=1e12, beta=0.0)
    with np.errstate(all="ignore"), pytest.raises(AdaptationError, match="epoch"):
        adapt(tgt.inputs * 1e6, InProcessPredictor(source), cfg)


def test_prototype_warmup(setup):
    tgt, _, source = setup
    cfg = AdaptConfig(epochs=3, m_prototypes=10, prototype_warmup_epochs=2)
    recs = adapt(tgt.inputs, InProcessPredictor(source), cfg).history.records
    assert recs[0].loss_reg == 0.0 and recs[1].loss_reg == 0.0 and recs[2].loss_reg > 0.0


def test_too_many_prototypes(setup):
    tgt, _, source = setup
    with pytest.raises(InvalidInput):
        adapt(tgt.inputs, InProcessPredictor(source), AdaptConfig(epochs=1, m_prototypes=len(tgt) + 1))


def test_predict_outputs_classes_or_unknown(setup):
    tgt, part, source = setup
    res = adapt(tgt.inputs, InProcessPredictor(source), FAST)
    pred = predict(res.model, tgt.inputs)
    assert set(pred.tolist()) <= set(range(-1, part.k))


class TestConfig:
    def test_defaults(self):
        c = AdaptConfig()
        assert (c.epochs, c.batch_size, c.learning_rate, c.momentum, c.rho, c.beta, c.m_prototypes) == \
            (100, 64, 0.01, 0.9, 0.5, 1.0, 100)

    def test_unknown_key(self):
        with pytest.raises(InvalidInput):
            AdaptConfig.from_dict({"epochz": 3})

    @pytest.mark.parametrize("kw", [dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0),
                                    dict(momentum=1.0), dict(rho=-0.1), dict(alpha_fixed=2.0),
                                    dict(m_prototypes=1)])
    def test_validation(self, kw):
        with pytest.raises(InvalidInput):
            AdaptConfig(**kw)

    def test_dict_roundtrip(self):
        c = AdaptConfig(layer_sizes=(16, 8), rho=0.3)
        assert AdaptConfig.from_dict(c.to_dict()) == AdaptConfig(layer_sizes=[16, 8], rho=0.3)
