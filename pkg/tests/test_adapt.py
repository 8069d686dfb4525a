import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adasc import adapt as A
from adasc import autodiff as ad
from adasc import data as D
from adasc import nn
from adasc.autodiff import ComputationRecord, Tensor

UNIFORM10 = np.full((4, 10), 0.1)
ONE_HOT10 = np.eye(10)[[0, 3, 7, 9]]


def test_loss_oracles(f64):
    assert abs(float(A.loss_source(UNIFORM10, ONE_HOT10).data) - math.log(10)) <= 1e-9
    half = np.full((5, 1), 0.5)
    assert abs(float(A.loss_discriminator(half, half).data) - 2 * math.log(2)) <= 1e-9
    lm = float(A.loss_mapper(half, UNIFORM10, ONE_HOT10).data)
    assert abs(lm - (math.log(2) + math.log(10))) <= 1e-9


def test_discriminator_loss_scalar_oracle(f64):
    got = float(A.loss_discriminator(np.array([[0.8], [0.6]]), np.array([[0.3], [0.4]])).data)
    want = -((math.log(0.8) + math.log(0.6)) / 2 + (math.log(0.7) + math.log(0.6)) / 2)
    assert got == pytest.approx(want, abs=1e-12) and got == pytest.approx(0.8008, abs=1e-4)


def test_gradient_isolation(f64):
    spec_m, spec_c, spec_d = _specs()
    m_t, c, d = (nn.build_model(s, i) for i, s in enumerate((spec_m, spec_c, spec_d)))
    m_s = m_t.clone()
    x = np.random.default_rng(0).standard_normal((6, 2))
    y = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    every = {**{f"mt.{k}": v for k, v in m_t.params.items()}, **{f"d.{k}": v for k, v in d.params.items()}}
    with ComputationRecord(every):
        ft = m_t(x)
        l_mt = A.loss_mapper(d(ft), c(m_t(x)), y)
    g = ad.backward(l_mt)
    assert any(g[k].any() for k in g if k.startswith("mt."))
    # As computed inside adapt: D only sees detached target features.
    with ComputationRecord(every):
        l_d = A.loss_discriminator(d(m_s(x)), d(Tensor(m_t(x).data)))
    g = ad.backward(l_d)
    assert all(not g[k].any() for k in g if k.startswith("mt."))
    assert any(g[k].any() for k in g if k.startswith("d."))


def test_loss_source_perfect_prediction_is_near_zero(f64):
    assert float(A.loss_source(ONE_HOT10, ONE_HOT10).data) == pytest.approx(0.0, abs=1e-9)


def test_discriminator_loss_is_clamped(f64):
    ones, zeros = np.ones((3, 1)), np.zeros((3, 1))
    worst = float(A.loss_discriminator(zeros, ones).data)
    assert np.isfinite(worst) and worst == pytest.approx(-2 * math.log(1e-7), rel=1e-6)


def test_loss_contracts(f64):
    with pytest.raises(ad.ContractError):
        A.loss_source(np.full((2, 3), 1 / 3), np.eye(4)[:2])
    with pytest.raises(ad.ContractError):
        A.loss_source(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ad.ContractError):
        A.loss_discriminator(np.zeros((0, 1)), np.full((2, 1), 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10**6))
def test_losses_ignore_batch_order(n, seed):
    with ad.precision("f64"):
        r = np.random.default_rng(seed)
        probs = r.dirichlet(np.ones(4), n)
        labels = np.eye(4)[r.integers(0, 4, n)]
        ds, dt = r.uniform(0.01, 0.99, (n, 1)), r.uniform(0.01, 0.99, (n, 1))
        perm = r.permutation(n)
        pairs = [
            (A.loss_source(probs, labels), A.loss_source(probs[perm], labels[perm])),
            (A.loss_discriminator(ds, dt), A.loss_discriminator(ds[perm], dt[r.permutation(n)])),
            (A.loss_mapper(dt, probs, labels), A.loss_mapper(dt[perm], probs[perm], labels[perm])),
        ]
        for a, b in pairs:
            assert float(a.data) == pytest.approx(float(b.data), rel=1e-12, abs=1e-12)


def test_sub_seed_is_stable_and_distinct():
    assert A.sub_seed(0, "mapper") == A.sub_seed(0, "mapper")
    assert len({A.sub_seed(0, "mapper"), A.sub_seed(0, "classifier"), A.sub_seed(1, "mapper")}) == 3


def test_adam_first_step_is_lr_times_sign(f64):
    w = Tensor(np.array([1.0, -2.0, 3.0]))
    g = np.array([0.5, -3.0, 1e-3])
    A.adam_step({"w": w}, {"w": g}, A.AdamState(), lr=0.01)
    np.testing.assert_allclose(w.data, [1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], atol=1e-7)


def test_adam_matches_reference_recursion(f64):
    r = np.random.default_rng(0)
    w = Tensor(r.standard_normal(4))
    ref = w.data.copy()
    m = v = np.zeros(4)
    state = A.AdamState()
    for t in range(1, 6):
        g = r.standard_normal(4)
        A.adam_step({"w": w}, {"w": g}, state, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=1e-12)


def test_adam_minimizes_a_quadratic(f64):
    w = Tensor(np.array([3.0, -2.0]))
    state = A.AdamState()
    for _ in range(100):
        with ComputationRecord({"w": w}):
            loss = ad.sum(ad.mul(w, w))
        A.adam_step({"w": w}, ad.backward(loss), state, lr=0.1)
    assert np.abs(w.data).max() < 0.5


def test_adam_contracts(f64):
    w = Tensor(np.zeros(2))
    with pytest.raises(ad.ContractError):
        A.adam_step({"w": w}, {}, A.AdamState())
    with pytest.raises(ad.ContractError):
        A.adam_step({"w": w}, {"w": np.zeros(3)}, A.AdamState())


def _blobs(seed, n_per=60, sep=4.0):
    r = np.random.default_rng(seed)
    means = np.array([[sep, 0.0], [-sep, 0.0], [0.0, sep]])
    y = np.repeat(np.arange(3), n_per)
    x = (means[y] + r.standard_normal((len(y), 2))).astype(np.float32)
    return D.DomainDataset(x, y, np.full(len(y), "A"), np.array([f"x{i}" for i in range(len(y))]),
                           class_names=("a", "b", "c"))


def _specs(widths=(16, 16)):
    m = nn.mlp((2,), list(widths), head="linear", name="mapper")
    return m, nn.mlp(m.output_shape, [3], head="softmax", name="clf"), nn.mlp(m.output_shape, [16, 1], head="sigmoid", name="disc")


@pytest.mark.parametrize("seed", range(5))
def test_pretraining_fits_separable_blobs(seed):
    spec_m, spec_c, _ = _specs()
    train = _blobs(seed)
    m, c, trace = A.pretrain(spec_m, spec_c, train, train, A.PretrainConfig(epochs=50, lr=1e-3, seed=seed))
    assert not m.training and not c.training
    assert A.accuracy(m, c, _blobs(seed + 100)) >= 0.95
    assert len(trace.values("L_S")) == 50 and len(trace.values("val_acc")) == 50


def test_pretraining_rejects_unlabeled():
    spec_m, spec_c, _ = _specs()
    with pytest.raises(ad.ContractError):
        A.pretrain(spec_m, spec_c, _blobs(0).as_target())


@pytest.fixture(scope="module")
def trained():
    spec_m, spec_c, spec_d = _specs()
    source = _blobs(0, n_per=40)
    m, c, _ = A.pretrain(spec_m, spec_c, source, None, A.PretrainConfig(epochs=10, lr=1e-3, seed=0))
    shifted = _blobs(1, n_per=20)
    shifted.features = shifted.features + np.float32(1.5)
    return m, c, spec_d, source, [shifted.as_target()]


def _snapshot(model):
    return {k: v.tobytes() for k, v in model.state().items()}


def test_adapt_leaves_source_mapper_and_classifier_untouched(trained):
    m, c, spec_d, source, targets = trained
    before_m, before_c = _snapshot(m), _snapshot(c)
    out = A.adapt(m, c, spec_d, source, targets, A.AdaptConfig(epochs=2, lr=1e-3, seed=0))
    assert _snapshot(m) == before_m and _snapshot(c) == before_c
    assert out.source_mapper is m and out.classifier is c
    assert _snapshot(out.target_mapper) != before_m


def test_zero_epochs_copies_the_source_mapper(trained):
    m, c, spec_d, source, targets = trained
    out = A.adapt(m, c, spec_d, source, targets, A.AdaptConfig(epochs=0))
    assert _snapshot(out.target_mapper) == _snapshot(m)
    assert out.target_mapper.params["0.weight"] is not m.params["0.weight"]
    assert out.iterations == 0 and out.d_updates == 0


@pytest.mark.parametrize("d_every,accumulate", [(10, False), (3, False), (10, True), (1, False)])
def test_discriminator_cadence(trained, d_every, accumulate):
    m, c, spec_d, source, targets = trained
    calls = []
    out = A.adapt(m, c, spec_d, source, targets,
                  A.AdaptConfig(epochs=3, d_every=d_every, d_accumulate=accumulate, seed=1),
                  on_discriminator_update=calls.append)
    # 120 source, one target of 60 -> oversampled to 120 -> 20 batches per epoch
    assert out.iterations == 60
    assert out.d_updates == len(calls) == out.iterations // d_every
    assert calls == [k * d_every for k in range(1, out.iterations // d_every + 1)]


def test_target_labels_never_reach_adaptation(trained):
    m, c, spec_d, source, targets = trained
    poisoned = targets[0].subset(np.arange(len(targets[0])))
    poisoned.oracle = D.SealedLabels(np.zeros(len(poisoned), dtype=int))
    cfg = A.AdaptConfig(epochs=2, seed=5)
    a = A.adapt(m, c, spec_d, source, targets, cfg)
    b = A.adapt(m, c, spec_d, source, [poisoned], cfg)
    assert _snapshot(a.target_mapper) == _snapshot(b.target_mapper)
    assert _snapshot(a.discriminator) == _snapshot(b.discriminator)


def test_adapt_is_deterministic(trained):
    m, c, spec_d, source, targets = trained
    cfg = A.AdaptConfig(epochs=1, seed=2)
    a, b = A.adapt(m, c, spec_d, source, targets, cfg), A.adapt(m, c, spec_d, source, targets, cfg)
    assert _snapshot(a.target_mapper) == _snapshot(b.target_mapper)
    assert a.trace.rows == b.trace.rows


def test_adapt_contracts(trained):
    m, c, spec_d, source, targets = trained
    with pytest.raises(ad.ContractError):
        A.adapt(m, c, nn.mlp((7,), [1], head="sigmoid"), source, targets)
    with pytest.raises(ad.ContractError):
        A.adapt(m, c, spec_d, source, [])
    with pytest.raises(ad.ContractError):
        A.adapt(m, c, spec_d, source.as_target(), targets)


def test_divergence_carries_the_trace(trained):
    m, c, spec_d, source, targets = trained
    bad = targets[0].subset(np.arange(len(targets[0])))
    bad.features = bad.features.copy()
    bad.features[:] = np.nan
    with ad.strict(False), np.errstate(all="ignore"):
        with pytest.raises(A.DivergenceError) as err:
            A.adapt(m, c, spec_d, source, [bad], A.AdaptConfig(epochs=1))
    assert isinstance(err.value.trace, A.Trace)


def test_trace_csv(tmp_path):
    t = A.Trace()
    t.add(0, 10, "L_MT", 1.5)
    t.add(0, 10, "L_D", 0.25)
    t.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines() == ["epoch,iteration,loss,value", "0,10,L_MT,1.5", "0,10,L_D,0.25"]
    assert t.values("L_D") == [0.25]


def test_config_validation():
    with pytest.raises(ValueError):
        A.AdaptConfig(d_every=0)
    with pytest.raises(ValueError):
        A.PretrainConfig(lr=0)
