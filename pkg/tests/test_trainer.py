import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from digrank.dataset import CePair, MarginGroup
from digrank.losses import LossConfig
from digrank.scorer import Batch, FeatureSpec, ScorerModel, forward_backward
from digrank.trainer import (
    Adam,
    TextLookup,
    TrainConfig,
    TrainingDiverged,
    evaluate_ranking,
    kendall_tau_reference,
    pairwise_accuracy,
    train,
)

SMALL = FeatureSpec(query_buckets=16, doc_buckets=32, overlap_buckets=32)


def fd_check(beta, n_coords=100, seed=0):
    rng = np.random.default_rng(seed)
    m = ScorerModel.init(SMALL, (6, 4), seed=seed)
    dim = SMALL.dim
    batch = Batch(
        rng.normal(size=(8, dim)),
        np.array([1.0, 0.0] * 4),
        [(rng.normal(size=(2, dim)), rng.normal(size=(3, dim))) for _ in range(3)],
    )
    cfg = LossConfig(beta=beta)
    grads = forward_backward(m, batch, cfg).grads
    names = sorted(m.params)
    sizes = [m.params[k].size for k in names]
    worst = 0.0
    for flat in rng.choice(sum(sizes), size=n_coords, replace=False):
        i = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        k = names[i]
        idx = np.unravel_index(flat - sum(sizes[:i]), m.params[k].shape)
        orig = m.params[k][idx]
        h = 1e-5
        m.params[k][idx] = orig + h
        up = forward_backward(m, batch, cfg).loss
        m.params[k][idx] = orig - h
        dn = forward_backward(m, batch, cfg).loss
        m.params[k][idx] = orig
        fd = (up - dn) / (2 * h)
        worst = max(worst, abs(grads[k][idx] - fd) / (abs(grads[k][idx]) + 1e-8))
    return worst


class TestGradients:
    @pytest.mark.parametrize("beta", [0.0, 0.5, 0.75, 1.0])
    def test_finite_differences(self, beta):
        assert fd_check(beta) < 1e-4


class TestAdam:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        p = {"w": rng.normal(size=3)}
        ref = p["w"].copy()
        m = np.zeros(3)
        v = np.zeros(3)
        opt = Adam(lr=0.01)
        for t in range(1, 6):
            g = rng.normal(size=3)
            opt.step(p, {"w": g})
            for j in range(3):
                m[j] = 0.9 * m[j] + 0.1 * g[j]
                v[j] = 0.999 * v[j] + 0.001 * g[j] ** 2
                ref[j] -= 0.01 * (m[j] / (1 - 0.9 ** t)) / (math.sqrt(v[j] / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p["w"], ref, rtol=0, atol=1e-10)

    def test_first_step_is_lr_sized(self):
        p = {"w": np.zeros(2)}
        Adam(lr=0.1).step(p, {"w": np.array([3.0, -0.5])})
        np.testing.assert_allclose(p["w"], [-0.1, 0.1], atol=1e-8)


class TestMetrics:
    def test_pairwise_accuracy(self):
        assert pairwise_accuracy([2.0, 1.0], [0.0, 1.0]) == (3.5, 4)

    @given(
        st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=2, max_size=12)
    )
    def test_kendall_brute_force(self, rows):
        s = [r[0] for r in rows]
        ref = [r[1] for r in rows]
        c = d = n = 0
        for i, j in itertools.combinations(range(len(rows)), 2):
            if ref[i] == ref[j]:
                continue
            n += 1
            prod = (s[i] - s[j]) * (ref[i] - ref[j])
            c += prod > 0
            d += prod < 0
        assert kendall_tau_reference(s, ref) == (c - d, n)

    def test_perfect_and_reversed(self):
        assert kendall_tau_reference([1, 2, 3], [10, 20, 30]) == (3.0, 3)
        assert kendall_tau_reference([3, 2, 1], [10, 20, 30]) == (-3.0, 3)


# -- training on a toy separable task ------------------------------------------

DOCS = {f"g{i}": f"gold fact {i} answer here" for i in range(12)} | {
    f"b{i}": f"allegedly rumour {i} wrong" for i in range(12)
}
QUERIES = {f"q{i}": f"question number {i}" for i in range(12)}
TEXTS = TextLookup(QUERIES, DOCS)
CE = [CePair(f"q{i}", f"g{i}", 1) for i in range(12)] + [CePair(f"q{i}", f"b{i}", 0) for i in range(12)]
GROUPS = [MarginGroup(f"q{i}", (f"g{i}",), (f"b{i}", f"b{(i + 1) % 12}")) for i in range(12)]


def toy_config(**kw):
    return TrainConfig(**{"epochs": 5, "ce_batch_size": 8, "margin_batch_size": 4, "learning_rate": 0.01, **kw})


class TestTrain:
    def test_learns_and_leaves_input_untouched(self):
        m0 = ScorerModel.init(SMALL, (8,), seed=0)
        before = {k: v.copy() for k, v in m0.params.items()}
        res = train(m0, CE, GROUPS, toy_config(), TEXTS)
        for k in before:
            np.testing.assert_array_equal(m0.params[k], before[k])
        assert evaluate_ranking(res.model, GROUPS, TEXTS)["pairwise_accuracy"] == 1.0
        steps = [r for r in res.log if "step" in r]
        assert steps[-1]["total"] < steps[0]["total"]

    def test_deterministic(self):
        m0 = ScorerModel.init(SMALL, (8,), seed=0)
        a = train(m0, CE, GROUPS, toy_config(seed=4), TEXTS)
        b = train(m0, CE, GROUPS, toy_config(seed=4), TEXTS)
        assert a.log == b.log
        for k in a.model.params:
            np.testing.assert_array_equal(a.model.params[k], b.model.params[k])

    def test_schedule_independent_of_beta(self):
        m0 = ScorerModel.init(SMALL, (8,), seed=0)
        lens = {
            beta: len(train(m0, CE, GROUPS, toy_config(loss=LossConfig(beta=beta)), TEXTS).log)
            for beta in (0.0, 0.5, 1.0)
        }
        assert len(set(lens.values())) == 1
        assert lens[0.0] == 5 * max(math.ceil(24 / 8), math.ceil(12 / 4))

    def test_empty_sets(self):
        m0 = ScorerModel.init(SMALL, (8,), seed=0)
        with pytest.raises(ValueError):
            train(m0, [], GROUPS, toy_config(), TEXTS)
        with pytest.raises(ValueError):
            train(m0, CE, [], toy_config(), TEXTS)
        train(m0, [], GROUPS, toy_config(epochs=1, loss=LossConfig(beta=0.0)), TEXTS)
        train(m0, CE, [], toy_config(epochs=1, loss=LossConfig(beta=1.0)), TEXTS)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self):
        m0 = ScorerModel.init(SMALL, (8,), seed=0)
        m0.params["W1"][:] = 1e308
        with pytest.raises(TrainingDiverged):
            train(m0, CE, GROUPS, toy_config(epochs=1), TEXTS)

    def test_unknown_id(self):
        m0 = ScorerModel.init(SMALL, (8,), seed=0)
        with pytest.raises(KeyError):
            train(m0, [CePair("qx", "g0", 1)], GROUPS, toy_config(epochs=1), TEXTS)

    def test_validation_and_checkpoints(self):
        m0 = ScorerModel.init(SMALL, (8,), seed=0)
        seen = []
        res = train(m0, CE, GROUPS, toy_config(epochs=4, checkpoint_interval=2, patience=10), TEXTS,
                    val_groups=GROUPS, on_checkpoint=lambda e, m: seen.append(e))
        assert seen == [2, 4]
        assert res.best_epoch is not None
        assert sum("validation" in r for r in res.log) == 4

    def test_config_validation_and_round_trip(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        c = toy_config(loss=LossConfig(beta=0.3))
        assert TrainConfig.from_dict(c.to_dict()) == c
        assert c.digest() != toy_config().digest()
