import numpy as np
import pytest

from actsel import data, flops, loop, nn
from actsel.loop import LoopConfig, MetricsRecord, RunResult

SPEC = nn.ModelSpec((16, 32), "tanh", "classifier", 5)


@pytest.fixture(scope="module")
def split():
    ds = data.gen_classification(8000, 16, 5, 0.2, seed=1)
    return data.split_holdout(ds, 0.1, seed=1)


@pytest.fixture(scope="module")
def reference(split):
    train, _ = split
    return loop.pretrain_reference(cfg(reference_steps=400), train)


def cfg(**kw):
    base = dict(learner=SPEC, steps=60, eval_every=20, lr=3e-3, seed=0,
                super_batch=64, sub_batch=32)
    base.update(kw)
    return LoopConfig(**base)


def fake_run(values, step=100, metric="acc"):
    return RunResult([MetricsRecord(i * step, metric, v, 0.0, 0.0, 0, 0, 0)
                      for i, v in enumerate(values)])


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="sub_batch"):
            cfg(sub_batch=128)
        with pytest.raises(ValueError, match="task"):
            cfg(task="regression")
        with pytest.raises(ValueError, match="learner/proxy"):
            cfg(task="contrastive")
        with pytest.raises(ValueError):
            cfg(policy="oracle")
        assert cfg().proxy == SPEC

    def test_online_config(self):
        c = loop.online_config(cfg())
        assert c.super_batch == 320 and c.reference_source == "online"


class TestUniform:
    def test_equals_algorithm1_with_full_selection(self, split):
        train, hold = split
        c = cfg(policy="uniform", super_batch=32, sub_batch=32)
        a = loop.run_uniform(c, train, hold)
        b = loop.run_algorithm1(c, train, hold, None)
        for pa, pb in zip(a.learner.weights + a.learner.biases, b.learner.weights + b.learner.biases):
            np.testing.assert_array_equal(pa, pb)
        np.testing.assert_array_equal(a.values, b.values)

    def test_flops_closed_form(self, split):
        train, hold = split
        r = loop.run_uniform(cfg(), train, hold)
        f = SPEC.inference_flops()
        for rec in r.records:
            assert rec.cum_flops_learner == 3 * f * 32 * rec.step
            assert rec.cum_flops_actor == rec.cum_flops_ref == 0

    def test_eval_schedule(self, split):
        train, hold = split
        r = loop.run_uniform(cfg(steps=50), train, hold)
        assert list(r.steps) == [0, 20, 40, 50]
        assert r.metric == "holdout_accuracy"

    def test_uniform_noise_rate(self, split):
        train, hold = split
        r = loop.run_uniform(cfg(steps=200), train, hold)
        assert abs(r.noise_trace.mean() - train.noise_mask.mean()) < 0.03


class TestAlgorithm1:
    def test_learns(self, split, reference):
        train, hold = split
        r = loop.run_algorithm1(cfg(steps=200), train, hold, reference)
        assert r.final_value - r.values[0] >= 0.20

    def test_replay_reproduces_learner(self, split, reference):
        train, hold = split
        c = cfg()
        r = loop.run_algorithm1(c, train, hold, reference, keep_index_log=True)
        assert len(r.index_log) == c.steps and all(len(s) == 32 for s in r.index_log)
        p = loop.replay_indices(c, train, r.index_log)
        for a, b in zip(p.weights, r.learner.weights):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self, split, reference):
        train, hold = split
        a = loop.run_algorithm1(cfg(), train, hold, reference)
        b = loop.run_algorithm1(cfg(), train, hold, reference)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.noise_trace, b.noise_trace)

    def test_learnability_avoids_noise(self, split, reference):
        train, hold = split
        r = loop.run_algorithm1(cfg(steps=100), train, hold, reference)
        assert r.noise_trace.mean() < train.noise_mask.mean() - 0.03

    def test_flops_ledger(self, split, reference):
        train, hold = split
        c = cfg()
        r = loop.run_algorithm1(c, train, hold, reference)
        f = SPEC.inference_flops()
        learner, actor, ref = flops.closed_form_totals(
            "learnability", f, f, f, 64, 32, c.steps, pretrain=reference.flops)
        last = r.records[-1]
        assert (last.cum_flops_learner, last.cum_flops_actor, last.cum_flops_ref) == (learner, actor, ref)

    def test_zero_step_reference(self, split):
        train, hold = split
        ref = loop.pretrain_reference(cfg(), train, steps=0)
        assert ref.flops == 0
        r = loop.run_algorithm1(cfg(steps=5, eval_every=5), train, hold, ref)
        assert len(r.records) == 2

    def test_needs_reference(self, split):
        train, hold = split
        with pytest.raises(ValueError, match="needs a reference"):
            loop.run_algorithm1(cfg(), train, hold, None)
        with pytest.raises(ValueError, match="run_algorithm2"):
            loop.run_algorithm1(cfg(reference_source="online"), train, hold, None)

    def test_reference_spec_mismatch(self, split, reference):
        train, hold = split
        other = nn.ModelSpec((16, 8), "tanh", "classifier", 5)
        with pytest.raises(nn.ConfigurationError):
            loop.run_algorithm1(cfg(proxy=other), train, hold, reference)

    def test_heldout_reference_close_to_in_domain(self, split):
        train, hold = split
        a_half, b_half = data.split_holdout(train, 0.5, seed=7)
        c = cfg(steps=300, eval_every=100)
        finals = []
        for ref_data in (a_half, b_half):
            ref = loop.pretrain_reference(c, ref_data, steps=600)
            finals.append(loop.run_algorithm1(c, a_half, hold, ref).final_value)
        assert abs(finals[0] - finals[1]) <= 0.02


class TestAlgorithm2:
    def test_reference_trains_online(self, split):
        train, hold = split
        r = loop.run_algorithm2(cfg(steps=40), train, hold)
        assert r.reference is not None
        assert r.records[-1].cum_flops_ref == 3 * SPEC.inference_flops() * 64 * 40

    def test_frozen_reference_when_lr_scale_zero(self, split):
        train, hold = split
        c = cfg(steps=20, reference_lr_scale=0.0)
        r = loop.run_algorithm2(c, train, hold)
        init = nn.init_model(SPEC, np.random.default_rng([c.seed, loop._REF_INIT]))
        for a, b in zip(r.reference.weights, init.weights):
            np.testing.assert_array_equal(a, b)


class TestSpeedup:
    def test_beta_definition(self):
        base = fake_run(np.linspace(0.1, 0.8, 11), step=100)
        active = fake_run([0.1] * 7 + [0.8] * 4, step=100)
        sp = loop.speedup_beta(active, base, window=1)
        assert sp.target == pytest.approx(0.8)
        assert sp.beta == pytest.approx(0.7) and sp.crossing_step == 700
        assert sp.learner_speedup == pytest.approx(0.3)

    def test_740_of_1000(self):
        base = fake_run([0.0, 0.5], step=1000)
        active = RunResult([MetricsRecord(s, "acc", 0.5 if s >= 740 else 0.0, 0, 0, 0, 0, 0)
                            for s in range(0, 1001, 20)])
        assert loop.speedup_beta(active, base, window=1).beta == pytest.approx(0.74)

    def test_never_reached(self):
        sp = loop.speedup_beta(fake_run([0.1, 0.2]), fake_run([0.1, 0.9]), window=1)
        assert not sp.reached and sp.beta is None

    def test_metric_mismatch(self):
        with pytest.raises(ValueError, match="metric"):
            loop.speedup_beta(fake_run([0.1]), fake_run([0.1], metric="r1"))

    def test_trailing_mean(self):
        np.testing.assert_allclose(loop.trailing_mean([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])


class TestEvaluation:
    def test_accuracy_bounds_and_perfect_model(self):
        ds = data.gen_classification(200, 2, 2, 0.0, seed=0)
        w = (data.class_centers(2, 2, 6.0, 0)).T
        params = nn.ModelParams(nn.ModelSpec((2,), "tanh", "classifier", 2), [w], [np.zeros(2)])
        acc = loop.evaluate_heldout(params, ds)
        assert 0.95 < acc <= 1.0

    def test_uses_clean_labels(self, split, reference):
        _, hold = split
        a = loop.evaluate_heldout(reference.params, hold)
        noisy = data.LabeledDataset(hold.features, hold.labels, hold.noise_mask, 5)
        b = loop.evaluate_heldout(reference.params, noisy)
        assert a > b

    def test_r_at_1_is_chance_for_random_towers(self):
        ds = data.gen_paired(400, 8, 0.0, seed=0)
        tower = nn.ModelSpec((8, 16), "tanh", "encoder", 4)
        p = nn.init_two_tower(tower, tower, np.random.default_rng(0))
        assert loop.evaluate_heldout(p, ds, "contrastive") < 0.05


class TestStreams:
    def test_uniform_stream_epochs(self):
        s = loop.UniformStream(10, 4, seed=0)
        seen = np.concatenate([s.indices(t) for t in range(5)])
        assert len(seen) == 20
        assert np.all(np.bincount(seen, minlength=10) == 2)

    def test_order_independent(self):
        s1, s2 = loop.UniformStream(100, 8, 3), loop.UniformStream(100, 8, 3)
        late = s1.indices(40)
        for t in range(41):
            s2.indices(t)
        np.testing.assert_array_equal(late, s2.indices(40))
