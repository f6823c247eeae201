import numpy as np
import pytest

from actsel import data, loop, nn, scoring
from actsel.scoring import Policy


class Quadratic:
    """l(theta; x) = 0.5 * |theta - x|^2 with theta a flat vector and x rows."""

    def losses(self, theta, x, y=None):
        return 0.5 * np.sum((np.atleast_2d(x) - theta) ** 2, axis=1)

    def grads(self, theta, x, y=None):
        return theta - np.atleast_2d(x)


class QuadraticActor:
    def sq_grad_norms(self, theta, x, y):
        return np.sum((theta - np.atleast_2d(x)) ** 2, axis=1)


def small_net(rng, d=4, k=3, hidden=(6,)):
    return nn.init_params(nn.ModelSpec((d,) + hidden, "tanh", "classifier", k), rng)


class TestScoreFunctions:
    def test_hard_is_identity(self):
        np.testing.assert_array_equal(scoring.score_hard([0.1, 2.0]), [0.1, 2.0])

    def test_easy_is_negation(self):
        s = scoring.score_easy([0.1, 2.0])
        np.testing.assert_array_equal(s, [-0.1, -2.0])
        losses = np.array([0.7, 0.2, 1.5])
        assert np.argmax(scoring.score_easy(losses)) == np.argmin(losses)

    def test_learnability(self):
        np.testing.assert_array_equal(scoring.score_learnability([2.0], [0.5]), [1.5])
        np.testing.assert_array_equal(scoring.score_learnability([0.3, 0.9], [0.3, 0.9]), [0, 0])

    def test_decomposition(self, rng):
        a, b = rng.exponential(size=50), rng.exponential(size=50)
        np.testing.assert_array_equal(scoring.score_learnability(a, b),
                                      scoring.score_hard(a) + scoring.score_easy(b))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="differ in length"):
            scoring.score_learnability([1.0, 2.0], [1.0])
        with pytest.raises(ValueError, match="differ in length"):
            scoring.score_rho([1.0], [1.0, 2.0])

    def test_non_finite(self):
        with pytest.raises(nn.NumericError):
            scoring.score_hard([np.nan])

    def test_score_vector(self):
        sv = scoring.ScoreVector([3, 4], [0.5, -1.0])
        assert len(sv) == 2
        with pytest.raises(ValueError):
            scoring.ScoreVector([1], [0.5, 0.2])


class TestPolicies:
    def test_reads(self):
        assert Policy.LEARNABILITY.reads == ("online", "reference")
        assert Policy.RHO.reads == ("learner", "reference")
        assert Policy.HARD_LEARNER.reads == ("learner",)
        assert Policy.EASY_REFERENCE.reads == ("reference",)
        assert Policy.GRADNORM.reads == ("learner",)
        assert Policy.UNIFORM.reads == ()

    def test_parse(self):
        assert Policy.parse("Hard") is Policy.HARD_LEARNER
        assert Policy.parse("easy-ref") is Policy.EASY_REFERENCE
        assert Policy.parse("classact") is Policy.LEARNABILITY
        with pytest.raises(ValueError, match="unknown policy"):
            Policy.parse("oracle")

    def test_missing_model(self, rng):
        p = small_net(rng)
        with pytest.raises(ValueError, match="needs the reference model"):
            scoring.score_batch("learnability", np.zeros((2, 4)), [0, 1], scoring.ActorLoss(), online=p)

    def test_rho_equals_learnability_when_online_is_learner(self, rng):
        learner, ref = small_net(rng), small_net(rng)
        x, y = rng.normal(size=(20, 4)), rng.integers(0, 3, 20)
        actor = scoring.ActorLoss()
        rho = scoring.score_batch("rho", x, y, actor, learner=learner, reference=ref)
        learn = scoring.score_batch("learnability", x, y, actor, online=learner, reference=ref)
        np.testing.assert_array_equal(rho, learn)

    def test_identical_models_give_zero(self, rng):
        p = small_net(rng)
        x, y = rng.normal(size=(10, 4)), rng.integers(0, 3, 10)
        actor = scoring.ActorLoss()
        assert np.all(scoring.score_batch("rho", x, y, actor, learner=p, reference=p) == 0)
        assert np.all(scoring.score_batch("learnability", x, y, actor, online=p, reference=p) == 0)

    def test_mislabeled_point_scores_highest_under_hard(self):
        # a confident linear classifier; the second point carries the wrong label
        params = nn.ModelParams(nn.ModelSpec((2,), "tanh", "classifier", 2),
                                [np.array([[3.0, -3.0], [-3.0, 3.0]])], [np.zeros(2)])
        x = np.array([[1.0, 0.0], [1.0, 0.1]])
        y = np.array([0, 1])
        s = scoring.score_batch("hard", x, y, scoring.ActorLoss(), learner=params)
        assert np.argmax(s) == 1

    def test_contrastive_scoring_uses_dot_loss(self, rng):
        tower = nn.ModelSpec((3,), "tanh", "encoder", 2)
        p = nn.init_two_tower(tower, tower, rng)
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        s = scoring.score_batch("easy", x, y, scoring.ActorLoss("act_dot"), reference=p)
        za, zb = nn.forward(p.image, x), nn.forward(p.text, y)
        np.testing.assert_allclose(s, np.sum(za * zb, axis=1), rtol=1e-14)


class TestGradNorm:
    def test_saturated_example_near_zero(self):
        params = nn.ModelParams(nn.ModelSpec((2,), "tanh", "classifier", 2),
                                [np.array([[50.0, -50.0], [0.0, 0.0]])], [np.zeros(2)])
        s = scoring.score_gradnorm(params, np.array([[1.0, 0.0]]), np.array([0]))
        assert s[0] < 1e-12

    def test_duplicates_equal(self, rng):
        p = small_net(rng)
        x = np.repeat(rng.normal(size=(1, 4)), 3, axis=0)
        s = scoring.score_gradnorm(p, x, np.array([2, 2, 2]))
        assert s[0] == s[1] == s[2]

    def test_matches_explicit_gradients(self, rng):
        p = small_net(rng)
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
        g = nn.per_example_grads(p, x, y, "xent")
        np.testing.assert_allclose(scoring.score_gradnorm(p, x, y), np.sum(g ** 2, axis=1), rtol=1e-10)

    def test_quadratic(self):
        theta = np.array([1.5])
        x = np.array([[0.0], [1.0], [4.0]])
        s = scoring.score_gradnorm(theta, x, None, QuadraticActor())
        np.testing.assert_allclose(s, (1.5 - x[:, 0]) ** 2)


class TestTaylor:
    def test_one_dimensional_worked_example(self):
        g = scoring.taylor_gap(np.array([1.0]), np.array([0.9]), np.array([[2.0]]), objective=Quadratic())
        assert g.exact[0] == pytest.approx(-0.105, abs=1e-12)
        assert g.approx[0] == pytest.approx(-0.1, abs=1e-12)
        assert g.gap[0] == pytest.approx(-0.005, abs=1e-12)

    def test_identical_parameters(self, rng):
        p = small_net(rng)
        x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
        g = scoring.taylor_gap(p, p.copy(), x, y)
        assert np.all(g.exact == 0) and np.all(g.approx == 0) and np.all(g.gap == 0)

    def test_spec_mismatch(self, rng):
        with pytest.raises(nn.ConfigurationError):
            scoring.taylor_gap(small_net(rng), small_net(rng, hidden=(5,)), np.zeros((1, 4)), [0])

    @pytest.mark.parametrize("seed", range(3))
    def test_gap_is_second_order(self, seed):
        rng = np.random.default_rng(seed)
        p = small_net(rng, d=5, k=3, hidden=(8,))
        x, y = rng.normal(size=(32, 5)), rng.integers(0, 3, 32)
        fit = scoring.taylor_slope_sweep(p, x, y, [1e-1, 1e-2, 1e-3, 1e-4])
        assert 1.9 <= fit.slope <= 2.1, fit
        assert np.all(np.diff(fit.mean_abs_gap) < 0)


class TestAlignment:
    def test_single_example_batch_is_gradnorm(self, rng):
        p = small_net(rng)
        x, y = rng.normal(size=(1, 4)), np.array([1])
        lam = 0.01
        a = scoring.batch_alignment_diagnostic(p, x, y, x, y, lam)
        np.testing.assert_allclose(a, lam * scoring.score_gradnorm(p, x, y), rtol=1e-12)

    def test_orthogonal_gradients(self):
        theta = np.zeros(2)
        a = scoring.batch_alignment_diagnostic(theta, np.array([[1.0, 0.0]]), None,
                                               np.array([[0.0, 3.0]]), None, 0.5,
                                               objective=Quadratic())
        assert a[0] == 0.0

    def test_tracks_exact_learnability(self, rng):
        p = small_net(rng, d=6, k=4, hidden=(10,))
        x, y = rng.normal(size=(64, 6)), rng.integers(0, 4, 64)
        lam = 1e-3
        ref = scoring.reference_after_batch_step(p, x, y, lam)
        exact = scoring.taylor_gap(p, ref, x, y).exact
        align = scoring.batch_alignment_diagnostic(p, x, y, x, y, lam)
        assert np.corrcoef(exact, align)[0, 1] > 0.9


@pytest.fixture(scope="module")
def noisy_setup():
    ds = data.gen_classification(6000, 16, 5, 0.2, seed=3)
    train, holdout = data.split_holdout(ds, 0.2, seed=3)
    spec = nn.ModelSpec((16, 32), "tanh", "classifier", 5)
    cfg = loop.LoopConfig(learner=spec, steps=300, lr=3e-3, seed=3)
    ref = loop.pretrain_reference(cfg, train)
    return train, ref.params


def test_easy_reference_prefers_clean_examples(noisy_setup):
    train, ref = noisy_setup
    s = scoring.score_easy(nn.per_example_losses(ref, train.features, train.labels, "xent"))
    top = np.argsort(-s)[: len(s) // 2]
    assert train.noise_mask[top].mean() < 0.5 * train.noise_mask.mean()


def test_learnability_scores_mislabeled_examples_low(noisy_setup, rng):
    train, ref = noisy_setup
    online = nn.init_model(ref.spec, rng)
    s = scoring.score_batch("learnability", train.features, train.labels, scoring.ActorLoss(),
                            online=online, reference=ref)
    assert s[train.noise_mask].mean() < s[~train.noise_mask].mean()
