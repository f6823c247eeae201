"""Per-example data scores and the first-order diagnostics behind learnability.

Scores are raw loss statistics; the sampler applies the softmax. For every
policy the scoring pass uses the actor loss: cross-entropy for classifiers and
the negative dot product for two-tower models.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import nn


class Policy(str, enum.Enum):
    UNIFORM = "uniform"
    HARD_LEARNER = "hard_learner"
    EASY_REFERENCE = "easy_reference"
    LEARNABILITY = "learnability"
    RHO = "rho"
    GRADNORM = "gradnorm"

    @property
    def reads(self) -> tuple:
        """Which parameter sets a scoring pass needs."""
        return _READS[self]

    @classmethod
    def parse(cls, name) -> "Policy":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("-", "_")
        aliases = {"hard": "hard_learner", "easy": "easy_reference", "easy_ref": "easy_reference",
                   "classact": "learnability", "grad_norm": "gradnorm"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            known = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown policy {name!r}; expected one of {known}") from None


_READS = {
    Policy.UNIFORM: (),
    Policy.HARD_LEARNER: ("learner",),
    Policy.EASY_REFERENCE: ("reference",),
    Policy.LEARNABILITY: ("online", "reference"),
    Policy.RHO: ("learner", "reference"),
    Policy.GRADNORM: ("learner",),
}


@dataclass
class ScoreVector:
    ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.scores = _finite(self.scores)
        if self.ids.shape != self.scores.shape:
            raise ValueError(f"{self.ids.size} ids for {self.scores.size} scores")

    def __len__(self):
        return self.scores.size


def _finite(v):
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise nn.NumericError("scores must be finite")
    return v


def _aligned(a, b):
    a, b = _finite(a), _finite(b)
    if a.shape != b.shape:
        raise ValueError(f"loss vectors differ in length: {a.size} vs {b.size}")
    return a, b


def score_hard(losses_learner):
    return _finite(losses_learner).copy()


def score_easy(losses_reference):
    return -_finite(losses_reference)


def score_learnability(losses_online, losses_reference):
    a, b = _aligned(losses_online, losses_reference)
    return a - b


def score_rho(losses_learner, losses_reference):
    # same arithmetic as learnability; only the first model (and its cost) differs
    a, b = _aligned(losses_learner, losses_reference)
    return a - b


@dataclass(frozen=True)
class ActorLoss:
    """Per-example scoring loss for a model family."""

    kind: str = "xent"
    smoothing: float = 0.0

    def __call__(self, params, x, y):
        return nn.per_example_losses(params, x, y, self.kind, self.smoothing)

    def sq_grad_norms(self, params, x, y):
        return nn.per_example_sq_grad_norms(params, x, y, self.kind, self.smoothing)

    def grads(self, params, x, y):
        return nn.per_example_grads(params, x, y, self.kind, self.smoothing)


def score_gradnorm(params_learner, x, y, actor_loss: ActorLoss | None = None):
    """Squared norm of each example's loss gradient (unscaled)."""
    actor_loss = actor_loss or ActorLoss()
    return actor_loss.sq_grad_norms(params_learner, x, y)


def score_batch(policy, x, y, actor_loss: ActorLoss, learner=None, online=None,
                reference=None) -> np.ndarray:
    """Scores for a super-batch under ``policy``, reading only the models it needs."""
    policy = Policy.parse(policy)
    models = {"learner": learner, "online": online, "reference": reference}
    for name in policy.reads:
        if models[name] is None:
            raise ValueError(f"policy {policy.value} needs the {name} model")
    if policy is Policy.UNIFORM:
        return np.zeros(len(x))
    if policy is Policy.HARD_LEARNER:
        return score_hard(actor_loss(learner, x, y))
    if policy is Policy.EASY_REFERENCE:
        return score_easy(actor_loss(reference, x, y))
    if policy is Policy.LEARNABILITY:
        return score_learnability(actor_loss(online, x, y), actor_loss(reference, x, y))
    if policy is Policy.RHO:
        return score_rho(actor_loss(learner, x, y), actor_loss(reference, x, y))
    return score_gradnorm(learner, x, y, actor_loss)


# ---------------------------------------------------------------- diagnostics

class NetObjective:
    """Exposes a network's per-example losses and gradients on flat parameter vectors."""

    def __init__(self, template, actor_loss: ActorLoss | None = None):
        self.template = template
        self.actor_loss = actor_loss or ActorLoss()

    def losses(self, theta, x, y):
        return self.actor_loss(self.template.unflatten(theta), x, y)

    def grads(self, theta, x, y):
        return self.actor_loss.grads(self.template.unflatten(theta), x, y)


@dataclass
class TaylorGap:
    exact: np.ndarray
    approx: np.ndarray
    gap: np.ndarray


def _flat(params):
    if isinstance(params, np.ndarray) or not hasattr(params, "flat"):
        return np.asarray(params, dtype=np.float64)
    return params.flat()


def _objective_for(params_a, params_b, objective):
    if hasattr(params_a, "spec_dict") and hasattr(params_b, "spec_dict"):
        if not nn.same_architecture(params_a, params_b):
            raise nn.ConfigurationError("online and reference parameters have different specs")
    if objective is None:
        objective = NetObjective(params_a)
    return objective


def taylor_gap(params_online, params_reference, x, y=None, objective=None) -> TaylorGap:
    """Exact learnability versus its linearisation around the online parameters.

    ``exact = l(x|t) - l(x|*)`` and ``approx = (t - *) . grad l(x|t)``.
    """
    objective = _objective_for(params_online, params_reference, objective)
    t, s = _flat(params_online), _flat(params_reference)
    if t.shape != s.shape:
        raise nn.ConfigurationError("parameter vectors differ in size")
    exact = objective.losses(t, x, y) - objective.losses(s, x, y)
    approx = objective.grads(t, x, y) @ (t - s)
    return TaylorGap(exact, approx, exact - approx)


def batch_alignment_diagnostic(params, x_example, y_example, x_batch, y_batch, lam,
                               objective=None):
    """``lam * grad l(x_i) . grad l(batch)`` for each example row."""
    objective = _objective_for(params, params, objective)
    theta = _flat(params)
    g_batch = objective.grads(theta, x_batch, y_batch).mean(axis=0)
    return lam * (objective.grads(theta, x_example, y_example) @ g_batch)


def reference_after_batch_step(params, x, y, lam, objective=None):
    """Parameters after one gradient step of size ``lam`` on the batch mean loss."""
    objective = _objective_for(params, params, objective)
    theta = _flat(params)
    stepped = theta - lam * objective.grads(theta, x, y).mean(axis=0)
    return stepped if isinstance(params, np.ndarray) else params.unflatten(stepped)


@dataclass
class SlopeFit:
    lambdas: np.ndarray
    mean_abs_gap: np.ndarray
    slope: float


def taylor_slope_sweep(params, x, y, lambdas, objective=None) -> SlopeFit:
    """Fit the log-log slope of mean |gap| as the reference moves ``lam`` along the batch gradient."""
    lambdas = np.asarray(sorted(lambdas, reverse=True), dtype=np.float64)
    gaps = []
    for lam in lambdas:
        ref = reference_after_batch_step(params, x, y, lam, objective)
        gaps.append(np.abs(taylor_gap(params, ref, x, y, objective).gap).mean())
    gaps = np.asarray(gaps)
    slope = float(np.polyfit(np.log(lambdas), np.log(gaps), 1)[0])
    return SlopeFit(lambdas, gaps, slope)
