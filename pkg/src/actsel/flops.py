"""Compute-positivity ledger.

All costs are FLOPs per learner update, in whatever unit the inputs use
(GFLOPs for the catalog). ``spi`` is the samples-per-insert ratio ``b / B``, so
``rho = 1 / spi`` examples are scored per trained example, and ``beta`` is the
fraction of uniform-sampling learner updates the prioritized run needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

BACKWARD_FACTOR = 3.0

VIT_CATALOG = {
    "L": 61.6,
    "B": 17.6,
    "S": 4.6,
    "Ti": 1.3,
    "Mu_6-3": 1.24,
    "Mu_12-2": 1.23,
    "Mu_6-2": 0.48,
    "Mu_12-1": 0.23,
    "Mu_6-1": 0.203,
    "Mu_3-1": 0.065,
    "Mu_2-1": 0.033,
    "Mu_1-1": 0.011,
}

METHODS = ("uniform", "easy_ref", "rho", "classact")


@dataclass
class CostCatalog:
    """Inference GFLOPs per example, by model name."""

    entries: dict = field(default_factory=lambda: dict(VIT_CATALOG))

    def __post_init__(self):
        for name, f in self.entries.items():
            self._check(name, f)

    @staticmethod
    def _check(name, f):
        if not f > 0:
            raise ValueError(f"catalog entry {name!r} must have positive FLOPs, got {f}")

    def __getitem__(self, name: str) -> float:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"unknown model {name!r}; known: {', '.join(self.entries)}") from None

    def __contains__(self, name):
        return name in self.entries

    def add(self, name: str, gflops: float):
        self._check(name, gflops)
        self.entries[name] = gflops


def cost_uniform(f_learn, backward_factor=BACKWARD_FACTOR):
    return backward_factor * f_learn


def cost_easy_ref(f_learn, f_ref, spi, beta, backward_factor=BACKWARD_FACTOR):
    return (backward_factor * f_learn + f_ref / spi) * beta + backward_factor * f_ref


def cost_rho(f_learn, f_ref, spi, beta, backward_factor=BACKWARD_FACTOR):
    return (backward_factor * f_learn + (f_learn + f_ref) / spi) * beta + backward_factor * f_ref


def cost_classact(f_learn, f_ref, spi, beta, backward_factor=BACKWARD_FACTOR):
    return (backward_factor * f_learn + 2 * f_ref / spi) * beta + backward_factor * f_ref


def actor_cost(method: str, f_learn, f_ref):
    """Per-example scoring cost for a method."""
    if method == "uniform":
        return 0.0
    if method == "easy_ref":
        return f_ref
    if method == "rho":
        return f_learn + f_ref
    if method == "classact":
        return 2 * f_ref
    raise ValueError(f"unknown method {method!r}")


def method_cost(method, f_learn, f_ref, spi, beta, backward_factor=BACKWARD_FACTOR):
    if method == "uniform":
        return cost_uniform(f_learn, backward_factor)
    fn = {"easy_ref": cost_easy_ref, "rho": cost_rho, "classact": cost_classact}[method]
    return fn(f_learn, f_ref, spi, beta, backward_factor)


@dataclass(frozen=True)
class Positivity:
    positive: bool
    margin: float  # uniform cost minus active cost; > 0 when compute-positive

    def __bool__(self):
        return self.positive


def positivity_check(f_learn, f_act, f_ref, rho, beta, backward_factor=BACKWARD_FACTOR):
    active = (backward_factor * f_learn + rho * f_act) * beta + backward_factor * f_ref
    margin = backward_factor * f_learn - active
    return Positivity(margin > 0, margin)


def break_even_beta(f_learn, f_act, f_ref, rho, backward_factor=BACKWARD_FACTOR):
    """Largest ``beta`` (exclusive) at which active selection is still compute-positive."""
    return (backward_factor * f_learn - backward_factor * f_ref) / (backward_factor * f_learn + rho * f_act)


def compute_speedup(cost, f_learn, backward_factor=BACKWARD_FACTOR):
    """Fractional total-compute saving versus uniform sampling (negative = overhead)."""
    base = cost_uniform(f_learn, backward_factor)
    return (base - cost) / base


@dataclass
class CostRow:
    method: str
    cost_per_update: float
    compute_speedup: float
    break_even_beta: float | None
    positive: bool


@dataclass
class CostReport:
    learner: str
    actor: str
    f_learn: float
    f_ref: float
    spi: float
    beta: float
    rows: list

    def row(self, method) -> CostRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {
            "learner": self.learner, "actor": self.actor, "f_learn": self.f_learn,
            "f_ref": self.f_ref, "spi": self.spi, "beta": self.beta,
            "rows": [r.__dict__ for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        head = (f"learner={self.learner} ({self.f_learn:g} GFLOPs)  actor={self.actor} "
                f"({self.f_ref:g} GFLOPs)  spi={self.spi:g}  beta={self.beta:g}")
        lines = [head, f"{'method':<10} {'C/update':>12} {'speedup%':>10} {'beta*':>8}  positive"]
        for r in self.rows:
            be = "-" if r.break_even_beta is None else f"{r.break_even_beta:.4f}"
            lines.append(f"{r.method:<10} {r.cost_per_update:>12.4f} "
                         f"{100 * r.compute_speedup:>10.2f} {be:>8}  {'yes' if r.positive else 'no'}")
        return "\n".join(lines)


def cost_report(learner: str, actor: str, spi: float, beta: float,
                catalog: CostCatalog | None = None,
                backward_factor=BACKWARD_FACTOR) -> CostReport:
    catalog = catalog or CostCatalog()
    f_learn, f_ref = catalog[learner], catalog[actor]
    rows = []
    for method in METHODS:
        c = method_cost(method, f_learn, f_ref, spi, beta, backward_factor)
        if method == "uniform":
            rows.append(CostRow(method, c, 0.0, None, False))
            continue
        f_act = actor_cost(method, f_learn, f_ref)
        check = positivity_check(f_learn, f_act, f_ref, 1.0 / spi, beta, backward_factor)
        rows.append(CostRow(method, c, compute_speedup(c, f_learn, backward_factor),
                            break_even_beta(f_learn, f_act, f_ref, 1.0 / spi, backward_factor),
                            check.positive))
    return CostReport(learner, actor, f_learn, f_ref, spi, beta, rows)


# ------------------------------------------------------------ run-level ledger

def step_flops(policy: str, f_learn: int, f_online: int, f_ref: int, super_batch: int,
               sub_batch: int, online_reference: bool = False, backward_factor: int = 3):
    """FLOPs charged for one selection step as ``(learner, actor, reference)``.

    ``actor`` covers scoring inference over the super-batch plus the online
    model's update on the sub-batch; ``reference`` is non-zero only when the
    reference model is trained inside the loop.
    """
    learner = backward_factor * f_learn * sub_batch
    scoring = {
        "uniform": 0,
        "hard_learner": f_learn,
        "easy_reference": f_ref,
        "learnability": f_online + f_ref,
        "rho": f_learn + f_ref,
        "gradnorm": backward_factor * f_learn,
    }
    if policy not in scoring:
        raise ValueError(f"unknown policy {policy!r}")
    actor = scoring[policy] * super_batch
    if policy == "learnability":
        actor += backward_factor * f_online * sub_batch
    ref = backward_factor * f_ref * super_batch if online_reference else 0
    return learner, actor, ref


def pretraining_flops(f_ref: int, steps: int, batch: int, backward_factor: int = 3) -> int:
    return backward_factor * f_ref * steps * batch


@dataclass
class FlopLedger:
    learner: int = 0
    actor: int = 0
    ref: int = 0

    def charge(self, learner=0, actor=0, ref=0):
        self.learner += learner
        self.actor += actor
        self.ref += ref

    @property
    def total(self):
        return self.learner + self.actor + self.ref


def closed_form_totals(policy, f_learn, f_online, f_ref, super_batch, sub_batch, steps,
                       online_reference=False, pretrain=0):
    """Cumulative ``(learner, actor, reference)`` FLOPs after ``steps`` updates."""
    learner, actor, ref = step_flops(policy, f_learn, f_online, f_ref, super_batch, sub_batch,
                                     online_reference)
    return learner * steps, actor * steps, ref * steps + pretrain
