"""Training orchestrators: uniform baseline, fixed-reference and online-reference selection.

Every random draw comes from a stream keyed by ``(seed, purpose, counter)``, so
a step's super-batch and its sampler randomness do not depend on the order in
which steps are computed. The asynchronous pipeline relies on this.
"""

from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from . import flops, nn
from .data import TrainView
from .replay import MemoryBank
from .scoring import ActorLoss, Policy, score_batch

log = logging.getLogger(__name__)

# rng stream purposes
_DATA, _SAMPLER, _LEARNER_INIT, _ONLINE_INIT, _REF_INIT, _REF_DATA = range(1, 7)


class ReferenceSource(str, enum.Enum):
    PRETRAINED = "pretrained"
    ONLINE = "online"
    HELDOUT = "heldout"


@dataclass
class LoopConfig:
    learner: object  # nn.ModelSpec or nn.TwoTowerSpec
    proxy: object | None = None  # online and reference models; defaults to the learner spec
    task: str = "classification"
    super_batch: int = 128
    sub_batch: int = 64
    policy: str = "learnability"
    steps: int = 1000
    eval_every: int = 50
    seed: int = 0
    reference_source: str = "pretrained"
    lr: float = 1e-3
    weight_decay: float = 1e-3
    warmup_frac: float = 0.01
    smoothing: float = 0.1
    act_smoothing: float = 0.0
    temperature: float = 1.0
    sampler_temperature: float = 1.0
    sampling_method: str = "sequential"
    reference_lr_scale: float = 2.0
    online_lr_scale: float = 1.0
    share_online_init: bool = False
    clip_norm: float | None = None
    reference_steps: int | None = None
    reference_batch: int | None = None
    smoothing_window: int = 5

    def __post_init__(self):
        self.policy = Policy.parse(self.policy).value
        self.reference_source = ReferenceSource(self.reference_source).value
        if self.proxy is None:
            self.proxy = self.learner
        if self.task not in ("classification", "contrastive"):
            raise ValueError(f"task: unknown task {self.task!r}")
        if not 0 < self.sub_batch <= self.super_batch:
            raise ValueError(f"sub_batch: need 0 < b <= B, got b={self.sub_batch}, B={self.super_batch}")
        if self.steps < 0:
            raise ValueError("steps: must be >= 0")
        if self.eval_every <= 0:
            raise ValueError("eval_every: must be positive")
        if self.task == "contrastive" and self.sub_batch < 2:
            raise ValueError("sub_batch: contrastive learning needs at least 2 pairs")
        two_tower = isinstance(self.learner, nn.TwoTowerSpec)
        if two_tower != (self.task == "contrastive") or two_tower != isinstance(self.proxy, nn.TwoTowerSpec):
            raise ValueError("learner/proxy: spec kind does not match the task")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))

    def with_(self, **kw) -> "LoopConfig":
        return replace(self, **kw)


def online_config(config: LoopConfig, ratio: int = 10) -> LoopConfig:
    """Defaults for the one-pass variant: ``B = ratio * b`` and a trained-online reference."""
    return config.with_(super_batch=ratio * config.sub_batch, reference_source="online")


# ---------------------------------------------------------------- tasks

class Task:
    loss_kind = "xent"
    metric = "holdout_accuracy"

    def __init__(self, config: LoopConfig):
        self.config = config
        self.actor_loss = ActorLoss("xent", config.act_smoothing)

    def learn(self, params, x, y):
        c = self.config
        loss, grads = nn.loss_and_grad(params, x, y, self.loss_kind, c.smoothing, c.temperature)
        if c.clip_norm is not None:
            grads = nn.clip_by_global_norm(grads, c.clip_norm)
        return loss, grads

    def evaluate(self, params, view: TrainView) -> float:
        return classification_accuracy(params, view)


class ContrastiveTask(Task):
    loss_kind = "contrastive"
    metric = "holdout_r_at_1"

    def __init__(self, config: LoopConfig):
        super().__init__(config)
        self.actor_loss = ActorLoss("act_dot")

    def evaluate(self, params, view: TrainView) -> float:
        return retrieval_r_at_1(params, view)


def make_task(config: LoopConfig) -> Task:
    return ContrastiveTask(config) if config.task == "contrastive" else Task(config)


def classification_accuracy(params, view: TrainView) -> float:
    logits = nn.forward(params, view.x)
    return float((logits.argmax(axis=1) == view.y).mean())


def retrieval_r_at_1(params, view: TrainView) -> float:
    """Fraction of image queries whose own text is the top match by dot product."""
    za, zb = nn.forward(params.image, view.x), nn.forward(params.text, view.y)
    sims = za @ zb.T
    return float((sims.argmax(axis=1) == np.arange(len(za))).mean())


def evaluate_heldout(params, heldout, task: str | None = None) -> float:
    """Top-1 accuracy for classifiers, image-to-text R@1 for two-tower models."""
    view = heldout.eval_view() if hasattr(heldout, "eval_view") else heldout
    if isinstance(params, nn.TwoTowerParams) or task == "contrastive":
        return retrieval_r_at_1(params, view)
    return classification_accuracy(params, view)


# ---------------------------------------------------------------- data stream

class UniformStream:
    """Reshuffle-per-pass stream; ``indices(t)`` is the t-th batch, computable in any order."""

    def __init__(self, n: int, batch: int, seed: int, purpose: int = _DATA):
        if n <= 0:
            raise ValueError("dataset is empty")
        self.n, self.batch, self.seed, self.purpose = n, batch, seed, purpose
        self._perms: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def _perm(self, epoch):
        with self._lock:
            perm = self._perms.get(epoch)
            if perm is None:
                perm = np.random.default_rng([self.seed, self.purpose, epoch]).permutation(self.n)
                self._perms[epoch] = perm
                for old in [e for e in self._perms if e < epoch - 2]:
                    del self._perms[old]
            return perm

    def indices(self, t: int) -> np.ndarray:
        pos = np.arange(t * self.batch, (t + 1) * self.batch)
        epochs = pos // self.n
        out = np.empty(self.batch, dtype=np.int64)
        for e in np.unique(epochs):
            sel = epochs == e
            out[sel] = self._perm(int(e))[pos[sel] % self.n]
        return out


def sampler_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SAMPLER, step])


# ---------------------------------------------------------------- results

@dataclass
class MetricsRecord:
    step: int
    metric: str
    value: float
    learner_loss: float
    selected_noise: float
    cum_flops_learner: int
    cum_flops_actor: int
    cum_flops_ref: int


@dataclass
class RunResult:
    records: list = field(default_factory=list)
    noise_trace: np.ndarray | None = None
    index_log: list | None = None
    learner: object = None
    online: object = None
    reference: object = None
    meta: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def steps(self):
        return self.column("step")

    @property
    def values(self):
        return self.column("value")

    @property
    def final_value(self) -> float:
        return self.records[-1].value

    @property
    def metric(self) -> str:
        return self.records[0].metric if self.records else ""


def trailing_mean(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    i = np.arange(1, values.size + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


@dataclass(frozen=True)
class Speedup:
    beta: float | None
    learner_speedup: float | None
    crossing_step: int | None
    target: float

    @property
    def reached(self) -> bool:
        return self.beta is not None


def speedup_beta(active: RunResult, baseline: RunResult, window: int = 5) -> Speedup:
    """Fraction of the baseline's updates the active run needs to reach its final metric.

    Both curves are smoothed by a trailing mean over ``window`` evaluations; the
    crossing step is the first evaluation at or above the target, without
    interpolation. ``beta`` is None when the active run never gets there.
    """
    if active.metric != baseline.metric:
        raise ValueError(f"metric mismatch: {active.metric} vs {baseline.metric}")
    target = float(trailing_mean(baseline.values, window)[-1])
    total = int(baseline.steps[-1])
    if total <= 0:
        raise ValueError("baseline has no training steps")
    for step, v in zip(active.steps, trailing_mean(active.values, window)):
        if v >= target:
            beta = step / total
            return Speedup(beta, 1.0 - beta, int(step), target)
    return Speedup(None, None, None, target)


# ---------------------------------------------------------------- model state

@dataclass
class Trainee:
    params: object
    opt: nn.OptimizerState
    lr_scale: float = 1.0

    def update(self, task: Task, x, y) -> float:
        loss, grads = task.learn(self.params, x, y)
        self.params, self.opt = nn.adam_step(self.params, grads, self.opt, self.lr_scale)
        return loss


def new_trainee(config: LoopConfig, spec, purpose: int, steps=None, lr_scale=1.0, params=None):
    steps = config.steps if steps is None else steps
    if params is None:
        params = nn.init_model(spec, np.random.default_rng([config.seed, purpose]))
    opt = nn.init_optimizer(params, config.lr, max(steps, 1),
                            int(round(config.warmup_frac * steps)), config.weight_decay)
    return Trainee(params, opt, lr_scale)


@dataclass
class Pretrained:
    params: object
    flops: int
    curve: list = field(default_factory=list)


def pretrain_reference(config: LoopConfig, dataset, heldout=None, steps=None, batch=None,
                       spec=None) -> Pretrained:
    """Train a proxy-sized model on uniform batches to serve as the fixed reference."""
    steps = config.reference_steps if steps is None else steps
    steps = config.steps if steps is None else steps
    batch = config.reference_batch if batch is None else batch
    batch = config.sub_batch if batch is None else batch
    spec = config.proxy if spec is None else spec
    view = dataset.view() if hasattr(dataset, "view") else dataset
    if len(view) == 0:
        raise ValueError("reference dataset is empty")
    task = make_task(config)
    ref = new_trainee(config, spec, _REF_INIT, steps=steps)
    stream = UniformStream(len(view), batch, config.seed, _REF_DATA)
    curve = []
    for t in range(steps):
        idx = stream.indices(t)
        ref.update(task, view.x[idx], view.y[idx])
        if heldout is not None and ((t + 1) % config.eval_every == 0 or t + 1 == steps):
            curve.append((t + 1, task.evaluate(ref.params, heldout.eval_view())))
    total = flops.pretraining_flops(spec.inference_flops(), steps, batch)
    return Pretrained(ref.params, total, curve)


# ---------------------------------------------------------------- selection run

class SelectionRun:
    """State and step primitives shared by the sequential loops and the async pipeline."""

    def __init__(self, config: LoopConfig, train, holdout, reference: Pretrained | None = None,
                 online_init=None, keep_index_log: bool = False):
        self.config = c = config
        self.task = make_task(c)
        self.view = train.view()
        self.noise = np.asarray(train.noise_mask, dtype=bool)
        self.holdout = holdout.eval_view() if holdout is not None else None
        self.policy = Policy(c.policy)
        self.online_reference = c.reference_source == ReferenceSource.ONLINE.value
        self.stream = UniformStream(len(self.view), c.super_batch, c.seed)
        self.bank = MemoryBank(capacity=max(4 * c.super_batch, 1))

        self.learner = new_trainee(c, c.learner, _LEARNER_INIT)
        self.online = None
        self.reference = None
        needs = set(self.policy.reads)
        if "reference" in needs:
            if self.online_reference:
                self.reference = new_trainee(c, c.proxy, _REF_INIT, lr_scale=c.reference_lr_scale)
            else:
                if reference is None:
                    raise ValueError(f"policy {c.policy} needs a reference model")
                if not nn.same_architecture(reference.params, nn.init_model(c.proxy, np.random.default_rng(0))):
                    raise nn.ConfigurationError("reference parameters do not match the proxy spec")
                self.reference = Trainee(reference.params, None, 0.0)
        if "online" in needs:
            if online_init is not None:
                if not nn.same_architecture(online_init, nn.init_model(c.proxy, np.random.default_rng(0))):
                    raise nn.ConfigurationError("online parameters do not match the proxy spec")
                self.online = new_trainee(c, c.proxy, _ONLINE_INIT, lr_scale=c.online_lr_scale,
                                          params=online_init.copy())
            else:
                purpose = _REF_INIT if c.share_online_init else _ONLINE_INIT
                self.online = new_trainee(c, c.proxy, purpose, lr_scale=c.online_lr_scale)

        self.f_learn = c.learner.inference_flops()
        self.f_proxy = c.proxy.inference_flops()
        self.ledger = flops.FlopLedger()
        if reference is not None and not self.online_reference and "reference" in needs:
            self.ledger.charge(ref=reference.flops)
        self.step_cost = flops.step_flops(c.policy, self.f_learn, self.f_proxy, self.f_proxy,
                                          c.super_batch, c.sub_batch,
                                          self.online_reference and "reference" in needs)
        self.records: list[MetricsRecord] = []
        self.noise_trace = np.zeros(c.steps)
        self.index_log = [] if keep_index_log else None
        self._losses: list[float] = []
        self._noise: list[float] = []

    # -- primitives ----------------------------------------------------

    def draw(self, t: int) -> np.ndarray:
        return self.stream.indices(t)

    def snapshot(self) -> dict:
        """Current parameters of the models the policy reads (treated as read-only)."""
        out = {}
        for name in self.policy.reads:
            out[name] = getattr(self, name).params
        return out

    def score(self, idx, snap: dict) -> np.ndarray:
        x, y = self.view.x[idx], self.view.y[idx]
        return score_batch(self.policy, x, y, self.task.actor_loss, **snap)

    def update_reference(self, idx):
        if self.online_reference and self.reference is not None:
            self.reference.update(self.task, self.view.x[idx], self.view.y[idx])

    def select(self, t: int, idx, scores) -> np.ndarray:
        c = self.config
        ids = np.arange(len(idx), dtype=np.int64) + t * c.super_batch
        self.bank.insert(ids, scores, group=t, payloads=idx)
        picked = self.bank.sample(c.sub_batch, sampler_rng(c.seed, t), c.sampler_temperature,
                                  group=t, method=c.sampling_method)
        self.bank.retire_group(t)
        # keep super-batch order so b == B reproduces plain uniform training exactly
        return np.asarray(idx)[np.sort(picked - t * c.super_batch)]

    def learn(self, t: int, sub):
        x, y = self.view.x[sub], self.view.y[sub]
        loss = self.learner.update(self.task, x, y)
        if self.online is not None:
            self.online.update(self.task, x, y)
        self.ledger.charge(*self.step_cost)
        frac = float(self.noise[sub].mean())
        self.noise_trace[t] = frac
        self._losses.append(loss)
        self._noise.append(frac)
        if self.index_log is not None:
            self.index_log.append(np.asarray(sub).copy())
        if (t + 1) % self.config.eval_every == 0 or t + 1 == self.config.steps:
            self.record(t + 1)

    def record(self, step: int):
        value = self.task.evaluate(self.learner.params, self.holdout) if self.holdout is not None else float("nan")
        loss = float(np.mean(self._losses)) if self._losses else float("nan")
        noise = float(np.mean(self._noise)) if self._noise else float("nan")
        self._losses, self._noise = [], []
        self.records.append(MetricsRecord(step, self.task.metric, value, loss, noise,
                                          int(self.ledger.learner), int(self.ledger.actor),
                                          int(self.ledger.ref)))

    def result(self) -> RunResult:
        return RunResult(self.records, self.noise_trace, self.index_log, self.learner.params,
                         self.online.params if self.online else None,
                         self.reference.params if self.reference else None,
                         {"policy": self.config.policy, "seed": self.config.seed,
                          "reference_source": self.config.reference_source,
                          "super_batch": self.config.super_batch,
                          "sub_batch": self.config.sub_batch})

    def step(self, t: int):
        idx = self.draw(t)
        scores = self.score(idx, self.snapshot())
        self.update_reference(idx)
        sub = self.select(t, idx, scores)
        self.learn(t, sub)


def _run(run: SelectionRun) -> RunResult:
    run.record(0)
    for t in range(run.config.steps):
        run.step(t)
    return run.result()


def run_algorithm1(config: LoopConfig, train, holdout, reference: Pretrained | None,
                   online_init=None, keep_index_log=False) -> RunResult:
    """Fixed reference: score the super-batch, sample a sub-batch, update learner and online model."""
    if config.reference_source == ReferenceSource.ONLINE.value:
        raise ValueError("reference_source 'online' belongs to run_algorithm2")
    return _run(SelectionRun(config, train, holdout, reference, online_init, keep_index_log))


def run_algorithm2(config: LoopConfig, train, holdout, keep_index_log=False) -> RunResult:
    """Reference trained on each super-batch (after scoring it) at ``reference_lr_scale`` times the lr."""
    config = config.with_(reference_source=ReferenceSource.ONLINE.value)
    return _run(SelectionRun(config, train, holdout, None, None, keep_index_log))


def run_uniform(config: LoopConfig, train, holdout, keep_index_log=False) -> RunResult:
    """Plain training on uniformly drawn batches of size ``sub_batch``."""
    c = config.with_(super_batch=config.sub_batch, policy=Policy.UNIFORM.value,
                     reference_source=ReferenceSource.PRETRAINED.value)
    task = make_task(c)
    view = train.view()
    noise = np.asarray(train.noise_mask, dtype=bool)
    hold = holdout.eval_view() if holdout is not None else None
    stream = UniformStream(len(view), c.sub_batch, c.seed)
    learner = new_trainee(c, c.learner, _LEARNER_INIT)
    per_step = flops.step_flops("uniform", c.learner.inference_flops(), 0, 0, c.sub_batch, c.sub_batch)[0]
    records, losses, fracs = [], [], []
    trace = np.zeros(c.steps)
    index_log = [] if keep_index_log else None

    def record(step):
        value = task.evaluate(learner.params, hold) if hold is not None else float("nan")
        records.append(MetricsRecord(
            step, task.metric, value,
            float(np.mean(losses)) if losses else float("nan"),
            float(np.mean(fracs)) if fracs else float("nan"),
            int(per_step * step), 0, 0))
        losses.clear()
        fracs.clear()

    record(0)
    for t in range(c.steps):
        idx = stream.indices(t)
        losses.append(learner.update(task, view.x[idx], view.y[idx]))
        trace[t] = fracs_t = float(noise[idx].mean())
        fracs.append(fracs_t)
        if index_log is not None:
            index_log.append(idx.copy())
        if (t + 1) % c.eval_every == 0 or t + 1 == c.steps:
            record(t + 1)
    return RunResult(records, trace, index_log, learner.params, None, None,
                     {"policy": "uniform", "seed": c.seed, "sub_batch": c.sub_batch})


def replay_indices(config: LoopConfig, train, index_log) -> object:
    """Retrain the learner from its initialisation on logged sub-batches, with no scorers."""
    task = make_task(config)
    view = train.view()
    learner = new_trainee(config, config.learner, _LEARNER_INIT)
    for sub in index_log:
        learner.update(task, view.x[sub], view.y[sub])
    return learner.params
