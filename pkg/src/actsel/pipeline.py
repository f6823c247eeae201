"""Actor/learner pipeline: scorer workers feed prioritized replay, a learner drains it.

Roles and the only shared state between them:

* scorer workers take super-batch tickets in order, score them with the latest
  published parameter snapshot and insert the scores into a lane's bank;
* the learner samples sub-batches from the banks (gated by the SPI controller),
  updates its models and publishes a new snapshot after every step;
* the evaluator lane receives parameter snapshots at eval steps and turns them
  into metrics records.

With ``synchronous=True`` the same steps run inline on one thread, in the order
the sequential loop uses, and the result is bit-identical to it.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass

import numpy as np

from . import nn
from .loop import (MetricsRecord, Pretrained, ReferenceSource, RunResult, SelectionRun,
                   sampler_rng)
from .replay import MemoryBank, Mode, SpiController

log = logging.getLogger(__name__)

_POLL = 0.05  # seconds between stop-flag checks while blocked


class PipelineError(RuntimeError):
    """A pipeline role failed; ``partial`` holds whatever metrics were flushed."""

    def __init__(self, message, partial: RunResult | None = None):
        super().__init__(message)
        self.partial = partial


class _Stopped(Exception):
    pass


@dataclass
class Topology:
    n_workers: int = 1
    capacity: int | None = None  # per lane; default 4 super-batches
    spi_target: float | None = None  # default b / B
    sync_interval: int = 1
    lanes: int = 1
    mode: str = Mode.PER_SUPERBATCH.value
    synchronous: bool = False
    max_lead: float | None = None  # persistent mode: sampling credit cap, default capacity / 2

    def __post_init__(self):
        self.mode = Mode(self.mode).value
        if self.n_workers < 1:
            raise ValueError(f"n_workers: need at least 1 worker, got {self.n_workers}")
        if self.sync_interval < 1:
            raise ValueError(f"sync_interval: must be >= 1, got {self.sync_interval}")
        if self.lanes < 1:
            raise ValueError(f"lanes: must be >= 1, got {self.lanes}")
        if self.capacity is not None and self.capacity <= 0:
            raise ValueError("capacity: must be positive")
        if self.spi_target is not None and not 0 < self.spi_target <= 1:
            raise ValueError(f"spi_target: must be in (0, 1], got {self.spi_target}")
        if self.synchronous and self.n_workers != 1:
            raise ValueError("synchronous: requires n_workers == 1")


class _Snapshot:
    """Atomically published ``(version, params-by-role)`` pair."""

    def __init__(self, params: dict):
        self._cv = threading.Condition()
        self._value = (0, params)

    def publish(self, version, params):
        with self._cv:
            self._value = (version, params)
            self._cv.notify_all()

    def get(self):
        with self._cv:
            return self._value

    def wait_version(self, at_least, stop: threading.Event):
        with self._cv:
            while self._value[0] < at_least:
                if stop.is_set():
                    raise _Stopped
                self._cv.wait(_POLL)
            return self._value


class _AsyncRun(SelectionRun):
    """Sequential run state whose eval records are computed on the evaluator lane."""

    def __init__(self, *args, evaluator=None, **kw):
        super().__init__(*args, **kw)
        self.evaluator = evaluator

    def record(self, step):
        if self.evaluator is None:
            return super().record(step)
        loss = float(np.mean(self._losses)) if self._losses else float("nan")
        noise = float(np.mean(self._noise)) if self._noise else float("nan")
        self._losses, self._noise = [], []
        self.evaluator.put((step, self.learner.params, loss, noise, int(self.ledger.learner),
                            int(self.ledger.actor), int(self.ledger.ref)))


class Pipeline:
    def __init__(self, config, train, holdout, reference: Pretrained | None = None,
                 topology: Topology | None = None, sink=None, fault=None, online_init=None,
                 keep_index_log=False):
        self.topology = top = topology or Topology()
        c = config
        self.sink = sink
        self.fault = fault
        self.persistent = top.mode == Mode.PERSISTENT_BANK.value
        self.online_reference = c.reference_source == ReferenceSource.ONLINE.value
        if self.persistent and self.online_reference:
            raise nn.ConfigurationError(
                "mode: persistent_bank needs a fixed reference (online reference trains per super-batch)")
        spi = top.spi_target if top.spi_target is not None else c.sub_batch / c.super_batch
        if not self.persistent and abs(spi * c.super_batch - c.sub_batch) > 1e-9:
            raise nn.ConfigurationError(
                f"spi_target: per_superbatch mode fixes spi = b/B = {c.sub_batch / c.super_batch:g}, got {spi:g}")
        capacity = top.capacity or 4 * c.super_batch
        if capacity < c.super_batch:
            raise nn.ConfigurationError(f"capacity: {capacity} is smaller than one super-batch")
        lead = top.max_lead if top.max_lead is not None else max(capacity * spi / 2, c.sub_batch)
        self.controller = SpiController(spi, tolerance=0.0,
                                        max_lead=lead if self.persistent else None)
        self.banks = [MemoryBank(capacity) for _ in range(top.lanes)]
        # per-superbatch lanes hold whole groups; never run further ahead than fits
        self._window = top.lanes * (capacity // c.super_batch)
        self.stop = threading.Event()
        self.errors: list[BaseException] = []
        self._eval_queue = None if top.synchronous else queue.Queue()
        self.run = _AsyncRun(config, train, holdout, reference, online_init, keep_index_log,
                             evaluator=self._eval_queue)
        self.run.bank = None  # lanes own the replay state
        self.snapshot = _Snapshot(self.run.snapshot())
        self._tickets = iter(range(c.steps))
        self._ticket_lock = threading.Lock()
        self._count_lock = threading.Lock()
        self._inserted = 0
        self._sampled = 0
        self._flushed = 0

    # -- shared pieces -------------------------------------------------

    def lane(self, t) -> MemoryBank:
        return self.banks[t % len(self.banks)]

    def counts(self):
        with self._count_lock:
            return self._inserted, self._sampled

    def produce(self, t, snap):
        """Draw and score super-batch ``t``; insert it into its lane."""
        if self.fault is not None:
            self.fault(t)
        idx = self.run.draw(t)
        scores = self.run.score(idx, snap)
        B = self.run.config.super_batch
        bank = self.lane(t)
        with bank.condition:
            if self.persistent:
                while not self.controller.can_insert(B, *self.counts()):
                    if self.stop.is_set():
                        raise _Stopped
                    bank.condition.wait(_POLL)
            bank.insert(np.arange(B, dtype=np.int64) + t * B, scores, group=t, payloads=idx)
            with self._count_lock:
                self._inserted += B
        self._notify_all()

    def _notify_all(self):
        for bank in self.banks:
            with bank.condition:
                bank.condition.notify_all()

    def _ready(self, t):
        """The bank to sample step ``t`` from, or None while it must wait."""
        c = self.run.config
        inserted, sampled = self.counts()
        if not self.controller.can_sample(c.sub_batch, inserted, sampled):
            return None
        if not self.persistent:
            bank = self.lane(t)
            return bank if bank.unconsumed(group=t) == c.super_batch else None
        # credit may come from any lane; start at this step's lane
        n = len(self.banks)
        for k in range(n):
            bank = self.banks[(t + k) % n]
            if bank.unconsumed() >= c.sub_batch:
                return bank
        return None

    def consume(self, t):
        """Sample sub-batch ``t`` from replay and take one learner step."""
        c = self.run.config
        home = self.lane(t)
        while True:
            with home.condition:
                while (bank := self._ready(t)) is None:
                    if self.stop.is_set():
                        raise _Stopped
                    home.condition.wait(_POLL)
            bank.lock.acquire()
            if self._ready(t) is bank:  # nothing evicted in between
                break
            bank.lock.release()
        try:
            rng = sampler_rng(c.seed, t)
            if self.persistent:
                picked = np.sort(bank.sample(c.sub_batch, rng, c.sampler_temperature,
                                             method=c.sampling_method))
                sub = bank.payloads(picked)
            else:
                payload = bank.payloads(np.arange(c.super_batch, dtype=np.int64) + t * c.super_batch)
                picked = bank.sample(c.sub_batch, rng, c.sampler_temperature, group=t,
                                     method=c.sampling_method)
                bank.retire_group(t)
                sub = payload[np.sort(picked - t * c.super_batch)]
            with self._count_lock:
                self._sampled += c.sub_batch
        finally:
            bank.lock.release()
        self._notify_all()
        if not self.persistent:
            self.run.update_reference(payload)
        self.run.learn(t, sub)
        self.snapshot.publish(t + 1, self.run.snapshot())

    # -- roles ---------------------------------------------------------

    def _fail(self, err):
        if not isinstance(err, _Stopped):
            self.errors.append(err)
        self.stop.set()
        self._notify_all()

    def _worker(self, wid):
        try:
            while not self.stop.is_set():
                with self._ticket_lock:
                    t = next(self._tickets, None)
                if t is None:
                    return
                need = t - self.topology.sync_interval
                if not self.persistent:
                    need = max(need, t - self._window + 1)
                _, snap = self.snapshot.wait_version(need, self.stop)
                self.produce(t, snap)
        except BaseException as err:  # noqa: BLE001 - any worker failure stops the pipeline
            log.error("scorer worker %d failed: %r", wid, err)
            self._fail(err)

    def _learner(self):
        try:
            self.run.record(0)
            for t in range(self.run.config.steps):
                if self.stop.is_set():
                    raise _Stopped
                self.consume(t)
        except BaseException as err:  # noqa: BLE001
            if not isinstance(err, _Stopped):
                log.error("learner failed: %r", err)
            self._fail(err)
        finally:
            self._eval_queue.put(None)

    def _evaluator(self):
        run = self.run
        while True:
            item = self._eval_queue.get()
            if item is None:
                return
            step, params, loss, noise, fl, fa, fr = item
            try:
                value = (run.task.evaluate(params, run.holdout) if run.holdout is not None
                         else float("nan"))
            except BaseException as err:  # noqa: BLE001
                self._fail(err)
                value = float("nan")
            run.records.append(MetricsRecord(step, run.task.metric, value, loss, noise, fl, fa, fr))
            self._flush()

    def _flush(self):
        if self.sink is None:
            return
        while self._flushed < len(self.run.records):
            self.sink.write(self.run.records[self._flushed])
            self._flushed += 1

    # -- driver --------------------------------------------------------

    def _run_sync(self):
        run = self.run
        run.record(0)
        self._flush()
        for t in range(run.config.steps):
            self.produce(t, run.snapshot())
            self.consume(t)
            self._flush()

    def _run_threads(self):
        threads = [threading.Thread(target=self._worker, args=(i,), name=f"scorer-{i}", daemon=True)
                   for i in range(self.topology.n_workers)]
        threads.append(threading.Thread(target=self._learner, name="learner", daemon=True))
        evaluator = threading.Thread(target=self._evaluator, name="evaluator", daemon=True)
        for th in threads + [evaluator]:
            th.start()
        for th in threads:
            th.join()
        evaluator.join()

    def execute(self) -> RunResult:
        try:
            if self.topology.synchronous:
                self._run_sync()
            else:
                self._run_threads()
        except BaseException as err:  # noqa: BLE001
            self._fail(err)
        self._flush()
        result = self.run.result()
        result.meta.update(self.stats())
        if self.errors:
            raise PipelineError(f"pipeline stopped: {self.errors[0]!r}", result) from self.errors[0]
        return result

    def stats(self) -> dict:
        inserted, sampled = self.counts()
        audit = [i for bank in self.banks for i in bank.audit]
        return {"inserted_total": inserted, "sampled_total": sampled,
                "spi": sampled / inserted if inserted else float("nan"),
                "at_most_once": len(audit) == len(set(audit)), "consumed": len(audit),
                "workers": self.topology.n_workers, "lanes": self.topology.lanes,
                "mode": self.topology.mode}


def run_async(config, train, holdout, reference: Pretrained | None = None,
              topology: Topology | None = None, sink=None, fault=None, online_init=None,
              keep_index_log=False) -> RunResult:
    """Run the selection loop as a scorer/learner/evaluator pipeline.

    ``fault(ticket)`` is called by a scorer before each super-batch; raising from
    it simulates a worker crash. Any role failure stops every role, flushes the
    records produced so far to ``sink`` and raises :class:`PipelineError`.
    """
    return Pipeline(config, train, holdout, reference, topology, sink, fault, online_init,
                    keep_index_log).execute()
