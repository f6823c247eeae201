"""Memory bank of scored candidates, softmax sampling, and samples-per-insert control."""

from __future__ import annotations

import enum
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import kernels


class BankError(RuntimeError):
    pass


class InsufficientEntries(BankError):
    pass


class Mode(str, enum.Enum):
    PER_SUPERBATCH = "per_superbatch"
    PERSISTENT_BANK = "persistent_bank"


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    mode: Mode = Mode.PER_SUPERBATCH
    spi_target: float = 0.5
    method: str = "sequential"

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.spi_target <= 1:
            raise ValueError(f"spi_target must be in (0, 1], got {self.spi_target}")
        if self.method not in ("sequential", "gumbel"):
            raise ValueError(f"unknown sampling method {self.method!r}")


@dataclass
class ScoredEntry:
    example_id: int
    score: float
    inserted_tick: int
    consumed: bool = False
    group: int = -1
    payload: int = -1


def softmax_weights(scores, temperature=1.0):
    s = np.asarray(scores, dtype=np.float64) / temperature
    return np.exp(s - s.max())


def softmax_probs(scores, temperature=1.0):
    w = softmax_weights(scores, temperature)
    return w / w.sum()


def sequential_sample(scores, k, rng, temperature=1.0):
    """Positions of ``k`` distinct draws, each from the softmax over what is left."""
    scores = np.asarray(scores, dtype=np.float64)
    if k > scores.size:
        raise InsufficientEntries(f"need {k} candidates, have {scores.size}")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    weights = np.ascontiguousarray(softmax_weights(scores, temperature))
    return kernels.sample_sequential(weights, k, np.ascontiguousarray(rng.random(k)))


def gumbel_topk(scores, k, rng, temperature=1.0):
    """Same law as :func:`sequential_sample`, via perturb-and-sort."""
    scores = np.asarray(scores, dtype=np.float64)
    if k > scores.size:
        raise InsufficientEntries(f"need {k} candidates, have {scores.size}")
    keys = scores / temperature + rng.gumbel(size=scores.size)
    return np.argsort(-keys, kind="stable")[:k].astype(np.int64)


class MemoryBank:
    """Scored candidates awaiting prioritized sampling.

    Every public method takes the bank lock, so scorer threads and the learner
    can share one instance. ``condition`` is notified after each mutation.
    """

    def __init__(self, capacity: int = 1 << 20, keep_audit: bool = True):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: OrderedDict[int, ScoredEntry] = OrderedDict()
        self._consumed_ids: set[int] = set()
        self.inserted_total = 0
        self.sampled_total = 0
        self.tick = 0
        self.keep_audit = keep_audit
        self.audit: list[int] = []
        self.lock = threading.RLock()
        self.condition = threading.Condition(self.lock)

    def __len__(self):
        with self.lock:
            return len(self._entries)

    def get(self, example_id) -> ScoredEntry:
        with self.lock:
            return self._entries[example_id]

    def entries(self) -> list:
        with self.lock:
            return list(self._entries.values())

    def unconsumed(self, group=None) -> int:
        with self.lock:
            return sum(1 for e in self._entries.values()
                       if not e.consumed and (group is None or e.group == group))

    def insert(self, ids, scores, group: int = -1, payloads=None):
        ids = [int(i) for i in ids]
        scores = np.asarray(scores, dtype=np.float64)
        if len(ids) != scores.size:
            raise ValueError(f"{len(ids)} ids for {scores.size} scores")
        if not np.all(np.isfinite(scores)):
            raise BankError("scores must be finite")
        if len(set(ids)) != len(ids):
            raise BankError("duplicate ids within one insert")
        payloads = ids if payloads is None else [int(p) for p in payloads]
        with self.lock:
            for i in ids:
                if i in self._entries:
                    raise BankError(f"id {i} is already live in the bank")
                if i in self._consumed_ids:
                    raise BankError(f"id {i} was already consumed")
            self.tick += 1
            for i, s, p in zip(ids, scores, payloads):
                self._entries[i] = ScoredEntry(i, float(s), self.tick, False, group, p)
            self.inserted_total += len(ids)
            self._evict()
            self.condition.notify_all()

    def _evict(self):
        excess = len(self._entries) - self.capacity
        if excess <= 0:
            return
        for key in [k for k, e in self._entries.items() if e.consumed][:excess]:
            del self._entries[key]
        excess = len(self._entries) - self.capacity
        for key in list(self._entries)[:max(excess, 0)]:
            del self._entries[key]

    def sample(self, k: int, rng: np.random.Generator, temperature: float = 1.0,
               group=None, method: str = "sequential") -> np.ndarray:
        """Draw ``k`` unconsumed ids without replacement, softmax-weighted by score."""
        with self.lock:
            live = [e for e in self._entries.values()
                    if not e.consumed and (group is None or e.group == group)]
            if len(live) < k:
                raise InsufficientEntries(f"need {k} unconsumed entries, have {len(live)}")
            scores = np.fromiter((e.score for e in live), dtype=np.float64, count=len(live))
            draw = gumbel_topk if method == "gumbel" else sequential_sample
            picks = draw(scores, k, rng, temperature)
            out = np.empty(k, dtype=np.int64)
            for j, pos in enumerate(picks):
                e = live[pos]
                e.consumed = True
                self._consumed_ids.add(e.example_id)
                out[j] = e.example_id
            self.sampled_total += k
            if self.keep_audit:
                self.audit.extend(int(i) for i in out)
            self.condition.notify_all()
            return out

    def payloads(self, ids) -> np.ndarray:
        with self.lock:
            return np.array([self._entries[int(i)].payload for i in ids], dtype=np.int64)

    def retire_group(self, group) -> int:
        """Drop every entry of ``group``; returns how many unconsumed ones were discarded."""
        with self.lock:
            keys = [k for k, e in self._entries.items() if e.group == group]
            dropped = sum(1 for k in keys if not self._entries[k].consumed)
            for k in keys:
                del self._entries[k]
            self.condition.notify_all()
            return dropped

    def stats(self) -> dict:
        with self.lock:
            return {"inserted_total": self.inserted_total, "sampled_total": self.sampled_total,
                    "live": len(self._entries),
                    "unconsumed": sum(1 for e in self._entries.values() if not e.consumed)}


def insert(bank: MemoryBank, ids, scores, group=-1, payloads=None) -> MemoryBank:
    bank.insert(ids, scores, group, payloads)
    return bank


def sample_prioritized(bank: MemoryBank, k: int, rng, temperature=1.0, group=None,
                       method="sequential"):
    return bank.sample(k, rng, temperature, group, method)


def audit_at_most_once(consumed_ids) -> bool:
    ids = list(consumed_ids)
    return len(ids) == len(set(ids))


# ------------------------------------------------------------ rate limiting

@dataclass(frozen=True)
class Decision:
    sample_ok: bool
    insert_ok: bool


class SpiController:
    """Keeps ``sampled / inserted`` at ``spi_target``.

    Sampling ``n`` items is allowed while ``sampled + n <= spi * inserted + tolerance``;
    inserting ``n`` items is allowed while the resulting sampling credit
    ``spi * (inserted + n) - sampled`` stays within ``max_lead`` (unbounded if None).
    """

    def __init__(self, spi_target: float, tolerance: float = 0.0, max_lead: float | None = None):
        if not 0 < spi_target <= 1:
            raise ValueError(f"spi_target must be in (0, 1], got {spi_target}")
        self.spi_target = spi_target
        self.tolerance = tolerance
        self.max_lead = max_lead

    def can_sample(self, n, inserted, sampled) -> bool:
        if self.spi_target >= 1.0:
            return True
        return sampled + n <= self.spi_target * inserted + self.tolerance + 1e-9

    def can_insert(self, n, inserted, sampled) -> bool:
        if self.max_lead is None:
            return True
        return self.spi_target * (inserted + n) - sampled <= self.max_lead + 1e-9


def admit(controller: SpiController, inserted_count, sampled_count, sample_size=1,
          insert_size=1) -> Decision:
    return Decision(controller.can_sample(sample_size, inserted_count, sampled_count),
                    controller.can_insert(insert_size, inserted_count, sampled_count))
