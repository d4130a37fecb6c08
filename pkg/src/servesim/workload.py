"""Request/Job/Task domain model plus trace generation and JSONL ingestion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from ._kernels import TOKEN_DTYPE, as_tokens


class InvalidSpec(Exception):
    """The workload specification fails validation."""


class ParseError(Exception):
    """A trace file line failed to parse."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Request:
    """One traced inference request.

    ``true_decode_len`` is ground truth used by the simulated engine and the
    noisy length predictor; scheduling policies never read it directly.
    """

    id: str
    arrival_us: int
    prompt_tokens: np.ndarray
    true_decode_len: int
    context_id: Optional[str] = None
    priority: int = 0

    def __post_init__(self):
        self.prompt_tokens = as_tokens(self.prompt_tokens)
        if self.prompt_tokens.size == 0:
            raise InvalidSpec(f"request {self.id}: empty prompt")
        if self.true_decode_len < 1:
            raise InvalidSpec(f"request {self.id}: decode length must be >= 1")
        if self.arrival_us < 0:
            raise InvalidSpec(f"request {self.id}: negative arrival")

    @property
    def prompt_len(self) -> int:
        return int(self.prompt_tokens.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Request):
            return NotImplemented
        return (
            self.id == other.id
            and self.arrival_us == other.arrival_us
            and self.true_decode_len == other.true_decode_len
            and self.context_id == other.context_id
            and self.priority == other.priority
            and np.array_equal(self.prompt_tokens, other.prompt_tokens)
        )


class JobKind(Enum):
    CHAT_SERVING = "chat_serving"


class TaskKind(Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    COLOCATED = "colocated"


class TaskState(Enum):
    QUEUED = "queued"
    READY = "ready"
    RUNNING = "running"
    DONE = "done"


@dataclass
class Task:
    task_kind: TaskKind
    assigned_te: str
    state: TaskState = TaskState.QUEUED


@dataclass
class Job:
    request_id: str
    job_kind: JobKind = JobKind.CHAT_SERVING
    tasks: List[Task] = field(default_factory=list)


@dataclass
class LengthDist:
    """Token-length distribution: constant, uniform, or lognormal."""

    kind: str = "constant"  # constant | uniform | lognormal
    value: int = 2048
    low: int = 1
    high: int = 4096
    mean: float = 7.0  # lognormal parameters are of log-space
    sigma: float = 0.5

    def validate(self, what: str) -> None:
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise InvalidSpec(f"{what}: unknown distribution kind {self.kind!r}")
        if self.kind == "constant" and self.value < 1:
            raise InvalidSpec(f"{what}: constant length must be >= 1")
        if self.kind == "uniform" and not (1 <= self.low <= self.high):
            raise InvalidSpec(f"{what}: need 1 <= low <= high")
        if self.kind == "lognormal" and self.sigma < 0:
            raise InvalidSpec(f"{what}: sigma must be >= 0")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, self.value, dtype=np.int64)
        if self.kind == "uniform":
            return rng.integers(self.low, self.high + 1, size=n, dtype=np.int64)
        vals = np.rint(rng.lognormal(self.mean, self.sigma, size=n)).astype(np.int64)
        return np.maximum(vals, 1)


@dataclass
class DecodeDist:
    """Decode-length model: constant, a uniform band of decode/prompt ratios,
    or lognormal (a stand-in where real output-length traces are unavailable)."""

    kind: str = "constant"  # constant | ratio_uniform | lognormal
    value: int = 205
    ratio_low: float = 0.05
    ratio_high: float = 0.2
    mean: float = 5.0
    sigma: float = 0.5

    def validate(self) -> None:
        if self.kind not in ("constant", "ratio_uniform", "lognormal"):
            raise InvalidSpec(f"decode_len: unknown distribution kind {self.kind!r}")
        if self.kind == "constant" and self.value < 1:
            raise InvalidSpec("decode_len: constant length must be >= 1")
        if self.kind == "ratio_uniform" and not (0 < self.ratio_low <= self.ratio_high):
            raise InvalidSpec("decode_len: need 0 < ratio_low <= ratio_high")
        if self.kind == "lognormal" and self.sigma < 0:
            raise InvalidSpec("decode_len: sigma must be >= 0")

    def sample(self, rng: np.random.Generator, prompt_lens: np.ndarray) -> np.ndarray:
        n = prompt_lens.size
        if self.kind == "constant":
            return np.full(n, self.value, dtype=np.int64)
        if self.kind == "ratio_uniform":
            ratios = rng.uniform(self.ratio_low, self.ratio_high, size=n)
            return np.maximum(np.rint(ratios * prompt_lens).astype(np.int64), 1)
        vals = np.rint(rng.lognormal(self.mean, self.sigma, size=n)).astype(np.int64)
        return np.maximum(vals, 1)


@dataclass
class PrefixGroup:
    name: str
    prefix_len: int
    share: float


@dataclass
class WorkloadSpec:
    rate_rps: float = 1.0
    arrival: str = "poisson"  # poisson | uniform
    num_requests: int = 100
    prompt_len: LengthDist = field(default_factory=LengthDist)
    decode_len: DecodeDist = field(default_factory=DecodeDist)
    prefix_groups: List[PrefixGroup] = field(default_factory=list)
    vocab: int = 32000
    seed: int = 0
    priority: int = 0

    def validate(self) -> None:
        if self.rate_rps <= 0:
            raise InvalidSpec("rate_rps must be positive")
        if self.arrival not in ("poisson", "uniform"):
            raise InvalidSpec(f"unknown arrival process {self.arrival!r}")
        if self.num_requests < 0:
            raise InvalidSpec("num_requests must be >= 0")
        if self.vocab < 2:
            raise InvalidSpec("vocab must be >= 2")
        self.prompt_len.validate("prompt_len")
        self.decode_len.validate()
        total_share = 0.0
        for g in self.prefix_groups:
            if g.prefix_len < 1:
                raise InvalidSpec(f"group {g.name}: prefix_len must be >= 1")
            if g.share <= 0:
                raise InvalidSpec(f"group {g.name}: share must be positive")
            total_share += g.share
        if total_share > 1.0 + 1e-9:
            raise InvalidSpec("prefix group shares must sum to <= 1")


def generate_trace(spec: WorkloadSpec) -> List[Request]:
    """Deterministically expand a workload spec into a sorted request list."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.num_requests
    if n == 0:
        return []

    if spec.arrival == "poisson":
        gaps = rng.exponential(1.0 / spec.rate_rps, size=n)
    else:
        gaps = np.full(n, 1.0 / spec.rate_rps)
    arrivals = np.rint(np.cumsum(gaps) * 1e6).astype(np.int64)

    prompt_lens = spec.prompt_len.sample(rng, n)
    decode_lens = spec.decode_len.sample(rng, prompt_lens)

    # Group prefixes are drawn once, then shared verbatim by members.
    prefixes: Dict[str, np.ndarray] = {
        g.name: rng.integers(0, spec.vocab, size=g.prefix_len, dtype=TOKEN_DTYPE)
        for g in spec.prefix_groups
    }
    shares = np.array([g.share for g in spec.prefix_groups], dtype=float)
    slack = max(0.0, 1.0 - float(shares.sum()))
    choices = list(range(len(spec.prefix_groups))) + [-1]
    probs = np.append(shares, slack)
    probs = probs / probs.sum()
    assignment = rng.choice(len(choices), size=n, p=probs)

    reqs: List[Request] = []
    for i in range(n):
        plen = int(prompt_lens[i])
        gidx = choices[assignment[i]]
        if gidx >= 0:
            g = spec.prefix_groups[gidx]
            head = prefixes[g.name][: min(plen, g.prefix_len)]
            tail_len = plen - head.size
            tail = rng.integers(0, spec.vocab, size=tail_len, dtype=TOKEN_DTYPE)
            prompt = np.concatenate([head, tail])
        else:
            prompt = rng.integers(0, spec.vocab, size=plen, dtype=TOKEN_DTYPE)
        reqs.append(
            Request(
                id=f"r{i:06d}",
                arrival_us=int(arrivals[i]),
                prompt_tokens=prompt,
                true_decode_len=int(decode_lens[i]),
                priority=spec.priority,
            )
        )
    return reqs


def save_trace(reqs: Sequence[Request], path, groups: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Write one JSON object per line; with ``groups``, prompts that start
    with a known group prefix are stored as {group, prefix_len, suffix}."""
    with open(path, "w") as f:
        if groups:
            meta = {"groups": {k: [int(t) for t in v] for k, v in groups.items()}}
            f.write(json.dumps(meta, sort_keys=True) + "\n")
        for r in reqs:
            obj = {
                "id": r.id,
                "arrival_us": r.arrival_us,
                "decode_len": r.true_decode_len,
            }
            stored = False
            if groups:
                for name, prefix in groups.items():
                    k = min(len(prefix), r.prompt_len)
                    if k > 0 and np.array_equal(r.prompt_tokens[:k], prefix[:k]):
                        obj["prompt"] = {
                            "group": name,
                            "prefix_len": k,
                            "suffix": [int(t) for t in r.prompt_tokens[k:]],
                        }
                        stored = True
                        break
            if not stored:
                obj["prompt"] = [int(t) for t in r.prompt_tokens]
            if r.context_id is not None:
                obj["context_id"] = r.context_id
            if r.priority:
                obj["priority"] = r.priority
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def load_trace(path) -> List[Request]:
    reqs: List[Request] = []
    groups: Dict[str, np.ndarray] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(lineno, f"invalid JSON: {e.msg}") from e
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected a JSON object")
            if "groups" in obj and "id" not in obj:
                try:
                    groups = {k: as_tokens(v) for k, v in obj["groups"].items()}
                except (TypeError, ValueError) as e:
                    raise ParseError(lineno, f"bad groups header: {e}") from e
                continue
            try:
                prompt = obj["prompt"]
                if isinstance(prompt, dict):
                    g = groups[prompt["group"]]
                    k = int(prompt["prefix_len"])
                    tokens = np.concatenate([g[:k], as_tokens(prompt["suffix"])]) if prompt["suffix"] else g[:k].copy()
                else:
                    tokens = as_tokens(prompt)
                req = Request(
                    id=str(obj["id"]),
                    arrival_us=int(obj["arrival_us"]),
                    prompt_tokens=tokens,
                    true_decode_len=int(obj["decode_len"]),
                    context_id=obj.get("context_id"),
                    priority=int(obj.get("priority", 0)),
                )
            except ParseError:
                raise
            except (KeyError, TypeError, ValueError, InvalidSpec) as e:
                raise ParseError(lineno, f"bad record: {e}") from e
            reqs.append(req)
    return reqs
