"""KV-cache block manager: tiered block pools under a hybrid index that
combines a radix tree over token sequences with an explicit ID map.

Blocks live on exactly one tier (npu or dram).  Committed sequences are
indexed at whole-block granularity; a cache line is one block-worth of
tokens on a tree path and may have placements on both tiers (a dram copy
plus an npu copy).  Matching walks the tree and is truncated to whole
blocks; reuse granularity is the block.

Eviction is LRU over unreferenced tree leaves.  Lines pinned by an explicit
context ID are only released by an explicit ``free``.  The manager is
policy-free: deciding whether fetching off-npu cache beats recomputing it
belongs to the engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._kernels import as_tokens, common_prefix_len

NPU = "npu"
DRAM = "dram"
TIERS = (NPU, DRAM)


class CacheError(Exception):
    pass


class OutOfMemory(CacheError):
    pass


class InsufficientNpuMemory(CacheError):
    pass


class UnknownBlock(CacheError):
    pass


class DoubleFree(CacheError):
    pass


class BlockInUse(CacheError):
    pass


class UnknownTicket(CacheError):
    pass


class InvalidCoverage(CacheError):
    pass


class InvalidState(CacheError):
    pass


@dataclass
class RtcConfig:
    block_size: int = 16
    npu_blocks: int = 4096
    dram_blocks: int = 16384
    kv_bytes_per_token: int = 160 * 1024
    # Static host-bus model used when populate is not routed through a
    # transfer network: bandwidth plus a fixed per-transfer setup cost.
    pcie_bandwidth_bps: float = float(32 * 2**30)
    pcie_latency_us: int = 10

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.npu_blocks < 1 or self.dram_blocks < 0:
            raise ValueError("block capacities must be positive")

    @property
    def block_bytes(self) -> int:
        return self.block_size * self.kv_bytes_per_token


@dataclass
class Block:
    block_id: int
    tier: str
    ref_count: int = 0
    last_use: int = 0
    seq_id: Optional[str] = None
    line: Optional["CacheLine"] = None


class CacheLine:
    """One block-worth of committed tokens with per-tier placements."""

    __slots__ = ("placements", "pin_count", "inflight", "entries")

    def __init__(self):
        self.placements: Dict[str, int] = {}
        self.pin_count = 0
        self.inflight = 0
        self.entries: List[Tuple["Entry", int]] = []

    @property
    def dead(self) -> bool:
        return not self.placements

    def best(self) -> Tuple[int, str]:
        if NPU in self.placements:
            return self.placements[NPU], NPU
        tier = next(iter(self.placements))
        return self.placements[tier], tier


class Node:
    __slots__ = ("edge", "lines", "children", "parent", "last_use", "node_id")

    _counter = 0

    def __init__(self, edge: np.ndarray, parent: Optional["Node"]):
        self.edge = edge
        self.lines: List[CacheLine] = []
        self.children: Dict[tuple, "Node"] = {}
        self.parent = parent
        self.last_use = 0
        self.node_id = Node._counter
        Node._counter += 1


@dataclass
class Entry:
    """A committed sequence; the registry mirror behind the tree index."""

    tokens: np.ndarray
    lines: List[CacheLine]
    alive_len: int
    context_ids: set = field(default_factory=set)


@dataclass
class MatchResult:
    matched_token_count: int
    blocks: List[Tuple[int, str]]
    fully_on_npu: bool
    lines: List[CacheLine] = field(default_factory=list, repr=False)

    def npu_block_ids(self) -> List[int]:
        return [line.placements[NPU] for line in self.lines if NPU in line.placements]


@dataclass
class PopulateTicket:
    ticket_id: int
    status: str = "pending"  # pending | done | failed
    completes_at: Optional[int] = None


class CacheListener:
    """Receives index changes; used to mirror local trees into a global one."""

    def on_commit(self, owner: str, tokens: np.ndarray) -> None:  # pragma: no cover
        pass

    def on_update(self, owner: str, tokens: np.ndarray, old_len: int, new_len: int) -> None:  # pragma: no cover
        pass


class KvCache:
    """Block pools plus the hybrid prefix/ID index for one engine."""

    def __init__(
        self,
        config: RtcConfig,
        clock: Optional[Callable[[], int]] = None,
        owner_id: str = "te0",
        listener: Optional[CacheListener] = None,
    ):
        self.config = config
        self.clock = clock or (lambda: 0)
        self.owner_id = owner_id
        self.listener = listener
        self._capacity = {NPU: config.npu_blocks, DRAM: config.dram_blocks}
        self._alive_count = {NPU: 0, DRAM: 0}
        self._blocks: Dict[int, Block] = {}
        self._next_block = 0
        self._root = Node(np.empty(0, dtype=np.int64), None)
        self._entries: Dict[bytes, Entry] = {}
        self._id_map: Dict[str, Entry] = {}
        self._tickets: Dict[int, dict] = {}
        self._next_ticket = 0

    # ------------------------------------------------------------------
    # block pool
    # ------------------------------------------------------------------

    def free_blocks(self, tier: str = NPU) -> int:
        return self._capacity[tier] - self._alive_count[tier]

    def _new_block(self, tier: str, ref: int, seq_id: Optional[str] = None) -> Block:
        blk = Block(self._next_block, tier, ref_count=ref, last_use=self.clock(), seq_id=seq_id)
        self._next_block += 1
        self._blocks[blk.block_id] = blk
        self._alive_count[tier] += 1
        return blk

    def _destroy_block(self, blk: Block) -> None:
        del self._blocks[blk.block_id]
        self._alive_count[blk.tier] -= 1
        blk.line = None

    def _get_alive(self, block_id: int) -> Block:
        blk = self._blocks.get(block_id)
        if blk is None:
            if 0 <= block_id < self._next_block:
                raise DoubleFree(f"block {block_id} was already freed")
            raise UnknownBlock(f"block {block_id} does not exist")
        return blk

    def alloc_blocks(self, n: int, seq_id: Optional[str] = None, tier: str = NPU) -> List[int]:
        if n < 1:
            raise ValueError("must allocate at least one block")
        self._ensure_free(tier, n)
        return [self._new_block(tier, ref=1, seq_id=seq_id).block_id for _ in range(n)]

    def append_block(self, seq_id: str) -> int:
        return self.alloc_blocks(1, seq_id=seq_id)[0]

    def acquire(self, block_ids: Sequence[int]) -> None:
        for bid in block_ids:
            self._get_alive(bid).ref_count += 1

    def release(self, block_ids: Sequence[int]) -> None:
        """Drop a lease.  Unreferenced blocks stay cached while indexed and
        return to the free pool otherwise."""
        for bid in block_ids:
            blk = self._get_alive(bid)
            if blk.ref_count <= 0:
                raise InvalidState(f"block {bid} released more times than acquired")
            blk.ref_count -= 1
            if blk.ref_count == 0 and blk.line is None:
                self._destroy_block(blk)

    def free(self, block_ids: Sequence[int]) -> None:
        for bid in block_ids:
            blk = self._get_alive(bid)
            if blk.ref_count > 0:
                raise BlockInUse(f"block {bid} still has {blk.ref_count} leases")
            line = blk.line
            self._destroy_block(blk)
            if line is not None:
                for tier, owned in list(line.placements.items()):
                    if owned == bid:
                        del line.placements[tier]
                if line.dead:
                    self._kill_line(line)

    def copy(self, block_ids: Sequence[int], dst_tier: str) -> None:
        """Duplicate indexed blocks onto ``dst_tier``; sources remain."""
        if dst_tier not in TIERS:
            raise ValueError(f"unknown tier {dst_tier!r}")
        todo = []
        for bid in block_ids:
            blk = self._get_alive(bid)
            if blk.line is None:
                raise InvalidState(f"block {bid} is not indexed; only cached blocks can be copied")
            if dst_tier not in blk.line.placements:
                todo.append(blk.line)
        if not todo:
            return
        for line in todo:
            line.inflight += 1
        try:
            self._ensure_free(dst_tier, len(todo))
        finally:
            for line in todo:
                line.inflight -= 1
        for line in todo:
            twin = self._new_block(dst_tier, ref=0)
            twin.line = line
            line.placements[dst_tier] = twin.block_id

    # ------------------------------------------------------------------
    # eviction
    # ------------------------------------------------------------------

    def _leaves(self) -> List[Node]:
        out = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            kids = list(node.children.values())
            if not kids and node is not self._root:
                out.append(node)
            stack.extend(kids)
        return out

    def _evictable_leaves(self, tier: str) -> List[Node]:
        result = []
        for leaf in self._leaves():
            has_tier = False
            blocked = False
            for line in leaf.lines:
                bid = line.placements.get(tier)
                if bid is None:
                    continue
                has_tier = True
                if self._blocks[bid].ref_count > 0 or line.pin_count > 0 or line.inflight > 0:
                    blocked = True
                    break
            if has_tier and not blocked:
                result.append(leaf)
        return result

    def evictable_count(self, tier: str = NPU) -> int:
        seen = set()
        total = 0
        for leaf in self._evictable_leaves(tier):
            for line in leaf.lines:
                bid = line.placements.get(tier)
                if bid is not None and bid not in seen:
                    seen.add(bid)
                    total += 1
        return total

    def _ensure_free(self, tier: str, n: int) -> None:
        if self.free_blocks(tier) >= n:
            return
        # Refuse up front when even full eviction cannot make room; this
        # keeps the failure side-effect free.
        if self.free_blocks(tier) + self.evictable_count(tier) < n:
            raise OutOfMemory(f"need {n} {tier} blocks, cannot satisfy even with eviction")
        while self.free_blocks(tier) < n:
            victims = self._evictable_leaves(tier)
            if not victims:
                raise OutOfMemory(f"need {n} {tier} blocks, cannot satisfy even with eviction")
            victim = min(victims, key=lambda nd: (nd.last_use, nd.node_id))
            self._evict_leaf(victim, tier)

    def _evict_leaf(self, node: Node, tier: str) -> None:
        for line in node.lines:
            bid = line.placements.pop(tier, None)
            if bid is not None:
                self._destroy_block(self._blocks[bid])
            if line.dead:
                self._kill_line(line)
        if all(line.dead for line in node.lines):
            self._detach(node)

    def _detach(self, node: Node) -> None:
        parent = node.parent
        if parent is None:
            return
        key = tuple(int(t) for t in node.edge[: self.config.block_size])
        if parent.children.get(key) is node:
            del parent.children[key]
        node.parent = None

    def _kill_line(self, line: CacheLine) -> None:
        bs = self.config.block_size
        for entry, idx in line.entries:
            new_len = idx * bs
            if new_len < entry.alive_len:
                old = entry.alive_len
                entry.alive_len = new_len
                if self.listener is not None:
                    self.listener.on_update(self.owner_id, entry.tokens, old, new_len)
                if new_len == 0:
                    self._entries.pop(entry.tokens.tobytes(), None)
                    for cid in list(entry.context_ids):
                        if self._id_map.get(cid) is entry:
                            del self._id_map[cid]
                    entry.context_ids.clear()

    # ------------------------------------------------------------------
    # index: commit and match
    # ------------------------------------------------------------------

    def _key_at(self, tokens: np.ndarray, pos: int) -> tuple:
        bs = self.config.block_size
        return tuple(int(t) for t in tokens[pos : pos + bs])

    def _split(self, node: Node, at_tokens: int) -> None:
        bs = self.config.block_size
        child = Node(node.edge[at_tokens:].copy(), node)
        child.lines = node.lines[at_tokens // bs :]
        child.children = node.children
        for kid in child.children.values():
            kid.parent = child
        child.last_use = node.last_use
        node.edge = node.edge[:at_tokens].copy()
        node.lines = node.lines[: at_tokens // bs]
        node.children = {self._key_at(child.edge, 0): child}

    def commit_prefix(
        self,
        tokens,
        block_ids: Sequence[int],
        context_id: Optional[str] = None,
    ) -> None:
        """Index ``tokens`` (whole blocks only) covered in order by
        ``block_ids``.  Positions already indexed keep their existing
        blocks; the caller retains ownership of the duplicates it passed."""
        tokens = as_tokens(tokens)
        bs = self.config.block_size
        if tokens.size == 0:
            raise InvalidCoverage("cannot commit an empty sequence")
        if len(block_ids) != math.ceil(tokens.size / bs):
            raise InvalidCoverage(
                f"{tokens.size} tokens need {math.ceil(tokens.size / bs)} blocks, got {len(block_ids)}"
            )
        provided = [self._get_alive(bid) for bid in block_ids]
        n_idx = (tokens.size // bs) * bs
        if n_idx == 0:
            return  # nothing representable at block granularity
        now = self.clock()

        lines_out: List[CacheLine] = []
        node = self._root
        pos = 0
        while pos < n_idx:
            remaining = tokens[pos:n_idx]
            key = self._key_at(tokens, pos)
            child = node.children.get(key)
            if child is None:
                child = Node(remaining.copy(), node)
                for i in range(remaining.size // bs):
                    line = CacheLine()
                    self._adopt(line, provided[(pos // bs) + i])
                    child.lines.append(line)
                node.children[key] = child
                child.last_use = now
                lines_out.extend(child.lines)
                pos = n_idx
                break
            k = int(common_prefix_len(remaining, child.edge))
            wk = (k // bs) * bs
            if wk < child.edge.size:
                self._split(child, wk)
            for i in range(wk // bs):
                line = child.lines[i]
                if line.dead:
                    self._adopt(line, provided[(pos // bs) + i])
                lines_out.append(line)
            child.last_use = now
            pos += wk
            node = child

        entry_key = tokens[:n_idx].tobytes()
        entry = self._entries.get(entry_key)
        if entry is None:
            entry = Entry(tokens=tokens[:n_idx].copy(), lines=lines_out, alive_len=n_idx)
            self._entries[entry_key] = entry
            for i, line in enumerate(lines_out):
                line.entries.append((entry, i))
            if self.listener is not None:
                self.listener.on_commit(self.owner_id, entry.tokens)
        else:
            old = entry.alive_len
            entry.lines = lines_out
            entry.alive_len = n_idx
            for i, line in enumerate(lines_out):
                if (entry, i) not in line.entries:
                    line.entries.append((entry, i))
            if old < n_idx and self.listener is not None:
                self.listener.on_update(self.owner_id, entry.tokens, old, n_idx)
        if context_id is not None:
            previous = self._id_map.get(context_id)
            if previous is not None and previous is not entry:
                self._unpin(previous, context_id)
            if context_id not in entry.context_ids:
                entry.context_ids.add(context_id)
                for line in entry.lines:
                    line.pin_count += 1
            self._id_map[context_id] = entry

    def _adopt(self, line: CacheLine, blk: Block) -> None:
        if blk.line is not None and blk.line is not line:
            raise InvalidState(f"block {blk.block_id} is already indexed elsewhere")
        line.placements[blk.tier] = blk.block_id
        blk.line = line

    def _unpin(self, entry: Entry, context_id: str) -> None:
        if context_id in entry.context_ids:
            entry.context_ids.discard(context_id)
            for line in entry.lines:
                line.pin_count = max(0, line.pin_count - 1)

    def _touch(self, lines: List[CacheLine]) -> None:
        now = self.clock()
        for line in lines:
            for bid in line.placements.values():
                self._blocks[bid].last_use = now

    def _result_from(self, lines: List[CacheLine]) -> MatchResult:
        bs = self.config.block_size
        blocks = [line.best() for line in lines]
        return MatchResult(
            matched_token_count=len(lines) * bs,
            blocks=blocks,
            fully_on_npu=all(tier == NPU for _, tier in blocks) if blocks else False,
            lines=list(lines),
        )

    def match_by_prefix_tokens(self, tokens) -> MatchResult:
        tokens = as_tokens(tokens)
        if tokens.size == 0:
            raise ValueError("cannot match an empty token sequence")
        bs = self.config.block_size
        now = self.clock()
        node = self._root
        pos = 0
        collected: List[CacheLine] = []
        while tokens.size - pos >= bs:
            child = node.children.get(self._key_at(tokens, pos))
            if child is None:
                break
            k = int(common_prefix_len(tokens[pos:], child.edge))
            whole = k // bs
            take = 0
            for i in range(whole):
                if child.lines[i].dead:
                    break
                take += 1
            if take:
                child.last_use = now
                collected.extend(child.lines[:take])
            if take < len(child.lines) or k < child.edge.size:
                break
            pos += child.edge.size
            node = child
        self._touch(collected)
        return self._result_from(collected)

    def match_by_id(self, context_id: Optional[str]) -> MatchResult:
        entry = self._id_map.get(context_id) if context_id is not None else None
        if entry is None or entry.alive_len == 0:
            return MatchResult(0, [], False, [])
        bs = self.config.block_size
        lines = entry.lines[: entry.alive_len // bs]
        self._touch(lines)
        return self._result_from(lines)

    # ------------------------------------------------------------------
    # populate
    # ------------------------------------------------------------------

    def populate(
        self,
        result: MatchResult,
        schedule_transfer: Optional[Callable[[int, Callable[[], None]], Optional[int]]] = None,
    ) -> PopulateTicket:
        """Bring every matched line onto the npu tier.

        ``schedule_transfer(nbytes, done_cb)`` lets the caller route the
        fetch through a transfer network; without it a static host-bus
        estimate is used and completion is observed lazily via the clock.
        """
        ticket = PopulateTicket(self._next_ticket)
        self._next_ticket += 1
        pinned = [line for line in result.lines if not line.dead]
        need = [line for line in pinned if NPU not in line.placements]
        if not need:
            ticket.status = "done"
            ticket.completes_at = self.clock()
            self._tickets[ticket.ticket_id] = {"ticket": ticket, "need": [], "new": [], "pinned": []}
            return ticket
        for line in pinned:
            line.inflight += 1
        try:
            self._ensure_free(NPU, len(need))
        except OutOfMemory as e:
            for line in pinned:
                line.inflight -= 1
            raise InsufficientNpuMemory(str(e)) from e
        new_blocks = [self._new_block(NPU, ref=1) for _ in need]
        nbytes = len(need) * self.config.block_bytes
        self._tickets[ticket.ticket_id] = {
            "ticket": ticket,
            "need": need,
            "new": new_blocks,
            "pinned": pinned,
        }
        if schedule_transfer is not None:
            projected = schedule_transfer(nbytes, lambda: self.finish_populate(ticket.ticket_id))
            ticket.completes_at = projected
        else:
            duration = self.config.pcie_latency_us + math.ceil(
                nbytes / self.config.pcie_bandwidth_bps * 1e6
            )
            ticket.completes_at = self.clock() + duration
        return ticket

    def finish_populate(self, ticket_id: int) -> None:
        state = self._tickets.get(ticket_id)
        if state is None:
            raise UnknownTicket(str(ticket_id))
        ticket = state["ticket"]
        if ticket.status == "done":
            return
        targets = dict(zip((id(l) for l in state["need"]), state["new"]))
        for line in state["pinned"]:
            line.inflight -= 1
            blk = targets.get(id(line))
            if blk is None:
                continue
            if line.dead:
                # Source vanished under an explicit free; drop the target.
                blk.ref_count = 0
                self._destroy_block(blk)
                continue
            blk.ref_count = 0
            self._adopt(line, blk)
        ticket.status = "done"
        ticket.completes_at = self.clock() if ticket.completes_at is None else ticket.completes_at

    def query_populate(self, ticket_id: int) -> str:
        state = self._tickets.get(ticket_id)
        if state is None:
            raise UnknownTicket(str(ticket_id))
        ticket = state["ticket"]
        if (
            ticket.status == "pending"
            and ticket.completes_at is not None
            and self.clock() >= ticket.completes_at
        ):
            self.finish_populate(ticket_id)
        return ticket.status

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------

    def audit_accounting(self) -> Dict[str, Dict[str, int]]:
        stats = {tier: {"free": self.free_blocks(tier), "allocated": 0, "cached": 0} for tier in TIERS}
        for blk in self._blocks.values():
            if blk.ref_count > 0:
                stats[blk.tier]["allocated"] += 1
            else:
                assert blk.line is not None, f"orphan unreferenced block {blk.block_id}"
                stats[blk.tier]["cached"] += 1
        for tier in TIERS:
            total = stats[tier]["free"] + stats[tier]["allocated"] + stats[tier]["cached"]
            assert total == self._capacity[tier], f"{tier} accounting broken: {stats[tier]}"
        return stats

    def dump_entries(self) -> List[dict]:
        out = []
        for entry in self._entries.values():
            if entry.alive_len > 0:
                out.append(
                    {
                        "tokens": [int(t) for t in entry.tokens],
                        "alive_len": entry.alive_len,
                        "context_ids": sorted(entry.context_ids),
                    }
                )
        out.sort(key=lambda e: e["tokens"])
        return out

    def dump_tree(self) -> dict:
        def render(node: Node) -> dict:
            return {
                "edge": [int(t) for t in node.edge],
                "lines": [
                    {
                        "placements": dict(sorted(line.placements.items())),
                        "pinned": line.pin_count,
                        "dead": line.dead,
                    }
                    for line in node.lines
                ],
                "children": [render(c) for _, c in sorted(node.children.items())],
            }

        return render(self._root)
