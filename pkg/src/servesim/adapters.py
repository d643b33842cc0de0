"""Runtime optimization adapters: graph-capture padding, draft-and-verify
speculative decoding, hash-chained prefix caching, and chunked prefill.

Each adapter is a small pure-Python state machine the orchestration layer
drives once per scheduling step.  None of them touch the event queues; they
only translate optimization semantics into token counts, cache credits, and
cost-query shapes.
"""

from __future__ import annotations

import hashlib
import random
from collections import OrderedDict
from dataclasses import dataclass

from .config import ceil_div
from .fidelity import KERNEL_ONLY, LAUNCH_INCLUSIVE


class AdapterError(ValueError):
    pass


# --- graph capture ------------------------------------------------------------


@dataclass(frozen=True)
class DecodeLaunch:
    """How one pure-decode step actually hits the device."""
    batch_size: int      # live requests in the step
    effective_size: int  # slots the kernels run over, padding included
    mode: str            # kernel_only when a captured graph is replayed

    @property
    def padded_slots(self) -> int:
        return self.effective_size - self.batch_size


class CaptureBinLadder:
    """Padding ladder for captured decode graphs.

    A pure-decode batch is padded up to the smallest captured size; replay
    skips launch overhead.  Batches above the largest bin, mixed batches, and
    disabled capture all fall back to eager launches at true size.
    """

    def __init__(self, bins: tuple[int, ...], enabled: bool = True):
        if not bins:
            raise AdapterError("capture ladder needs at least one bin")
        if list(bins) != sorted(set(bins)):
            raise AdapterError(f"capture bins must be strictly increasing: {bins}")
        if bins[0] < 1:
            raise AdapterError("capture bins must be >= 1")
        self.bins = tuple(bins)
        self.enabled = enabled

    def decode_launch(self, batch_size: int, pure_decode: bool) -> DecodeLaunch:
        if batch_size < 1:
            raise AdapterError("decode launch needs a positive batch")
        if not (self.enabled and pure_decode) or batch_size > self.bins[-1]:
            return DecodeLaunch(batch_size, batch_size, LAUNCH_INCLUSIVE)
        for b in self.bins:
            if b >= batch_size:
                return DecodeLaunch(batch_size, b, KERNEL_ONLY)
        raise AssertionError("unreachable: ladder scan fell through")


# --- speculative decoding -----------------------------------------------------


def expected_tokens_per_step(verify_tokens: int, acceptance: float) -> float:
    """Mean committed tokens per verify step: 1 + p + p^2 + ... + p^k."""
    return 1.0 + sum(acceptance ** i for i in range(1, verify_tokens + 1))


@dataclass
class MtpState:
    """Per-request speculative decoding bookkeeping."""
    rng: random.Random
    steps: int = 0
    drafted: int = 0
    accepted: int = 0
    committed: int = 0

    @classmethod
    def seeded(cls, workload_seed: int, rid: int) -> "MtpState":
        # decouple per-request streams from workload synthesis streams
        return cls(rng=random.Random((workload_seed * 1_000_003 + rid) * 4 + 3))


def mtp_step(state: MtpState, verify_tokens: int, acceptance: float, remaining: int) -> int:
    """Run one draft-and-verify step; returns tokens committed (>= 1).

    All drafts are scored left to right and acceptance stops at the first
    rejection; the bonus token from the verifier always commits.
    """
    if remaining < 1:
        raise AdapterError("verify step with nothing left to decode")
    draws = [state.rng.random() < acceptance for _ in range(verify_tokens)]
    run = 0
    for ok in draws:
        if not ok:
            break
        run += 1
    committed = min(run + 1, remaining)
    state.steps += 1
    state.drafted += verify_tokens
    state.accepted += run
    state.committed += committed
    return committed


# --- prefix cache -------------------------------------------------------------


def chain_digests(content_id: tuple, num_blocks: int) -> list[bytes]:
    """Parent-chained block digests for one context stream.

    Block i's digest commits to the whole chain before it, so two streams
    share a digest only when they share every block up to that point.
    """
    digests = []
    parent = b""
    for i in range(num_blocks):
        h = hashlib.blake2b(digest_size=16)
        h.update(parent)
        h.update(repr((content_id, i)).encode())
        parent = h.digest()
        digests.append(parent)
    return digests


class PrefixCacheIndex:
    """LRU index over full-block digests.

    Hits grant prefill compute credit only; every request still allocates its
    own KV blocks, so the cache never changes memory pressure, just work.
    """

    def __init__(self, block_tokens: int, capacity_blocks: int | None = None):
        if block_tokens < 1:
            raise AdapterError("block_tokens must be >= 1")
        if capacity_blocks is not None and capacity_blocks < 1:
            raise AdapterError("capacity must be >= 1 block or unbounded")
        self.block_tokens = block_tokens
        self.capacity = capacity_blocks
        self._index: OrderedDict[bytes, None] = OrderedDict()
        self.lookups = 0
        self.queried_blocks = 0
        self.hit_blocks = 0
        self.inserted_blocks = 0
        self.evicted_blocks = 0

    def __len__(self) -> int:
        return len(self._index)

    def lookup(self, content_id: tuple, prompt_tokens: int) -> int:
        """Longest cached prefix of the prompt, in tokens.

        At least one prompt token is always left uncached so the prefill has
        something to feed the first decode step.
        """
        self.lookups += 1
        full = prompt_tokens // self.block_tokens
        self.queried_blocks += full
        hits = 0
        for digest in chain_digests(content_id, full):
            if digest not in self._index:
                break
            self._index.move_to_end(digest)
            hits += 1
        self.hit_blocks += hits
        return min(hits * self.block_tokens, max(prompt_tokens - 1, 0))

    def insert(self, content_id: tuple, context_tokens: int) -> None:
        """Register every full block of a finished context stream."""
        full = context_tokens // self.block_tokens
        for digest in chain_digests(content_id, full):
            if digest in self._index:
                self._index.move_to_end(digest)
            else:
                self._index[digest] = None
                self.inserted_blocks += 1
        if self.capacity is not None:
            while len(self._index) > self.capacity:
                self._index.popitem(last=False)
                self.evicted_blocks += 1


def prefix_content_id(session: int, prefix_group: str | None) -> tuple:
    """Cache identity of a request's context stream."""
    if prefix_group is not None:
        return ("group", prefix_group)
    return ("session", session)


# --- chunked prefill ----------------------------------------------------------


def chunk_next(remaining_prefill: int, token_budget: int, already_scheduled: int) -> int:
    """Prefill tokens granted to one request within a step's token budget."""
    if remaining_prefill < 0 or token_budget < 0 or already_scheduled < 0:
        raise AdapterError("chunk accounting went negative")
    return max(0, min(remaining_prefill, token_budget - already_scheduled))


def blocks_needed(tokens: int, block_tokens: int) -> int:
    """KV blocks that cover a token span."""
    return ceil_div(tokens, block_tokens) if tokens > 0 else 0
