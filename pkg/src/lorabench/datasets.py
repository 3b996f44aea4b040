"""Seeded generators and validators for the HashHop and HashChain tasks.

Both tasks are rendered as a shuffled "Map:" block of X=>Y lines followed
by a prompt that ends at "Target: "; the ground-truth hash is kept out of
the rendered text. Every sample is a pure function of (seed, params), so
files regenerate byte-identically.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError

HASH_ALPHABET = string.ascii_lowercase + string.digits
HASH_LEN = 5
MAX_CHAIN_LENGTH = 20

_ALPHABET_ARR = np.frombuffer(HASH_ALPHABET.encode(), dtype=np.uint8)


@dataclass
class HashHopSample:
    pairs: list[tuple[str, str]]
    start: str
    hops: int
    target: str
    rendered: str
    seed: int

    @property
    def chain_length(self) -> int:
        return len(self.pairs)

    kind = "hashhop"

    def bucket(self) -> tuple:
        return ("hops", self.hops)


@dataclass
class HashChainSample:
    edges: list[tuple[str, str]]
    start: str
    chain_lengths: list[int]
    target: str
    rendered: str
    seed: int

    @property
    def num_chains(self) -> int:
        return len(self.chain_lengths)

    kind = "hashchain"

    def bucket(self) -> tuple:
        # Bucketed by the length of the answer (shortest) chain.
        return (self.num_chains, min(self.chain_lengths))


def gen_hash(rng: np.random.Generator, taken: set[str], length: int = HASH_LEN) -> str:
    """Draw a hash uniformly from the untaken [a-z0-9]^length strings."""
    space = len(HASH_ALPHABET) ** length
    if len(taken) >= space:
        raise DatasetError(f"hash space of size {space} exhausted")
    while True:
        idx = rng.integers(0, len(HASH_ALPHABET), size=length)
        h = _ALPHABET_ARR[idx].tobytes().decode()
        if h not in taken:
            taken.add(h)
            return h


def _shuffle(rng: np.random.Generator, items: list) -> list:
    # Fisher-Yates with draws from the sample's own generator.
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        out[i], out[j] = out[j], out[i]
    return out


def _render_map(lines: list[tuple[str, str]]) -> str:
    return "Map:\n" + "".join(f"{a}=>{b}\n" for a, b in lines)


def gen_hashhop(seed: int, chain_length: int, hops: int, hash_len: int = HASH_LEN,
                max_chain_length: int = MAX_CHAIN_LENGTH) -> HashHopSample:
    """Generate one chain of `chain_length` links and ask for `hops` ahead."""
    if not 1 <= hops <= chain_length:
        raise DatasetError(f"hops must satisfy 1 <= hops <= chain_length, got hops={hops}, chain_length={chain_length}")
    if chain_length > max_chain_length:
        raise DatasetError(f"chain_length {chain_length} exceeds the configured maximum {max_chain_length}")
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    nodes = [gen_hash(rng, taken, hash_len) for _ in range(chain_length + 1)]
    pairs = list(zip(nodes[:-1], nodes[1:]))
    shuffled = _shuffle(rng, pairs)
    start = nodes[0]
    target = nodes[hops]
    rendered = _render_map(shuffled) + f"Start: {start}\nHops: {hops}\nTarget: "
    return HashHopSample(pairs=shuffled, start=start, hops=hops, target=target,
                         rendered=rendered, seed=int(seed))


def _draw_chain_lengths(rng: np.random.Generator, num_chains: int, lo: int, hi: int) -> list[int]:
    if lo < 1 or hi < lo:
        raise DatasetError(f"invalid length range ({lo}, {hi})")
    if num_chains < 1:
        raise DatasetError(f"num_chains must be >= 1, got {num_chains}")
    if num_chains > 1 and lo == hi:
        raise DatasetError(f"cannot make the minimum chain length unique within range ({lo}, {hi})")
    for _ in range(1000):
        lengths = [int(rng.integers(lo, hi + 1)) for _ in range(num_chains)]
        m = min(lengths)
        dup = [i for i, v in enumerate(lengths) if v == m]
        if len(dup) == 1:
            return lengths
        if m + 1 <= hi:
            # Keep the first chain at the minimum, bump the other duplicates.
            for i in dup[1:]:
                lengths[i] = m + 1
            return lengths
        # All chains sampled at hi; redraw.
    raise DatasetError(f"cannot make the minimum chain length unique within range ({lo}, {hi})")


def gen_hashchain(seed: int, num_chains: int, length_range: tuple[int, int],
                  hash_len: int = HASH_LEN) -> HashChainSample:
    """Generate `num_chains` disjoint chains from one start hash.

    The minimum chain length is unique by construction, so the terminal
    hash of the shortest chain is a well-defined target.
    """
    lo, hi = length_range
    rng = np.random.default_rng(seed)
    lengths = _draw_chain_lengths(rng, num_chains, lo, hi)
    taken: set[str] = set()
    start = gen_hash(rng, taken, hash_len)
    edges: list[tuple[str, str]] = []
    terminal: list[str] = []
    for n in lengths:
        prev = start
        for _ in range(n):
            nxt = gen_hash(rng, taken, hash_len)
            edges.append((prev, nxt))
            prev = nxt
        terminal.append(prev)
    target = terminal[lengths.index(min(lengths))]
    shuffled = _shuffle(rng, edges)
    rendered = _render_map(shuffled) + f"Start: {start}\nTask: shortest path\nTarget: "
    return HashChainSample(edges=shuffled, start=start, chain_lengths=lengths,
                           target=target, rendered=rendered, seed=int(seed))


# ---------------------------------------------------------------------------
# oracles and validation

def walk_target(pairs: list[tuple[str, str]], start: str, hops: int) -> str | None:
    """Follow the mapping `hops` steps from `start`; None if the walk breaks."""
    step = dict(pairs)
    node = start
    for _ in range(hops):
        node = step.get(node)
        if node is None:
            return None
    return node


def bfs_shortest_terminal(edges: list[tuple[str, str]], start: str) -> tuple[str | None, bool]:
    """Breadth-first search for the nearest terminal (no outgoing edge) node.

    Returns (terminal, unique); terminal is None when start is isolated.
    """
    adj: dict[str, list[str]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
    frontier = [start]
    seen = {start}
    while frontier:
        hits = [n for n in frontier if n not in adj]
        if hits:
            return hits[0], len(hits) == 1
        nxt = []
        for n in frontier:
            for b in adj.get(n, ()):
                if b not in seen:
                    seen.add(b)
                    nxt.append(b)
        frontier = nxt
    return None, False


def _check_hash(h: str, hash_len: int) -> bool:
    return len(h) == hash_len and all(c in HASH_ALPHABET for c in h)


def validate(sample) -> list[str]:
    """Re-derive the target with an independent oracle and check invariants.

    Returns a list of violation strings; an empty list means the sample is
    well formed. Never raises.
    """
    violations: list[str] = []
    if isinstance(sample, HashHopSample):
        hash_len = len(sample.start)
        names = [h for pair in sample.pairs for h in pair]
        if any(not _check_hash(h, hash_len) for h in names + [sample.target]):
            violations.append("malformed hash")
        if len(set(names)) != len(sample.pairs) + 1:
            violations.append("hash collision within sample")
        if len(set(sample.pairs)) != len(sample.pairs):
            violations.append("duplicate pair")
        if any(a == b for a, b in sample.pairs):
            violations.append("self-loop")
        if sample.hops < 1 or sample.hops > len(sample.pairs):
            violations.append("hops out of range")
        derived = walk_target(sample.pairs, sample.start, sample.hops)
        if derived is None:
            violations.append("chain broken before reaching the requested hop count")
        elif derived != sample.target:
            violations.append(f"target mismatch: walk oracle reached {derived}, sample says {sample.target}")
        expect = _render_map(sample.pairs) + f"Start: {sample.start}\nHops: {sample.hops}\nTarget: "
        if sample.rendered != expect:
            violations.append("rendered text does not match the template")
    elif isinstance(sample, HashChainSample):
        hash_len = len(sample.start)
        names = [h for e in sample.edges for h in e]
        if any(not _check_hash(h, hash_len) for h in names + [sample.target]):
            violations.append("malformed hash")
        if any(a == b for a, b in sample.edges):
            violations.append("self-loop")
        if len(set(sample.edges)) != len(sample.edges):
            violations.append("duplicate edge")
        sources = [a for a, _ in sample.edges]
        counts = {}
        for a in sources:
            counts[a] = counts.get(a, 0) + 1
        if counts.get(sample.start, 0) != sample.num_chains:
            violations.append("chain count from start does not match chain_lengths")
        if any(v != 1 for k, v in counts.items() if k != sample.start):
            violations.append("chains are not edge-disjoint")
        mins = sorted(sample.chain_lengths)
        if len(mins) > 1 and mins[0] == mins[1]:
            violations.append("non-unique minimum chain length")
        if len(sample.edges) != sum(sample.chain_lengths):
            violations.append("edge count does not match chain_lengths")
        derived, unique = bfs_shortest_terminal(sample.edges, sample.start)
        if derived is None:
            violations.append("BFS found no terminal node")
        else:
            if not unique:
                violations.append("BFS found multiple nearest terminals")
            if derived != sample.target:
                violations.append(f"target mismatch: BFS oracle reached {derived}, sample says {sample.target}")
        expect = _render_map(sample.edges) + f"Start: {sample.start}\nTask: shortest path\nTarget: "
        if sample.rendered != expect:
            violations.append("rendered text does not match the template")
    else:
        violations.append(f"unknown sample type {type(sample).__name__}")
    return violations


# ---------------------------------------------------------------------------
# JSONL persistence

def to_record(sample) -> dict:
    if isinstance(sample, HashHopSample):
        meta = {"hops": sample.hops, "chain_length": sample.chain_length}
    elif isinstance(sample, HashChainSample):
        meta = {"num_chains": sample.num_chains, "chain_lengths": list(sample.chain_lengths)}
    else:
        raise DatasetError(f"cannot serialize {type(sample).__name__}")
    return {"kind": sample.kind, "seed": sample.seed, "rendered": sample.rendered,
            "target": sample.target, "meta": meta}


def record_bucket(record: dict) -> tuple:
    meta = record["meta"]
    if record["kind"] == "hashhop":
        return ("hops", meta["hops"])
    return (meta["num_chains"], min(meta["chain_lengths"]))


def emit_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            rec = s if isinstance(s, dict) else to_record(s)
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_jsonl(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}: malformed JSON on line {lineno}: {e}") from e
            for key in ("kind", "seed", "rendered", "target", "meta"):
                if key not in rec:
                    raise DatasetError(f"{path}: line {lineno} is missing field {key!r}")
            records.append(rec)
    return records


def derive_seeds(master_seed: int, count: int) -> list[int]:
    """Per-sample seeds from one master seed; stable across runs."""
    rng = np.random.default_rng(master_seed)
    return [int(s) for s in rng.integers(0, 2 ** 63, size=count)]


# ---------------------------------------------------------------------------
# sampling distributions used by training streams and eval grids

@dataclass
class HashHopSampler:
    """Uniform over the (hops, chain_length) eval grid.

    chain lengths run over [hops, max_chain]; hops over hops_values.
    """
    hops_values: tuple[int, ...] = tuple(range(1, 11))
    max_chain: int = 10
    hash_len: int = HASH_LEN

    def sample(self, rng: np.random.Generator) -> HashHopSample:
        hops = int(self.hops_values[rng.integers(0, len(self.hops_values))])
        chain_length = int(rng.integers(hops, self.max_chain + 1))
        seed = int(rng.integers(0, 2 ** 63))
        return gen_hashhop(seed, chain_length, hops, self.hash_len)


@dataclass
class HashChainSampler:
    """Uniform over chain counts and the per-chain length range."""
    num_chains_values: tuple[int, ...] = (3, 4)
    length_range: tuple[int, int] = (1, 3)
    hash_len: int = HASH_LEN

    def sample(self, rng: np.random.Generator) -> HashChainSample:
        c = int(self.num_chains_values[rng.integers(0, len(self.num_chains_values))])
        seed = int(rng.integers(0, 2 ** 63))
        return gen_hashchain(seed, c, self.length_range, self.hash_len)


@dataclass
class MixtureSampler:
    """Draws from component samplers with fixed weights."""
    components: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def sample(self, rng: np.random.Generator):
        w = np.asarray(self.weights, dtype=np.float64)
        idx = int(rng.choice(len(self.components), p=w / w.sum()))
        return self.components[idx].sample(rng)


def make_eval_samples(sampler, per_bucket: int, seed: int, max_draws: int = 200000) -> list:
    """Draw until every bucket seen has `per_bucket` samples.

    Buckets are whatever the sampler's outputs report; drawing is seeded so
    the eval set is a pure function of (sampler params, per_bucket, seed).
    """
    rng = np.random.default_rng(seed)
    buckets: dict[tuple, list] = {}
    for _ in range(max_draws):
        s = sampler.sample(rng)
        key = s.bucket()
        got = buckets.setdefault(key, [])
        if len(got) < per_bucket:
            got.append(s)
        if buckets and all(len(v) >= per_bucket for v in buckets.values()) and len(buckets) >= _expected_buckets(sampler):
            break
    return [s for key in sorted(buckets) for s in buckets[key]]


def _expected_buckets(sampler) -> int:
    if isinstance(sampler, HashHopSampler):
        return len(sampler.hops_values)
    if isinstance(sampler, HashChainSampler):
        lo, hi = sampler.length_range
        # The unique minimum can never sit at the top of the range when
        # there is more than one chain.
        spread = (hi - lo) if max(sampler.num_chains_values) > 1 else (hi - lo + 1)
        return len(sampler.num_chains_values) * max(1, spread)
    if isinstance(sampler, MixtureSampler):
        return sum(_expected_buckets(c) for c in sampler.components)
    return 1
