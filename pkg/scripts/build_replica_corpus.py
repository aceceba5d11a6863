#!/usr/bin/env python3
"""Build the bundled 100-request replica corpus.

The corpus is constructed, not free-sampled, so its aggregate shape is exact:
85 requests span 3 servers and 15 span 4 (mean 3.15); 33 requests imply 5
tools and 67 imply 6 (mean 5.67); 96 toolsets are distinct, with 4 pairs
sharing a toolset but differing in intent (which the dedup rule permits).

Writes src/grantbox/data/replica_corpus.jsonl; run from the repo root.
"""

from __future__ import annotations

import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from grantbox import generator  # noqa: E402
from grantbox.evaluation import corpus_stats  # noqa: E402
from grantbox.generator import (  # noqa: E402
    _CONNECTIVES,
    _fill,
    TEMPLATES,
    BenignRequest,
    RequestCorpus,
    check_feasible,
    intent_signature,
)
from grantbox.gateway import qualified_tool_name  # noqa: E402

SEED = 20240521
TOTAL = 100
N_DUPLICATE_PAIRS = 4
SERVER_COUNTS = [3] * 85 + [4] * 15       # mean 3.15
TOOL_COUNTS = [5] * 33 + [6] * 67         # mean 5.67
OUT = Path(__file__).resolve().parents[1] / "src" / "grantbox" / "data" / "replica_corpus.jsonl"


def compose(rng: random.Random, entries, n_servers: int, n_tools: int):
    """One feasible request with exactly n_servers servers and n_tools tools."""
    for _ in range(4000):
        selected = rng.sample(entries, n_servers)
        if not check_feasible(selected):
            continue
        picks = [rng.choice(TEMPLATES[e.profile]) for e in selected]
        if sum(len(p[1]) for p in picks) != n_tools:
            continue
        clauses, tools = [], []
        for i, (entry, (text, tool_names)) in enumerate(zip(selected, picks)):
            connective = _CONNECTIVES[min(i, len(_CONNECTIVES) - 1)]
            clauses.append(connective.format(_fill(text, rng)))
            tools.extend(qualified_tool_name(entry.name, t) for t in tool_names)
        return tuple(e.name for e in selected), " ".join(clauses), tuple(tools), picks
    raise RuntimeError(f"could not compose a request with {n_servers} servers / {n_tools} tools")


def rephrase(rng: random.Random, servers, picks, old_intent):
    """Same toolset, different wording: refill placeholders until intent changes."""
    for _ in range(2000):
        clauses = []
        for i, (text, _tools) in enumerate(picks):
            connective = _CONNECTIVES[min(i, len(_CONNECTIVES) - 1)]
            clauses.append(connective.format(_fill(text, rng)))
        candidate = " ".join(clauses)
        if intent_signature(candidate) != old_intent:
            return candidate
    return None


def main() -> int:
    rng = random.Random(SEED)
    entries = generator.roster_entries()
    server_plan = list(SERVER_COUNTS)
    tool_plan = list(TOOL_COUNTS)
    rng.shuffle(server_plan)
    rng.shuffle(tool_plan)

    unique_total = TOTAL - N_DUPLICATE_PAIRS
    requests: list[BenignRequest] = []
    compositions = []
    toolsets = set()
    slot = 0
    while len(requests) < unique_total:
        n_servers, n_tools = server_plan[slot], tool_plan[slot]
        servers, text, tools, picks = compose(rng, entries, n_servers, n_tools)
        if frozenset(tools) in toolsets:
            continue
        request = BenignRequest(request_id=f"r-{len(requests) + 1:04d}", text=text,
                                servers=servers, expected_tools=tools)
        if generator.is_duplicate(request, requests):
            continue
        requests.append(request)
        compositions.append((servers, picks))
        toolsets.add(frozenset(tools))
        slot += 1

    # Four rewordings of earlier requests: identical toolset, new intent.
    remaining = list(zip(server_plan[slot:], tool_plan[slot:]))
    used_sources = set()
    for n_servers, n_tools in remaining:
        placed = False
        for idx, source in enumerate(requests[:unique_total]):
            if idx in used_sources:
                continue
            if len(source.servers) != n_servers or len(source.expected_tools) != n_tools:
                continue
            text = rephrase(rng, source.servers, compositions[idx][1], source.intent)
            if text is None:
                continue
            duplicate = BenignRequest(request_id=f"r-{len(requests) + 1:04d}", text=text,
                                      servers=source.servers,
                                      expected_tools=source.expected_tools)
            if generator.is_duplicate(duplicate, requests):
                continue
            requests.append(duplicate)
            used_sources.add(idx)
            placed = True
            break
        if not placed:
            raise RuntimeError(f"no rewording source found for {n_servers}/{n_tools}")

    corpus = RequestCorpus(seed=SEED, backend="template", registry_digest="roster",
                           requests=requests,
                           payloads=generator.generate_payloads(entries))
    stats = corpus_stats(corpus)
    expected = {"requests": 100, "avg_servers": "3.15", "avg_tools": "5.67",
                "unique_toolsets": 96}
    if stats != expected:
        raise RuntimeError(f"corpus shape off: {stats} != {expected}")
    corpus.save(OUT)
    print(f"wrote {OUT}")
    print(f"  {stats['requests']} requests, {len(corpus.payloads)} payloads, "
          f"avg_servers={stats['avg_servers']}, avg_tools={stats['avg_tools']}, "
          f"unique_toolsets={stats['unique_toolsets']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
