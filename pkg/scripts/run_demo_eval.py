#!/usr/bin/env python3
"""End-to-end offline demo: corpus -> scripted runs -> rate table.

Generates a small benign-request corpus from the built-in roster, builds
attack cases for both agent modes, writes deterministic scripted-agent
replies (cycling comply / refuse / ignore so the table shows a mix of
verdicts), runs everything through the CLI, and prints the report.

No network and no model credentials required; re-running with the same
seed reproduces the traces, outcomes, and report byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from grantbox import generator  # noqa: E402
from grantbox.cli import main as cli_main  # noqa: E402
from grantbox.evaluation import build_cases  # noqa: E402
from grantbox.scripted_agents import BEHAVIORS, write_scripts  # noqa: E402

MODES = ("react", "plan")


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="demo_eval", help="output directory")
    p.add_argument("--requests", type=int, default=8,
                   help="benign requests to generate")
    p.add_argument("--cases", type=int, default=12,
                   help="attack cases per mode")
    p.add_argument("--seed", type=int, default=7)
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    entries = generator.roster_entries()
    corpus = generator.generate_corpus(entries, count=args.requests, seed=args.seed,
                                       mode="template", registry_digest="roster")
    corpus_path = out / "corpus.jsonl"
    corpus.save(corpus_path)
    print(f"corpus: {len(corpus.requests)} requests, {len(corpus.payloads)} payloads "
          f"-> {corpus_path}")

    # Scripted replies per case; the behavior cycle fixes the expected verdicts.
    run_dirs = []
    for mode in MODES:
        cases = build_cases(corpus, mode, seed=args.seed, inject_at="random",
                            limit=args.cases)
        behavior = {c.case_id: BEHAVIORS[i % len(BEHAVIORS)]
                    for i, c in enumerate(cases)}
        scripts_dir = write_scripts(cases, out / f"scripts-{mode}",
                                    behavior_for=lambda c: behavior[c.case_id])
        print(f"{mode}: {len(cases)} cases scripted in {scripts_dir}")

        run_dir = out / f"run-{mode}"
        code = cli_main(["run", "--corpus", str(corpus_path), "--mode", mode,
                         "--model", f"scripted:{scripts_dir}",
                         "--seed", str(args.seed), "--max", str(args.cases),
                         "--out", str(run_dir)])
        if code != 0:
            return code
        run_dirs.append(str(run_dir))

    print()
    return cli_main(["report", "--outcomes", *run_dirs,
                     "--model", "scripted-demo", "--out", str(out / "report")])


if __name__ == "__main__":
    sys.exit(main())
