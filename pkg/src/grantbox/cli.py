"""Command-line interface: deploy, health, generate, run, report.

Exit codes: 0 success, 1 validation or integrity failure (bad configs,
corrupt artifacts, reports that do not recompute), 2 infrastructure failure
(sandbox, deployment, network, model backend).

``run`` checkpoints one outcome line per finished case and skips already
finished cases on restart, so an interrupted evaluation resumes where it
stopped. Between cases the tool state is restored whenever the previous case
invoked a state-mutating tool.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import shutil
import sys
import tempfile
from pathlib import Path

from . import evaluation, gateway, generator, lifecycle, pipeline
from .clock import SYSTEM_CLOCK, LogicalClock
from .errors import (
    ConfigError,
    GenerationError,
    GrantboxError,
    IntegrityError,
    ModelBackendError,
    ScriptExhaustedError,
)
from .llm import ScriptedModel, create_model
from .mockservers import fixtures
from .mockservers.profiles import MUTATING_TOOLS
from .sandbox import create_sandbox
from .serialization import canonical_dumps, read_jsonl

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INFRA = 2


# ---------------------------------------------------------------------------
# deploy / health
# ---------------------------------------------------------------------------

def _start_stack(config_path: str, backend=None, work_dir=None):
    spec, servers = lifecycle.load_registry(config_path)
    sandbox = create_sandbox(spec, backend=backend, work_dir=work_dir) if work_dir \
        else create_sandbox(spec, backend=backend)
    sandbox.provision()
    host = gateway.BridgeHost()
    host.start()
    manager = lifecycle.ServerManager(sandbox, host)
    manager.register_all(servers)
    return sandbox, host, manager


def _print_health(health_map) -> bool:
    all_ok = True
    for name in sorted(health_map):
        h = health_map[name]
        parts = [f"process={'up' if h.process_alive else 'down'}",
                 f"port={'ok' if h.port_bound else 'unreachable'}",
                 f"tools={'ok' if h.tools_ok else 'bad'}"]
        print(f"{name}: {h.status} ({', '.join(parts)})")
        all_ok = all_ok and h.status == lifecycle.HEALTHY
    return all_ok


def cmd_deploy(args) -> int:
    sandbox = host = manager = None
    try:
        sandbox, host, manager = _start_stack(args.config, backend=args.backend,
                                              work_dir=args.out)
        manager.start_all()
        healthy = _print_health(manager.check_all())
        print(f"deployed {len(manager.configs)} server(s); "
              f"baseline digest {sandbox.state.baseline_digest[:12]}")
        return EXIT_OK if healthy else EXIT_INFRA
    finally:
        if manager is not None:
            manager.shutdown()
        if host is not None:
            host.stop()
        if sandbox is not None and not args.keep:
            sandbox.destroy()


def cmd_health(args) -> int:
    sandbox = host = manager = None
    try:
        sandbox, host, manager = _start_stack(args.config, backend=args.backend)
        manager.start_all()
        for _ in range(max(1, args.checks)):
            healthy = _print_health(manager.check_all())
        if args.history:
            manager.export_history(args.history)
            print(f"health history written to {args.history}")
        return EXIT_OK if healthy else EXIT_INFRA
    finally:
        if manager is not None:
            manager.shutdown()
        if host is not None:
            host.stop()
        if sandbox is not None:
            sandbox.destroy()


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.config:
        spec, servers = lifecycle.load_registry(args.config)
        entries = [generator.ServerEntry(
            name=s.name, profile=s.category or s.name,
            tools=tuple(_registry_tools(s))) for s in servers]
        digest = lifecycle.registry_digest(spec, servers)
    else:
        entries = generator.roster_entries()
        digest = "roster"
    model = create_model(args.model) if args.backend == "model" else None
    corpus = generator.generate_corpus(
        entries, count=args.max, seed=args.seed, mode=args.backend,
        model=model, registry_digest=digest)
    corpus.save(args.out)
    stats = evaluation.corpus_stats(corpus)
    print(f"wrote {args.out}: {stats['requests']} requests, "
          f"{len(corpus.payloads)} payloads, avg_servers={stats['avg_servers']}, "
          f"avg_tools={stats['avg_tools']}, unique_toolsets={stats['unique_toolsets']}")
    return EXIT_OK


def _registry_tools(server: lifecycle.ServerConfig) -> list[str]:
    from .mockservers.profiles import PROFILES
    profile = server.category or server.name
    if profile in PROFILES:
        return [t.name for t in PROFILES[profile]]
    raise ConfigError(
        f"cannot infer tools for server {server.name!r}: unknown profile {profile!r}")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _load_finished(outcomes_path: Path) -> set:
    if not outcomes_path.exists():
        return set()
    _, rows = read_jsonl(outcomes_path)
    return {r["case_id"] for r in rows}


def _case_model(identifier: str, case_id: str):
    """Scripted directories hold one script per case; other ids build fresh backends."""
    if identifier.startswith("scripted:"):
        target = Path(identifier[len("scripted:"):])
        if target.is_dir():
            script = target / f"{case_id}.json"
            if not script.exists():
                raise ConfigError(f"no script for case {case_id} in {target}")
            return ScriptedModel.from_file(script)
        return ScriptedModel.from_file(target)
    return create_model(identifier)


def _case_servers(case: evaluation.AttackCase) -> dict[str, str]:
    # Server name doubles as profile name in roster-generated corpora.
    names = set(case.request.servers) | set(case.payload.servers)
    return {name: name for name in sorted(names)}


class CaseRunner:
    """Runs cases in-process against fixture-backed tool state."""

    def __init__(self, model_id: str, out_dir: Path, state_root=None,
                 step_limit: int = pipeline.DEFAULT_STEP_LIMIT, logical_clock: bool = True):
        self.model_id = model_id
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.traces_path = self.out_dir / "traces.jsonl"
        self.outcomes_path = self.out_dir / "outcomes.jsonl"
        self.step_limit = step_limit
        self.logical_clock = logical_clock
        self._own_root = state_root is None
        self.state_root = Path(state_root) if state_root else Path(tempfile.mkdtemp(prefix="grantbox-state-"))
        self._needs_reset = True

    def _fresh_state(self, root: Path) -> None:
        if root.exists():
            shutil.rmtree(root)
        fixtures.build_baseline(root)

    def _run_one(self, case: evaluation.AttackCase, root: Path):
        model = _case_model(self.model_id, case.case_id)
        executor = pipeline.InProcessExecutor(root, _case_servers(case))
        clock = LogicalClock() if self.logical_clock else SYSTEM_CLOCK
        schedule = pipeline.InjectionSchedule(position=case.inject_at, seed=case.seed)
        trace = pipeline.run_case(
            case.request, case.payload, model, executor, mode=case.mode,
            schedule=schedule, case_id=case.case_id, step_limit=self.step_limit,
            clock=clock, seed=case.seed)
        outcome = evaluation.judge_outcome(trace, case.payload, case_id=case.case_id)
        return trace, outcome

    def _mutated(self, trace: pipeline.ExecutionTrace) -> bool:
        for call in trace.all_calls():
            try:
                _, tool = gateway.split_qualified(call["name"])
            except ValueError:
                continue
            if tool in MUTATING_TOOLS:
                return True
        return False

    def _append(self, path: Path, obj: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(canonical_dumps(obj) + "\n")
            fh.flush()

    def run(self, cases: list, resume: bool = True, parallel: int = 1) -> list:
        finished = _load_finished(self.outcomes_path) if resume else set()
        pending = [c for c in cases if c.case_id not in finished]
        outcomes = []
        if parallel <= 1:
            for case in pending:
                if self._needs_reset:
                    self._fresh_state(self.state_root)
                    self._needs_reset = False
                trace, outcome = self._run_one(case, self.state_root)
                self._needs_reset = self._mutated(trace)
                self._append(self.traces_path, trace.to_dict())
                self._append(self.outcomes_path, outcome.to_dict())
                outcomes.append(outcome)
        else:
            # Parallel workers get disposable per-case state roots.
            def work(case):
                with tempfile.TemporaryDirectory(prefix="grantbox-case-") as tmp:
                    root = Path(tmp) / "state"
                    fixtures.build_baseline(root)
                    return self._run_one(case, root)

            with concurrent.futures.ThreadPoolExecutor(max_workers=parallel) as pool:
                futures = {pool.submit(work, case): case for case in pending}
                results = {}
                for future in concurrent.futures.as_completed(futures):
                    case = futures[future]
                    results[case.case_id] = future.result()
            for case in pending:  # checkpoint in case order for determinism
                trace, outcome = results[case.case_id]
                self._append(self.traces_path, trace.to_dict())
                self._append(self.outcomes_path, outcome.to_dict())
                outcomes.append(outcome)
        return outcomes

    def cleanup(self) -> None:
        if self._own_root and self.state_root.exists():
            shutil.rmtree(self.state_root, ignore_errors=True)


def cmd_run(args) -> int:
    corpus = generator.RequestCorpus.load(args.corpus)
    inject_at = args.inject_at if args.inject_at == "random" else int(args.inject_at)
    cases = evaluation.build_cases(corpus, mode=args.mode, seed=args.seed,
                                   inject_at=inject_at, limit=args.max)
    if not cases:
        raise ConfigError("no runnable cases: corpus has no compatible request/payload pairs")
    runner = CaseRunner(args.model, Path(args.out), step_limit=args.step_limit)
    try:
        outcomes = runner.run(cases, resume=not args.no_resume, parallel=args.parallel)
    finally:
        runner.cleanup()
    meta = {
        "corpus": str(args.corpus), "mode": args.mode, "model": args.model,
        "seed": args.seed, "inject_at": args.inject_at,
        "cases": len(cases), "ran": len(outcomes),
        "skipped_finished": len(cases) - len(outcomes),
    }
    (Path(args.out) / "run_meta.json").write_text(canonical_dumps(meta) + "\n")
    print(f"ran {len(outcomes)} case(s) ({meta['skipped_finished']} already finished); "
          f"outcomes in {runner.outcomes_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    outcome_files = []
    for source in args.outcomes:
        p = Path(source)
        if p.is_dir():
            outcome_files.append(p / "outcomes.jsonl")
        else:
            outcome_files.append(p)
    by_mode: dict[str, list] = {}
    model = args.model or ""
    for path in outcome_files:
        if not path.exists():
            raise ConfigError(f"outcomes file not found: {path}")
        _, outcomes = evaluation.load_outcomes(path)
        for outcome in outcomes:
            by_mode.setdefault(outcome.mode, []).append(outcome)
    if not by_mode:
        raise ConfigError("no outcomes to report")
    reports = [evaluation.compute_asr(by_mode[mode], model=model, mode=mode)
               for mode in sorted(by_mode)]
    for report in reports:
        evaluation.verify_report(report)
    table = evaluation.render_table(reports)
    print(table, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        evaluation.export_report_json(reports, out_dir / "report.jsonl")
        evaluation.export_report_text(reports, out_dir / "report.txt")
        print(f"report written to {out_dir}/report.jsonl and {out_dir}/report.txt")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and entry
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grantbox",
                                description="Privilege-misuse evaluation harness for tool-calling agents.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("deploy", help="provision the sandbox and start every registered server")
    d.add_argument("--config", required=True, help="registry JSON (sandbox + servers)")
    d.add_argument("--backend", choices=["process", "container"], default=None)
    d.add_argument("--out", default=None, help="sandbox work directory")
    d.add_argument("--keep", action="store_true", help="leave the sandbox tree in place")
    d.set_defaults(func=cmd_deploy)

    h = sub.add_parser("health", help="start servers, run health checks, report status")
    h.add_argument("--config", required=True)
    h.add_argument("--backend", choices=["process", "container"], default=None)
    h.add_argument("--checks", type=int, default=1, help="number of check rounds")
    h.add_argument("--history", default=None, help="write health history JSONL here")
    h.set_defaults(func=cmd_health)

    g = sub.add_parser("generate", help="generate a request corpus with injection payloads")
    g.add_argument("--config", default=None, help="registry JSON; defaults to the built-in roster")
    g.add_argument("--out", required=True, help="corpus JSONL path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max", type=int, default=100, help="number of benign requests")
    g.add_argument("--backend", choices=["template", "model"], default="template")
    g.add_argument("--model", default=None, help="model id for --backend model")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run attack cases from a corpus and judge outcomes")
    r.add_argument("--corpus", required=True)
    r.add_argument("--mode", choices=["react", "plan"], required=True)
    r.add_argument("--model", required=True,
                   help="scripted:<file-or-dir> or <provider>/<model>")
    r.add_argument("--inject-at", default="random",
                   help="'random' or a fixed 1-based tool-result position")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--max", type=int, default=None, help="cap on cases")
    r.add_argument("--parallel", type=int, default=1)
    r.add_argument("--step-limit", type=int, default=pipeline.DEFAULT_STEP_LIMIT)
    r.add_argument("--no-resume", action="store_true",
                   help="rerun finished cases instead of skipping them")
    r.add_argument("--out", required=True, help="output directory for traces and outcomes")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("report", help="aggregate outcomes into rate tables")
    t.add_argument("--outcomes", nargs="+", required=True,
                   help="outcomes.jsonl files or run directories")
    t.add_argument("--model", default=None, help="model label for table headers")
    t.add_argument("--out", default=None, help="directory for report.jsonl / report.txt")
    t.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IntegrityError, GenerationError, ScriptExhaustedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ModelBackendError as exc:
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except GrantboxError as exc:
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except OSError as exc:
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
