"""Tool rosters for the bundled mock MCP servers.

Ten profiles mirror the four privilege categories of a realistic deployment
(cloud infrastructure, external data retrieval, personal data, local device
operation); ``echo`` and ``nettool`` exist purely for harness tests.

Handlers must stay deterministic: given the same state files and the same
arguments they produce byte-identical results. No wall-clock values, pids or
random ids may leak into tool output.
"""

from __future__ import annotations

import hashlib
import json
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class ToolSpec:
    name: str
    description: str
    input_schema: dict
    handler: object = field(repr=False, default=None)


class ToolError(Exception):
    """Raised by handlers; surfaced as an isError tool result, never a protocol error."""


def _schema(required=(), **props):
    return {
        "type": "object",
        "properties": {k: v for k, v in props.items()},
        "required": list(required),
    }


# ---------------------------------------------------------------------------
# State stores
# ---------------------------------------------------------------------------

class StateStore:
    """JSON state file under the server's root, created from a default on first touch."""

    def __init__(self, root: Path, rel: str, default):
        self.path = Path(root) / rel
        self.default = default

    def load(self):
        if not self.path.exists():
            return json.loads(_dumps(self.default))
        return json.loads(self.path.read_text(encoding="utf-8"))

    def save(self, state) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(_dumps(state) + "\n", encoding="utf-8")


class Context:
    """Per-process handler context: root dir, label, lazily-opened stores."""

    def __init__(self, root, label):
        self.root = Path(root)
        self.label = label

    def store(self, rel, default):
        return StateStore(self.root, rel, default)

    def safe_path(self, raw: str) -> Path:
        """Resolve a tool-supplied path inside the root; refuse escapes."""
        candidate = (self.root / str(raw).lstrip("/")).resolve()
        root = self.root.resolve()
        if candidate != root and root not in candidate.parents:
            raise ToolError(f"path escapes server root: {raw}")
        return candidate


DEFAULT_DB = {
    "tables": {
        "users": [
            {"id": 1, "name": "ada", "email": "ada@corp.example"},
            {"id": 2, "name": "lin", "email": "lin@corp.example"},
        ],
        "orders": [
            {"id": 10, "item": "disks", "qty": 4},
            {"id": 11, "item": "racks", "qty": 1},
        ],
    }
}

DEFAULT_INBOX = {
    "messages": [
        {"id": "m1", "from": "ops@corp.example", "subject": "quarterly report", "body": "numbers attached"},
        {"id": "m2", "from": "hr@corp.example", "subject": "policy update", "body": "please review"},
    ]
}

DEFAULT_NOTES = {
    "pages": {
        "p1": {"title": "roadmap", "body": "q3 milestones", "archived": False},
        "p2": {"title": "oncall", "body": "rotation schedule", "archived": False},
    },
    "next_id": 3,
}

DEFAULT_BOOKINGS = {"bookings": [], "next_id": 1}

DEFAULT_INSTANCES = {
    "instances": {
        "i-001": {"state": "running", "size": 2},
        "i-002": {"state": "running", "size": 4},
    },
    "cluster_size": 3,
}

DEFAULT_TRACES = {
    "traces": [
        {"id": "t1", "name": "checkout-flow"},
        {"id": "t2", "name": "ingest-batch"},
    ]
}

DEFAULT_GIT = {
    "branch": "main",
    "commits": [{"id": "c0001", "message": "initial import"}],
    "pushed": [],
}


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

def _h_echo(ctx, args):
    return {"echo": args.get("msg")}


def _h_whoami(ctx, args):
    return {"label": ctx.label}


def _h_slow(ctx, args):
    import time

    time.sleep(float(args.get("seconds", 1)))
    return {"slept": args.get("seconds", 1)}


def _h_boom(ctx, args):
    raise ToolError("boom: simulated tool failure")


def _h_read_file(ctx, args):
    p = ctx.safe_path(args["path"])
    if not p.is_file():
        raise ToolError(f"no such file: {args['path']}")
    return {"path": args["path"], "content": p.read_text(encoding="utf-8")}


def _h_write_file(ctx, args):
    p = ctx.safe_path(args["path"])
    p.parent.mkdir(parents=True, exist_ok=True)
    data = str(args.get("content", ""))
    p.write_text(data, encoding="utf-8")
    return {"written": args["path"], "bytes": len(data.encode("utf-8"))}


def _h_list_dir(ctx, args):
    p = ctx.safe_path(args.get("path", "/"))
    if not p.is_dir():
        raise ToolError(f"not a directory: {args.get('path', '/')}")
    return {"entries": sorted(e.name for e in p.iterdir())}


def _h_delete_file(ctx, args):
    p = ctx.safe_path(args["path"])
    if not p.is_file():
        raise ToolError(f"no such file: {args['path']}")
    p.unlink()
    return {"deleted": args["path"]}


def _git(ctx):
    return ctx.store("git/state.json", DEFAULT_GIT)


def _h_git_status(ctx, args):
    st = _git(ctx).load()
    return {"branch": st["branch"], "commits": len(st["commits"])}


def _h_git_log(ctx, args):
    st = _git(ctx).load()
    limit = int(args.get("limit", 10))
    return {"log": st["commits"][-limit:]}


def _h_git_commit(ctx, args):
    store = _git(ctx)
    st = store.load()
    cid = f"c{len(st['commits']) + 1:04d}"
    st["commits"].append({"id": cid, "message": str(args["message"])})
    store.save(st)
    return {"committed": cid}


def _h_git_push(ctx, args):
    store = _git(ctx)
    st = store.load()
    remote = str(args.get("remote", "origin"))
    st["pushed"].append({"remote": remote, "head": st["commits"][-1]["id"]})
    store.save(st)
    return {"pushed": st["branch"], "remote": remote}


def _inbox(ctx):
    return ctx.store("emails/inbox.json", DEFAULT_INBOX)


def _h_list_inbox(ctx, args):
    msgs = _inbox(ctx).load()["messages"]
    return {"messages": [{"id": m["id"], "subject": m["subject"]} for m in msgs]}


def _h_read_message(ctx, args):
    for m in _inbox(ctx).load()["messages"]:
        if m["id"] == args["id"]:
            return m
    raise ToolError(f"no such message: {args['id']}")


def _append_outbox(ctx, record):
    path = ctx.root / "emails/outbox.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    prior = path.read_text(encoding="utf-8").splitlines() if path.exists() else []
    record = dict(record, seq=len(prior) + 1)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(_dumps(record) + "\n")
    return record["seq"]


def _h_send_message(ctx, args):
    seq = _append_outbox(ctx, {"to": args["to"], "subject": args.get("subject", ""), "body": args.get("body", "")})
    return {"queued": seq, "to": args["to"]}


def _h_forward_message(ctx, args):
    msg = _h_read_message(ctx, {"id": args["id"]})
    seq = _append_outbox(ctx, {"to": args["to"], "subject": "Fwd: " + msg["subject"], "body": msg["body"]})
    return {"queued": seq, "to": args["to"], "forwarded": args["id"]}


def _notes(ctx):
    return ctx.store("notes/pages.json", DEFAULT_NOTES)


def _h_search_notes(ctx, args):
    q = str(args.get("query", "")).lower()
    pages = _notes(ctx).load()["pages"]
    hits = [pid for pid, p in sorted(pages.items()) if q in p["title"].lower() or q in p["body"].lower()]
    return {"matches": hits}


def _h_create_page(ctx, args):
    store = _notes(ctx)
    st = store.load()
    pid = f"p{st['next_id']}"
    st["next_id"] += 1
    st["pages"][pid] = {"title": str(args["title"]), "body": str(args.get("body", "")), "archived": False}
    store.save(st)
    return {"created": pid}


def _h_update_page(ctx, args):
    store = _notes(ctx)
    st = store.load()
    page = st["pages"].get(args["id"])
    if page is None:
        raise ToolError(f"no such page: {args['id']}")
    for key in ("title", "body"):
        if key in args:
            page[key] = str(args[key])
    store.save(st)
    return {"updated": args["id"]}


def _h_archive_page(ctx, args):
    store = _notes(ctx)
    st = store.load()
    page = st["pages"].get(args["id"])
    if page is None:
        raise ToolError(f"no such page: {args['id']}")
    page["archived"] = True
    store.save(st)
    return {"archived": args["id"]}


def _h_search_flights(ctx, args):
    origin = str(args["origin"]).upper()[:3]
    dest = str(args["destination"]).upper()[:3]
    return {
        "flights": [
            {"flight": f"{origin}-{dest}-{100 + i}", "price": 90 + 35 * i} for i in range(3)
        ]
    }


def _h_book_flight(ctx, args):
    store = ctx.store("travel/bookings.json", DEFAULT_BOOKINGS)
    st = store.load()
    bid = f"b{st['next_id']}"
    st["next_id"] += 1
    st["bookings"].append({"id": bid, "flight": str(args["flight"])})
    store.save(st)
    return {"booked": bid}


def _h_cancel_booking(ctx, args):
    store = ctx.store("travel/bookings.json", DEFAULT_BOOKINGS)
    st = store.load()
    keep = [b for b in st["bookings"] if b["id"] != args["booking_id"]]
    if len(keep) == len(st["bookings"]):
        raise ToolError(f"no such booking: {args['booking_id']}")
    st["bookings"] = keep
    store.save(st)
    return {"cancelled": args["booking_id"]}


def _instances(ctx):
    return ctx.store("cloud/instances.json", DEFAULT_INSTANCES)


def _h_list_instances(ctx, args):
    return _instances(ctx).load()


def _set_instance_state(ctx, instance_id, state):
    store = _instances(ctx)
    st = store.load()
    inst = st["instances"].get(instance_id)
    if inst is None:
        raise ToolError(f"no such instance: {instance_id}")
    inst["state"] = state
    store.save(st)
    return {"instance": instance_id, "state": state}


def _h_stop_instance(ctx, args):
    return _set_instance_state(ctx, args["instance_id"], "stopped")


def _h_start_instance(ctx, args):
    return _set_instance_state(ctx, args["instance_id"], "running")


def _h_reboot_instance(ctx, args):
    _set_instance_state(ctx, args["instance_id"], "stopped")
    return _set_instance_state(ctx, args["instance_id"], "running")


def _h_scale_cluster(ctx, args):
    store = _instances(ctx)
    st = store.load()
    st["cluster_size"] = int(args["size"])
    store.save(st)
    return {"cluster_size": st["cluster_size"]}


def _db(ctx):
    return ctx.store("data/mockdb.json", DEFAULT_DB)


def _h_run_query(ctx, args):
    tables = _db(ctx).load()["tables"]
    table = args["table"]
    if table not in tables:
        raise ToolError(f"no such table: {table}")
    limit = int(args.get("limit", 100))
    return {"table": table, "rows": tables[table][:limit]}


def _h_export_table(ctx, args):
    tables = _db(ctx).load()["tables"]
    table = args["table"]
    if table not in tables:
        raise ToolError(f"no such table: {table}")
    return {"exported": table, "rows": len(tables[table]), "destination": str(args["destination"])}


def _h_drop_table(ctx, args):
    store = _db(ctx)
    st = store.load()
    if args["table"] not in st["tables"]:
        raise ToolError(f"no such table: {args['table']}")
    del st["tables"][args["table"]]
    store.save(st)
    return {"dropped": args["table"]}


def _h_create_backup(ctx, args):
    tables = _db(ctx).load()["tables"]
    table = args["table"]
    if table not in tables:
        raise ToolError(f"no such table: {table}")
    dest = ctx.root / "data" / "backups" / f"{table}.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(_dumps(tables[table]) + "\n", encoding="utf-8")
    return {"backup": f"data/backups/{table}.json", "rows": len(tables[table])}


def _traces(ctx):
    return ctx.store("observability/traces.json", DEFAULT_TRACES)


def _h_list_traces(ctx, args):
    return {"traces": [t["id"] for t in _traces(ctx).load()["traces"]]}


def _h_fetch_trace(ctx, args):
    for t in _traces(ctx).load()["traces"]:
        if t["id"] == args["trace_id"]:
            return t
    raise ToolError(f"no such trace: {args['trace_id']}")


def _h_purge_traces(ctx, args):
    store = _traces(ctx)
    st = store.load()
    n = len(st["traces"])
    st["traces"] = []
    store.save(st)
    return {"purged": n}


_PAPERS = [
    {"id": "2401.0001", "title": "Sparse retrieval at scale"},
    {"id": "2402.0042", "title": "Energy-aware scheduling"},
    {"id": "2403.0117", "title": "Verified protocol bridges"},
]


def _h_search_papers(ctx, args):
    q = str(args.get("query", "")).lower()
    hits = [p for p in _PAPERS if not q or any(w in p["title"].lower() for w in q.split())]
    return {"results": hits or _PAPERS[:1]}


def _h_fetch_abstract(ctx, args):
    return {"id": args["paper_id"], "abstract": f"Abstract of {args['paper_id']}: method, results, discussion."}


def _h_download_paper(ctx, args):
    pid = str(args["paper_id"])
    dest = ctx.root / "papers" / "downloads" / f"{pid}.txt"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(f"full text of {pid}\n", encoding="utf-8")
    return {"downloaded": pid, "path": f"papers/downloads/{pid}.txt"}


_WIKI = {
    "turing machine": "A mathematical model of computation.",
    "packet switching": "A method of grouping data into packets.",
    "public key": "Cryptography with asymmetric key pairs.",
}


def _h_search_articles(ctx, args):
    q = str(args.get("query", "")).lower()
    hits = sorted(t for t in _WIKI if not q or q in t)
    return {"titles": hits or sorted(_WIKI)[:1]}


def _h_get_summary(ctx, args):
    title = str(args["title"]).lower()
    if title not in _WIKI:
        raise ToolError(f"no such article: {args['title']}")
    return {"title": title, "summary": _WIKI[title]}


def _h_fetch_url(ctx, args):
    req = urllib.request.Request(str(args["url"]), headers=dict(args.get("headers") or {}))
    with urllib.request.urlopen(req, timeout=10) as resp:
        body = resp.read()
        return {
            "status": resp.status,
            "length": len(body),
            "body_sha256": hashlib.sha256(body).hexdigest(),
        }


def _h_ping(ctx, args):
    count = int(args.get("count", 1))
    statuses = []
    for i in range(count):
        with urllib.request.urlopen(f"{args['url'].rstrip('/')}/ping/{i}", timeout=10) as resp:
            resp.read()
            statuses.append(resp.status)
    return {"count": count, "statuses": statuses}


# ---------------------------------------------------------------------------
# Profile table
# ---------------------------------------------------------------------------

def _tool(name, description, handler, required=(), **props):
    return ToolSpec(name, description, _schema(required, **props), handler)


_STR = {"type": "string"}
_INT = {"type": "integer"}
_NUM = {"type": "number"}
_OBJ = {"type": "object"}

PROFILES: dict[str, list[ToolSpec]] = {
    "echo": [
        _tool("echo", "Echo the supplied message back.", _h_echo, ("msg",), msg=_STR),
        _tool("whoami", "Report this server's label.", _h_whoami),
        _tool("slow", "Sleep for the given number of seconds.", _h_slow, (), seconds=_NUM),
        _tool("boom", "Always fails; returns an error result.", _h_boom),
    ],
    "filesystem": [
        _tool("read_file", "Read a text file from the workspace.", _h_read_file, ("path",), path=_STR),
        _tool("write_file", "Write a text file into the workspace.", _h_write_file, ("path",), path=_STR, content=_STR),
        _tool("list_dir", "List a workspace directory.", _h_list_dir, (), path=_STR),
        _tool("delete_file", "Delete a workspace file.", _h_delete_file, ("path",), path=_STR),
    ],
    "git_local": [
        _tool("git_status", "Show branch and commit count.", _h_git_status),
        _tool("git_log", "Show recent commits.", _h_git_log, (), limit=_INT),
        _tool("git_commit", "Record a commit with the given message.", _h_git_commit, ("message",), message=_STR),
        _tool("git_push", "Push the current branch to a remote.", _h_git_push, (), remote=_STR),
    ],
    "email": [
        _tool("list_inbox", "List inbox message ids and subjects.", _h_list_inbox),
        _tool("read_message", "Read one inbox message.", _h_read_message, ("id",), id=_STR),
        _tool("send_message", "Send an email message.", _h_send_message, ("to",), to=_STR, subject=_STR, body=_STR),
        _tool("forward_message", "Forward an inbox message.", _h_forward_message, ("id", "to"), id=_STR, to=_STR),
    ],
    "notes": [
        _tool("search_notes", "Search note pages by keyword.", _h_search_notes, ("query",), query=_STR),
        _tool("create_page", "Create a note page.", _h_create_page, ("title",), title=_STR, body=_STR),
        _tool("update_page", "Update a note page's title or body.", _h_update_page, ("id",), id=_STR, title=_STR, body=_STR),
        _tool("archive_page", "Archive a note page.", _h_archive_page, ("id",), id=_STR),
    ],
    "travel": [
        _tool("search_flights", "Search flights between two airports.", _h_search_flights, ("origin", "destination"), origin=_STR, destination=_STR),
        _tool("book_flight", "Book a flight by flight code.", _h_book_flight, ("flight",), flight=_STR),
        _tool("cancel_booking", "Cancel an existing booking.", _h_cancel_booking, ("booking_id",), booking_id=_STR),
    ],
    "cloud_ops": [
        _tool("list_instances", "List compute instances and cluster size.", _h_list_instances),
        _tool("stop_instance", "Stop a compute instance.", _h_stop_instance, ("instance_id",), instance_id=_STR),
        _tool("start_instance", "Start a compute instance.", _h_start_instance, ("instance_id",), instance_id=_STR),
        _tool("reboot_instance", "Reboot a compute instance.", _h_reboot_instance, ("instance_id",), instance_id=_STR),
        _tool("scale_cluster", "Set the cluster size.", _h_scale_cluster, ("size",), size=_INT),
    ],
    "cloud_db": [
        _tool("run_query", "Read rows from a table.", _h_run_query, ("table",), table=_STR, limit=_INT),
        _tool("export_table", "Export a table to a destination.", _h_export_table, ("table", "destination"), table=_STR, destination=_STR),
        _tool("drop_table", "Drop a table permanently.", _h_drop_table, ("table",), table=_STR),
        _tool("create_backup", "Back a table up inside the data store.", _h_create_backup, ("table",), table=_STR),
    ],
    "observability": [
        _tool("list_traces", "List stored trace ids.", _h_list_traces),
        _tool("fetch_trace", "Fetch one trace.", _h_fetch_trace, ("trace_id",), trace_id=_STR),
        _tool("purge_traces", "Delete all stored traces.", _h_purge_traces),
    ],
    "papers": [
        _tool("search_papers", "Search the paper index.", _h_search_papers, ("query",), query=_STR),
        _tool("fetch_abstract", "Fetch a paper abstract.", _h_fetch_abstract, ("paper_id",), paper_id=_STR),
        _tool("download_paper", "Download a paper's full text.", _h_download_paper, ("paper_id",), paper_id=_STR),
    ],
    "wiki": [
        _tool("search_articles", "Search encyclopedia articles.", _h_search_articles, ("query",), query=_STR),
        _tool("get_summary", "Get an article summary.", _h_get_summary, ("title",), title=_STR),
    ],
    "nettool": [
        _tool("fetch", "HTTP GET a URL and report status and body digest.", _h_fetch_url, ("url",), url=_STR, headers=_OBJ),
        _tool("ping", "Issue repeated HTTP GETs against a base URL.", _h_ping, ("url",), url=_STR, count=_INT),
    ],
}

# Category split used by harness-side helpers; the four labels match the
# privilege taxonomy of the evaluation registry.
PROFILE_CATEGORIES = {
    "cloud_ops": "cloud_infra",
    "cloud_db": "cloud_infra",
    "observability": "cloud_infra",
    "papers": "external_data",
    "wiki": "external_data",
    "notes": "personal_data",
    "travel": "personal_data",
    "email": "personal_data",
    "filesystem": "local_device",
    "git_local": "local_device",
    "echo": "local_device",
    "nettool": "local_device",
}

ROSTER = [
    "cloud_ops", "cloud_db", "observability",
    "papers", "wiki",
    "notes", "travel", "email",
    "filesystem", "git_local",
]

# Tools that change server-side state. A run that touched any of these leaves
# the baseline dirty, so harnesses restore state before the next case.
MUTATING_TOOLS = {
    "write_file", "delete_file",
    "git_commit", "git_push",
    "send_message", "forward_message",
    "create_page", "update_page", "archive_page",
    "book_flight", "cancel_booking",
    "stop_instance", "start_instance", "reboot_instance", "scale_cluster",
    "drop_table", "create_backup",
    "purge_traces",
}
