"""Entry point: run a mock MCP server over stdio.

Usage inside a sandbox: ``python3 -m mockservers --profile filesystem --root /workspace``
(the deployer copies this package as a standalone top-level ``mockservers``).
"""

from __future__ import annotations

import argparse
import os
import sys

from .server import Faults, MockMcpServer


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mockservers", description="Mock MCP tool server (stdio transport).")
    p.add_argument("--profile", required=True, help="tool profile name")
    p.add_argument("--root", default=".", help="state root directory")
    p.add_argument("--label", default=None, help="server label reported by whoami/serverInfo")
    p.add_argument("--die-if-exists", default=None, metavar="PATH",
                   help="exit(13) at startup when PATH exists (recovery-escalation tests)")
    p.add_argument("--no-init-reply", action="store_true", help="never answer initialize")
    p.add_argument("--init-error", type=int, default=None, metavar="CODE",
                   help="answer initialize with a JSON-RPC error of this code")
    p.add_argument("--fail-tools-after", type=int, default=None, metavar="N",
                   help="tools/list starts failing after N successful pulls")
    p.add_argument("--empty-tools-after", type=int, default=None, metavar="N",
                   help="tools/list turns empty after N non-empty pulls")
    p.add_argument("--shuffle-replies", action="store_true",
                   help="reply to tools/call out of order (concurrency tests)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.die_if_exists and os.path.exists(args.die_if_exists):
        print(f"refusing to start: {args.die_if_exists} exists", file=sys.stderr)
        return 13
    faults = Faults(
        no_init_reply=args.no_init_reply,
        init_error_code=args.init_error,
        fail_tools_after=args.fail_tools_after,
        empty_tools_after=args.empty_tools_after,
        shuffle_replies=args.shuffle_replies,
    )
    server = MockMcpServer(args.profile, root=args.root, label=args.label, faults=faults)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
