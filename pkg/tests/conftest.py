import sys
from pathlib import Path

import pytest

PKG_ROOT = Path(__file__).resolve().parents[1]
REPLICA_CORPUS = PKG_ROOT / "src" / "grantbox" / "data" / "replica_corpus.jsonl"


@pytest.fixture
def state_root(tmp_path):
    """A fresh fixture-baseline state directory."""
    from grantbox.mockservers import fixtures
    root = tmp_path / "state"
    fixtures.build_baseline(root)
    return root


@pytest.fixture(scope="session")
def replica_corpus():
    from grantbox.generator import RequestCorpus
    return RequestCorpus.load(REPLICA_CORPUS)


@pytest.fixture(scope="session")
def roster():
    from grantbox.generator import roster_entries
    return roster_entries()


def spawn_mock_server(profile="echo", root=".", label=None, extra=()):
    """Popen for the bundled stdio server, wired for bridging."""
    import subprocess
    argv = [sys.executable, "-m", "grantbox.mockservers", "--profile", profile, "--root", str(root)]
    if label:
        argv += ["--label", label]
    argv += list(extra)
    return subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                            stderr=subprocess.DEVNULL)


@pytest.fixture
def mock_server_factory(tmp_path):
    """Spawns mock servers and reaps them at teardown."""
    procs = []

    def factory(profile="echo", label=None, extra=(), root=None):
        proc = spawn_mock_server(profile, root or tmp_path, label=label, extra=extra)
        procs.append(proc)
        return proc

    yield factory
    for proc in procs:
        if proc.poll() is None:
            proc.kill()
        proc.wait(timeout=10)
