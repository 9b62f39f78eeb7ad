import threading

import pytest

from llbforge import baseline_project, baseline_text
from llbforge.cls import LogicStore, make_server

TOKENS = {"engineer": "tok-engineer-1", "ops": "tok-ops-2"}


@pytest.fixture(scope="session")
def base():
    return baseline_project()


@pytest.fixture(scope="session")
def base_text():
    return baseline_text()


@pytest.fixture
def store(tmp_path):
    return LogicStore(tmp_path / "store", TOKENS)


@pytest.fixture
def served_store(tmp_path):
    """A LogicStore behind a live HTTP server on an ephemeral port."""
    st = LogicStore(tmp_path / "store", TOKENS)
    httpd = make_server(st, "127.0.0.1", 0)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    host, port = httpd.server_address[:2]
    try:
        yield st, f"http://{host}:{port}"
    finally:
        httpd.shutdown()
        httpd.server_close()
        thread.join(timeout=5)
