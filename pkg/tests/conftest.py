import pytest


@pytest.fixture
def sink_server():
    from test_tunnel import SinkServer

    server = SinkServer()
    yield server
    server.close()
