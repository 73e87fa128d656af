import sys
import threading
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ivoseval.dataset import SynthSpec, write_synthetic  # noqa: E402
from ivoseval.service import EvaluationService, ServiceConfig, make_server  # noqa: E402

TOKENS = {"alice": 50, "bob": 50, "carol": 1}


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth7")
    write_synthetic(SynthSpec(sequences=2, frames=10, width=64, height=64, objects=2, seed=7), root)
    return root


class RunningService:
    def __init__(self, dataset, state_dir, **overrides):
        self.config = ServiceConfig(dataset=Path(dataset), state_dir=Path(state_dir), tokens=dict(TOKENS),
                                    **overrides)
        self.service = EvaluationService(self.config)
        self.server = make_server(self.service)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def running_service(synth_root, tmp_path):
    started = []

    def start(state_dir=None, **overrides):
        svc = RunningService(synth_root, state_dir or tmp_path / "state", **overrides)
        started.append(svc)
        return svc

    yield start
    for svc in started:
        svc.stop()
