import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splitf.tinyformer import ModelConfig, init_weights  # noqa: E402

TINY = dict(vocab_size=32, n_layers=4, hidden_dim=16, n_heads=2, n_kv_heads=1,
            head_dim=8, ffn_dim=32, max_seq_len=64)


@pytest.fixture(scope="session")
def weights():
    return init_weights(ModelConfig())


@pytest.fixture(scope="session")
def tiny_weights():
    return init_weights(ModelConfig(**TINY, seed=3))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
