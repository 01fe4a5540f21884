import numpy as np
import pytest

from promptcd.backends import TableModelSpec, TableRule, _freeze_steps

ACCEPTANCE_LINES: list[str] = []


def random_table_spec(rng: np.random.Generator, vocab_size=None, n_steps=None) -> TableModelSpec:
    """Table model with distinct positive/negative rules and random logits."""
    v = vocab_size or int(rng.integers(4, 33))
    steps = n_steps or int(rng.integers(1, 17))
    vocab = ["<unk>", "<pos>", "<neg>"] + [f"t{i}" for i in range(v - 3)]

    def rand_steps():
        return _freeze_steps(rng.normal(0, 2, size=(steps, v)))

    return TableModelSpec(
        vocab=tuple(vocab),
        rules=(TableRule("<pos>", rand_steps()), TableRule("<neg>", rand_steps())),
        default_steps=rand_steps(),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
