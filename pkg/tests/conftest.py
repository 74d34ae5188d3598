import pytest

from tpidm import config as cfgmod

TINY_INI = """\
[dataset]
n = 3000
segments = 2000:300:1.5; 2500:300:1.5
train_end = 1500
window = 20
eval_normal = 30
eval_anomalous = 20

[model]
encoder = 3, 4
decoder = 3, 2
steps = 20

[training]
epochs = 2
batch_size = 64

[detection]
elbo_steps = 5
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI, encoding="utf-8")
    return path


@pytest.fixture
def tiny_cfg():
    return cfgmod.loads(TINY_INI)


ACCEPTANCE = pytest.StashKey[list]()


class _Verdict:
    def __init__(self, lines: list, number: int, title: str):
        self.lines, self.number, self.title = lines, number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)
        print(f"  criterion {self.number}: {text}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None and exc_type is not AssertionError:
            detail = f"{detail}; {exc_type.__name__}: {exc}" if detail else f"{exc_type.__name__}: {exc}"
        line = f"criterion {self.number:>2} {status}: {self.title}" + (f" ({detail})" if detail else "")
        self.lines.append(line)
        print(line)
        return False


@pytest.fixture
def verdict(request):
    """``with verdict(n, title) as v:`` records one PASS/FAIL line for criterion ``n``."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])
    return lambda number, title: _Verdict(lines, number, title)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.line(line)
