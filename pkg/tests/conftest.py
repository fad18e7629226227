import pytest

from pointtpa.config import RunConfig


def small_config() -> RunConfig:
    """Default architecture on small scenes and splits, for fast training tests."""
    cfg = RunConfig()
    cfg.data.points = 256
    cfg.data.pretrain_scenes = 6
    cfg.data.train_scenes = 4
    cfg.data.val_scenes = 2
    cfg.train.pretrain_epochs = 1
    cfg.train.steps = 50
    return cfg.validate()


@pytest.fixture
def small_cfg() -> RunConfig:
    return small_config()


ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title} ({detail})"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
