import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq, seconds, sr=16000, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = pytest.StashKey[dict]()


class Criterion:
    def __init__(self, number: str, title: str, results: dict):
        self.number, self.title, self.results = number, title, results

    def verdict(self, ok: bool, detail: str) -> bool:
        line = f"criterion {self.number} ({self.title}): {'PASS' if ok else 'FAIL'} - {detail}"
        self.results[self.number] = line
        print(line)
        return ok


@pytest.fixture
def criterion(request):
    results = request.config.stash.setdefault(ACCEPTANCE, {})
    made = []

    def make(number, title: str) -> Criterion:
        c = Criterion(str(number), title, results)
        made.append(c)
        return c

    yield make
    for c in made:
        results.setdefault(c.number, f"criterion {c.number} ({c.title}): FAIL - raised before a verdict")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results, key=lambda k: (int(k.rstrip("ab")), k)):
            terminalreporter.write_line(results[number])
