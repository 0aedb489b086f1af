from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tierann.dataset import Dataset, brute_force_topk, generate_synthetic
from tierann.hierarchy import build_levels

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data() -> Dataset:
    return generate_synthetic(3000, 16, 30, 0.08, seed=11)


@pytest.fixture(scope="session")
def small_queries() -> np.ndarray:
    return generate_synthetic(60, 16, 30, 0.08, seed=12).vectors


@pytest.fixture(scope="session")
def small_truth(small_data, small_queries):
    return brute_force_topk(small_data, small_queries, 10)


@pytest.fixture(scope="session")
def small_index(small_data):
    # 3000 -> 300 -> 30: two clustered levels and a 30-node root
    return build_levels(30, small_data, 0.1, seed=5)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        ok = all(p[0] for p in parts)
        detail = parts[0][1] if len(parts) == 1 else "; ".join(
            f"{d} [{'pass' if good else 'fail'}]" for good, d in parts)
        terminalreporter.write_line(f"criterion {c:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
