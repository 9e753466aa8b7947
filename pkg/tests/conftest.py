import json

import pytest

TINY_EXPERIMENT = {
    "world": {"frames": 4, "height": 8, "width": 8, "max_blobs": 2, "min_separation": 3.0,
              "dense_ring": 2},
    "model": {"depth": 1, "dim": 16, "heads": 2, "patch": [2, 2, 2], "frames": 4, "height": 8,
              "width": 8, "time_dim": 16},
    "stage1": {"steps": 3, "batch_size": 4, "max_tracks": 10},
    "stage2": {"steps": 3, "batch_size": 4},
    "sampler": {"steps": 2},
    "eval": {"test_samples": 4, "batch_size": 4, "grid_prompts": 2},
    "train_samples": 12,
    "seed": 7,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_EXPERIMENT))
    return path


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line for the terminal summary."""
    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._criteria[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
