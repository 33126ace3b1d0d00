import json
import re
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

from textures import texture  # noqa: E402

from aerodetect.data_io import ImageTensor, Label, ManifestRecord, save_image, write_manifest  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GOLDEN = Path(__file__).resolve().parent / "golden"


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    for var in ("AERODETECT_CACHE", "AERODETECT_DEVICE"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture(scope="session")
def golden():
    return json.loads((GOLDEN / "reference_values.json").read_text())


def random_pair(size, seed):
    rng = np.random.default_rng(seed)
    return (
        ImageTensor(rng.random((size, size, 3)).astype(np.float32)),
        ImageTensor(rng.random((size, size, 3)).astype(np.float32)),
    )


@pytest.fixture
def fixture_manifest(tmp_path):
    """Two real textures and their stub-blur reconstructions as generated."""
    from aerodetect.ae_backends import build_pool

    (blur,) = build_pool(["stub-blur"])
    recs = []
    for i in range(2):
        img = texture(7 + i, 128, 128)
        p_real = tmp_path / f"real{i}.png"
        p_gen = tmp_path / f"gen{i}.png"
        save_image(img, p_real)
        save_image(blur.reconstruct(img), p_gen)
        recs.append(ManifestRecord(p_real.name, Label.REAL, "real"))
        recs.append(ManifestRecord(p_gen.name, Label.GENERATED, "blurred", "stub-blur"))
    path = tmp_path / "m.jsonl"
    write_manifest(recs, path)
    return path


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m or report.when not in ("setup", "call"):
        return
    number, name = int(m.group(1)), m.group(2).replace("_", " ")
    if report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        ACCEPTANCE[number] = f"criterion {number} [SKIP] {name}: {reason}"
    elif report.failed and "[FAIL]" not in ACCEPTANCE.get(number, ""):
        ACCEPTANCE[number] = f"criterion {number} [FAIL] {name}: {report.longrepr.reprcrash.message if hasattr(report.longrepr, 'reprcrash') else 'error'}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
