import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from idsan.embstore import from_arrays, normalize
from idsan.synth import SynthConfig, generate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_set(rng, m=12, n=5, d=16, splits=(6, 3, 3), tag="rand"):
    """Unit-norm Gaussian set with identity offsets and a train/val/test split."""
    centers = rng.standard_normal((m, d))
    x = centers.repeat(n, axis=0) + 0.3 * rng.standard_normal((m * n, d))
    labels = [f"p{i:03d}" for i in range(m) for _ in range(n)]
    names = [f"p{i:03d}" for i in range(m)]
    a, b, _ = splits
    split_map = {"train": names[:a], "val": names[a : a + b], "test": names[a + b :]}
    return normalize(from_arrays(x, labels, split_map, balanced_n=n, tag=tag))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_set(rng):
    return random_set(rng)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(identities=120, images_per_identity=8, splits=(96, 12, 12), seed=3)
    return generate(cfg)


@pytest.fixture(scope="session")
def default_synth():
    return generate(SynthConfig())


# -- acceptance summary -----------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" and rep.passed:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["details"].extend(getattr(item, "acceptance_details", []))


@pytest.fixture
def detail(request):
    """Attach a short measured-value note to this criterion's summary line."""
    notes = []
    request.node.acceptance_details = notes
    return notes.append


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        note = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}" + (f"  [{note}]" if note else ""))
