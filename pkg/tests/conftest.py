"""Shared fixtures and the acceptance summary.

Tests marked ``@pytest.mark.criterion(k)`` count towards acceptance criterion
``k``; a criterion passes when all of its tests pass. One line per criterion
is printed at the end of the session.
"""

from collections import defaultdict

import pytest

from strcn.config import load_config
from strcn.dataset import SyntheticSpec, generate_synthetic_dataset
from strcn.pipeline import ArtifactStore, Pipeline

_RESULTS = defaultdict(list)  # criterion -> [(test name, outcome, note)]
_NOTES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): counts towards acceptance criterion k")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _RESULTS[mark.args[0]].append((item.name, rep.outcome, _NOTES.pop(item.nodeid, "")))


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the acceptance summary."""
    def _note(text):
        _NOTES[request.node.nodeid] = text
    return _note


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(_RESULTS):
        rows = _RESULTS[k]
        ok = all(o == "passed" for _, o, _ in rows)
        details = "; ".join(f"{name}: {o}" + (f" ({n})" if n else "") for name, o, n in rows)
        tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {details}")


# synthetic corpus and cached pipelines -----------------------------------------------


@pytest.fixture(scope="session")
def corpus():
    """The reference synthetic set: 6 subjects x 10 sequences, 3 classes, 2 px motion."""
    return generate_synthetic_dataset(SyntheticSpec())


# the small configurations every slow test shares; flows and clips are cached per key
G_BASE = {"variant": "G", "crop.rows": "132", "crop.cols": "132", "augment.enabled": "false",
          "train.tol": "0", "model.feature_maps": "8"}
A_BASE = {"variant": "A", "crop.rows": "24", "crop.cols": "20", "augment.enabled": "false",
          "train.tol": "0", "model.feature_maps": "8"}


@pytest.fixture(scope="session")
def make_pipeline(corpus, tmp_path_factory):
    """``make_pipeline(base, **overrides)`` builds a pipeline over the reference set.

    Fold-independent artifacts are stored on disk per (variant, crop), so the
    optical flow of the whole corpus is computed once per session.
    """
    root = tmp_path_factory.mktemp("artifacts")
    manifest, sequences, tracks = corpus

    def build(base, **overrides):
        over = dict(base)
        over.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
        cfg = load_config(overrides=over)
        key = f"{cfg.variant}_{cfg.out_size[0]}x{cfg.out_size[1]}"
        stores = {s: ArtifactStore(root / key / s) for s in ("preprocess", "magnify", "encode")}
        return Pipeline(sequences, tracks, cfg, stores, n_classes=manifest.n_classes)

    return build
