import numpy as np
import pytest
from PIL import Image

from octfusion.backbones import BACKBONE_ORDER, export_weights
from octfusion.data import CLASSES

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def weights_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("weights")
    for i, bid in enumerate(BACKBONE_ORDER):
        export_weights(bid, d / f"{bid.value}.weights", source="random", seed=100 + i)
    return d


def write_tree(root, per_class=3, size=(100, 120), seed=0, class_dirs=None):
    rng = np.random.default_rng(seed)
    for c in class_dirs or CLASSES:
        d = root / c
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            arr = rng.integers(0, 256, size=size, dtype=np.uint8)
            ext = "jpeg" if c == "DME" else "png"
            Image.fromarray(arr, mode="L").save(d / f"{c.lower()}-{i}.{ext}")
    return root


@pytest.fixture
def oct_tree(tmp_path):
    return write_tree(tmp_path / "oct")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, text in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {status}  {text}")
