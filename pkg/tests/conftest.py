import sys

import numpy as np
import pytest

from contrast_sr.data import manifest_from_dir, write_bundled_set


@pytest.fixture(scope="session")
def bundled_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundled")
    write_bundled_set(root)
    return root


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def make_manifest(root, scale):
    return manifest_from_dir(root, scale)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not getattr(acceptance, "RAN", False):
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        status, desc = acceptance.RESULTS[n]
        terminalreporter.write_line(f"ACCEPTANCE {n}: {status} - {desc}")
