import os
import tempfile

import pytest

# Keep the saved config of whoever runs the tests out of reach
os.environ["EINCONV_CUSTOM_PATH"] = tempfile.mkdtemp(prefix="einconv-tests-")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
