import os

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs, enabled with CHMOE_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get('CHMOE_SLOW') == '1':
        return
    skip = pytest.mark.skip(reason="set CHMOE_SLOW=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)
