import logging

import pytest


@pytest.fixture(autouse=True)
def _quiet_service_logs():
    """Service lifecycle chatter stays out of test output."""
    logging.getLogger("pht").setLevel(logging.ERROR)
    yield
