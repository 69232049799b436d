import logging

import pytest


@pytest.fixture(autouse=True)
def _restore_package_logger():
    """CLI runs reconfigure the package logger; hand it back to pytest afterwards"""
    yield
    package = logging.getLogger("lasso_ridge")
    for handler in list(package.handlers):
        package.removeHandler(handler)
        handler.close()
    package.propagate = True
    package.setLevel(logging.NOTSET)
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, logging.StreamHandler) and not type(handler).__module__.startswith("_pytest"):
            root.removeHandler(handler)
