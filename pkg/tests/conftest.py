import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and item.module.__name__ == "test_acceptance":
        label = getattr(item.function, "_criterion", None)
        if label:
            status = "PASS" if report.passed else "FAIL"
            print(f"\n[acceptance] criterion {label}: {status}")
