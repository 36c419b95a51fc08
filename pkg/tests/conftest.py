import pytest

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session", autouse=True)
def oracle_cache(tmp_path_factory):
    """Keep pseudo-true verification records out of the user's home directory."""
    path = tmp_path_factory.mktemp("oracle") / "pseudo_true.json"
    mp = pytest.MonkeyPatch()
    mp.setenv("MRGMM_CACHE", str(path.parent))
    yield path
    mp.undo()


@pytest.fixture
def record_criterion(request):
    """Register one acceptance line: ``record_criterion(number, passed, detail)``."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, passed: bool, detail: str) -> None:
        store[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, detail = store[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
