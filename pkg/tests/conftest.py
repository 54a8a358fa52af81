import pytest

from latentmath.datagen import GenerationConfig, generate_dataset, load_dataset

TINY = GenerationConfig(
    seed=3,
    num_train=60,
    num_dev=40,
    num_test=40,
    dev_instances=60,
    test_instances=60,
    multistep_premises=20,
)


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny")
    generate_dataset(TINY, path)
    return path


@pytest.fixture(scope="session")
def tiny(tiny_dir):
    return load_dataset(tiny_dir)


def pytest_terminal_summary(terminalreporter):
    import sys

    suite = sys.modules.get("test_acceptance")
    results = getattr(suite, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2} {status}: {title} [{detail}]")
