import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--llm-endpoint",
        action="store",
        type=str,
        default=None,
        help="Completion endpoint for system tests against a remote LLM",
    )
    parser.addoption(
        "--encoder-endpoint",
        action="store",
        type=str,
        default=None,
        help="Embedding endpoint for system tests against a remote text encoder",
    )


@pytest.fixture
def llm_endpoint(request):
    return request.config.getoption("--llm-endpoint")


@pytest.fixture
def encoder_endpoint(request):
    return request.config.getoption("--encoder-endpoint")
