import pytest
import torch


@pytest.fixture(scope="session", autouse=True)
def single_thread_torch():
    # bit-reproducible reductions; the models are tiny so this is also faster
    torch.set_num_threads(1)
    yield
