import numpy as np
import pytest

from groundprobe.captioner import END_ID, START_ID, ArchitectureKind, ModelParams

ALL_KINDS = list(ArchitectureKind)


def make_params(kind, V=12, m=7, h=8, D=10, seed=0, scale=0.3) -> ModelParams:
    """Random parameters for micro instances; biases random too so gradient
    paths through them are exercised."""
    rng = np.random.default_rng(seed)
    shapes = ModelParams.tensor_shapes(kind, V, m, h, D)
    arrays = {name: rng.uniform(-scale, scale, shape) for name, shape in shapes.items()}
    params = ModelParams(kind=kind, V=V, m=m, h=h, D=D, **arrays)
    params.validate()
    return params


def random_caption(rng, V, n_words) -> list[int]:
    """Caption body: n_words word ids (outside the reserved range) plus END."""
    body = [int(rng.integers(3, V)) for _ in range(n_words)]
    return [*body, END_ID]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=ALL_KINDS, ids=[k.tag for k in ALL_KINDS])
def kind(request):
    return request.param


@pytest.fixture(scope="session")
def mini_dataset():
    """Small shared dataset for trainer/analysis tests."""
    from groundprobe.synthworld import SynthConfig, generate_dataset

    return generate_dataset(SynthConfig(n_train=300, n_val=60, n_test=60,
                                        D=32, noise_std=0.05, seed=11))


def assert_full_tokens(tokens):
    assert tokens[0] == START_ID and tokens[-1] == END_ID
