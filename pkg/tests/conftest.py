import pytest

from smibench import ModelConfig, ModelFamily, build_vocab
from smibench.fixtures import generate_corpus


@pytest.fixture(scope="session")
def corpus500():
    """500 distinct synthetic SMILES used for round-trip and vocab tests."""
    return generate_corpus(500, seed=123, unique=True)


@pytest.fixture(scope="session")
def vocab(corpus500):
    return build_vocab(corpus500)


@pytest.fixture(scope="session")
def tiny_config_factory(vocab):
    def make(family, **overrides):
        kwargs = dict(
            family=family,
            hidden_size=8,
            intermediate_size=16,
            num_layers=1,
            num_heads=2,
            vocab_size=len(vocab),
            max_positions=32,
            num_properties=3,
        )
        kwargs.update(overrides)
        return ModelConfig(**kwargs)
    return make


ALL_FAMILIES = list(ModelFamily)
