import pytest

from multidesc import corpus as C
from multidesc import generator as G
from multidesc.encoding import TypeEmbeddingTable, build_vocab


def make_untrained(corpus, name="full", **config_overrides):
    """A TrainedModel wrapper around freshly initialized (untrained) weights."""
    config = G.named_config(name, **config_overrides)
    languages = sorted({l for e in corpus.values() for l in set(e.articles) | set(e.descriptions)})
    vocab = build_vocab(corpus, 5000, languages)
    types = sorted({t for e in corpus.values() for t in e.type_ids}) or ["<none>"]
    table = TypeEmbeddingTable.random(types, config.d_t, config.seed)
    model = G.build_model(vocab, config)
    return G.TrainedModel(model, vocab, config, table)


@pytest.fixture(scope="session")
def synth_corpus():
    spec = C.SyntheticSpec(
        n_entities=40,
        languages=["en", "de", "ro"],
        vocab_size=8,
        n_types=4,
        seed=7,
        missing_article_rate=0.2,
        missing_description_rate=0.2,
    )
    return C.generate_synthetic_corpus(spec)
