import random

import numpy as np
import pytest
import torch

from multidesc import encoding as E
from multidesc.corpus import ArticleText, Entity


def make_corpus(texts):
    return {
        f"e{i}": Entity(f"e{i}", {"en": text}, {"en": text}, [])
        for i, text in enumerate(texts)
    }


def test_build_vocab_single_token():
    vocab = E.build_vocab(make_corpus(["a"]), max_size=10, languages=["en"])
    assert vocab.id_to_token == ["<pad>", "<bos>", "<eos>", "<unk>", "<lang:en>", "a"]
    assert vocab.id("a") == 5


def test_build_vocab_tie_break_lexicographic():
    vocab = E.build_vocab(make_corpus(["b a", "a b"]), max_size=10, languages=["en"])
    assert vocab.id("a") < vocab.id("b")


def test_build_vocab_overflow_maps_to_unk():
    vocab = E.build_vocab(make_corpus(["common common rare"]), max_size=1, languages=["en"])
    assert vocab.id("common") != E.UNK
    assert vocab.id("rare") == E.UNK


def test_build_vocab_ignores_reserved_lookalikes():
    vocab = E.build_vocab(make_corpus(["<pad> word <lang:en>"]), max_size=10, languages=["en"])
    assert vocab.id_to_token.count("<pad>") == 1
    assert vocab.id("word") > E.UNK


def test_vocab_roundtrip(tmp_path):
    vocab = E.build_vocab(make_corpus(["x y z"]), max_size=5, languages=["en", "ro"])
    vocab.save(tmp_path / "vocab.json")
    loaded = E.Vocabulary.load(tmp_path / "vocab.json")
    assert loaded.id_to_token == vocab.id_to_token
    assert loaded.lang_token_id("ro") == vocab.lang_token_id("ro")


def small_encoder(d_model=8, seed=0, vocab_size=50):
    torch.manual_seed(seed)
    embedding = torch.nn.Embedding(vocab_size, d_model, padding_idx=E.PAD)
    return E.TextEncoder(embedding, n_heads=2, n_layers=2, max_positions=16)


def small_vocab():
    corpus = make_corpus(["alpha beta gamma delta epsilon zeta eta theta"])
    return E.build_vocab(corpus, max_size=40, languages=["en"])


def test_encode_article_shape_contract():
    vocab = small_vocab()
    encoder = small_encoder()
    article = ArticleText("en", "alpha beta gamma delta epsilon")
    encoded = E.encode_article(article, encoder, vocab)
    assert encoded.matrix.shape == (5, 8)
    assert encoded.language == "en"
    assert torch.isfinite(encoded.matrix).all()


def test_encode_article_deterministic():
    vocab = small_vocab()
    encoder = small_encoder()
    article = ArticleText("en", "alpha beta gamma")
    m1 = E.encode_article(article, encoder, vocab).matrix
    m2 = E.encode_article(article, encoder, vocab).matrix
    assert torch.equal(m1, m2)


def test_encode_article_rejects_empty():
    vocab = small_vocab()
    encoder = small_encoder()
    with pytest.raises(E.EncodingError):
        E.encode_article(ArticleText("en", "   "), encoder, vocab)


def test_encoder_parameter_sensitivity():
    # perturbing one parameter must change the output (finite-difference sensitivity)
    vocab = small_vocab()
    encoder = small_encoder()
    article = ArticleText("en", "alpha beta")
    base = E.encode_article(article, encoder, vocab).matrix.clone()
    with torch.no_grad():
        encoder.layers[0].attn.q_proj.weight[0, 0] += 0.5
    perturbed = E.encode_article(article, encoder, vocab).matrix
    assert not torch.equal(base, perturbed)


def test_encode_article_truncates_to_max_positions():
    vocab = E.build_vocab(make_corpus([" ".join(f"t{i}" for i in range(40))]), 100, ["en"])
    encoder = small_encoder()
    article = ArticleText("en", " ".join(f"t{i}" for i in range(40)))
    encoded = E.encode_article(article, encoder, vocab)
    assert encoded.matrix.shape[0] == encoder.max_positions


def pooling_fixture():
    corpus = make_corpus(["alpha beta gamma delta"])
    vocab = E.build_vocab(corpus, 40, ["en", "de", "ro"])
    encoder = small_encoder(d_model=6, seed=3)
    return vocab, encoder


def test_pool_descriptions_excludes_target():
    vocab, encoder = pooling_fixture()
    entity = Entity("e1", {"en": "alpha"}, {"en": "alpha beta"}, [])
    pooled = E.pool_descriptions(entity, "en", encoder, vocab)
    assert pooled.is_null
    assert pooled.n_sources == 0
    assert torch.equal(pooled.vector, torch.zeros(6))


def test_pool_descriptions_mean_of_language_means():
    vocab, encoder = pooling_fixture()
    entity = Entity("e1", {}, {"de": "alpha beta", "ro": "gamma", "en": "delta"}, [])
    pooled = E.pool_descriptions(entity, "en", encoder, vocab)
    d_de = encoder.encode_batch([vocab.encode(["alpha", "beta"])])[0].mean(dim=0)
    d_ro = encoder.encode_batch([vocab.encode(["gamma"])])[0].mean(dim=0)
    assert pooled.n_sources == 2
    assert torch.allclose(pooled.vector, (d_de + d_ro) / 2, atol=1e-6)


def test_pool_descriptions_single_source_passthrough():
    vocab, encoder = pooling_fixture()
    entity = Entity("e1", {}, {"de": "alpha beta gamma"}, [])
    pooled = E.pool_descriptions(entity, "en", encoder, vocab)
    d_de = encoder.encode_batch([vocab.encode(["alpha", "beta", "gamma"])])[0].mean(dim=0)
    assert torch.allclose(pooled.vector, d_de, atol=1e-7)


def test_pool_descriptions_target_leak_prohibited():
    vocab, encoder = pooling_fixture()
    entity = Entity("e1", {}, {"en": "alpha", "de": "beta"}, [])
    base = E.pool_descriptions(entity, "en", encoder, vocab).vector.clone()
    entity.descriptions["en"] = "gamma delta gamma"
    mutated = E.pool_descriptions(entity, "en", encoder, vocab).vector
    assert torch.equal(base, mutated)
    del entity.descriptions["en"]
    removed = E.pool_descriptions(entity, "en", encoder, vocab).vector
    assert torch.equal(base, removed)


def test_pool_descriptions_language_order_invariant():
    vocab, encoder = pooling_fixture()
    a = Entity("e1", {}, {"de": "alpha", "ro": "beta"}, [])
    b = Entity("e1", {}, {"ro": "beta", "de": "alpha"}, [])
    va = E.pool_descriptions(a, "en", encoder, vocab).vector
    vb = E.pool_descriptions(b, "en", encoder, vocab).vector
    assert torch.allclose(va, vb, atol=1e-9)


def test_type_representation_mean_of_resolved():
    table = E.TypeEmbeddingTable({"t1": np.array([1.0, 0.0]), "t2": np.array([0.0, 1.0])})
    entity = Entity("e1", {}, {}, ["t1", "t2"])
    np.testing.assert_allclose(E.type_representation(entity, table), [0.5, 0.5])


def test_type_representation_empty_falls_back_to_global_mean():
    table = E.TypeEmbeddingTable({"t1": np.array([1.0, 0.0]), "t2": np.array([0.0, 1.0])})
    entity = Entity("e1", {}, {}, [])
    np.testing.assert_allclose(E.type_representation(entity, table), [0.5, 0.5])


def test_type_representation_unresolved_fixture():
    table = E.TypeEmbeddingTable(
        {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0]), "c": np.array([1.0, 1.0])}
    )
    entity = Entity("e1", {}, {}, ["zzz"])
    np.testing.assert_allclose(E.type_representation(entity, table), [2 / 3, 2 / 3])


def test_type_representation_permutation_invariant():
    table = E.TypeEmbeddingTable({"t1": np.array([1.0, 0.0]), "t2": np.array([0.0, 2.0])})
    forward = E.type_representation(Entity("e", {}, {}, ["t1", "t2"]), table)
    backward = E.type_representation(Entity("e", {}, {}, ["t2", "t1"]), table)
    np.testing.assert_allclose(forward, backward)


def test_type_table_global_mean_tracks_changes():
    table = E.TypeEmbeddingTable({"t1": np.array([2.0, 0.0])})
    np.testing.assert_allclose(table.global_mean, [2.0, 0.0])
    table["t2"] = np.array([0.0, 2.0])
    np.testing.assert_allclose(table.global_mean, [1.0, 1.0])


def test_type_table_dimension_mismatch():
    table = E.TypeEmbeddingTable({"t1": np.array([1.0, 2.0])})
    with pytest.raises(E.EncodingError, match="dim"):
        table["t2"] = np.array([1.0, 2.0, 3.0])


def test_type_table_roundtrip(tmp_path):
    table = E.TypeEmbeddingTable.random(["t1", "t2", "t3"], dim=4, seed=9)
    table.save(tmp_path / "types.tsv")
    loaded = E.TypeEmbeddingTable.load(tmp_path / "types.tsv")
    for key in table.ids():
        np.testing.assert_array_equal(table[key], loaded[key])


def test_select_query_language_infer_prefers_target():
    entity = Entity("e1", {"en": "a", "de": "b"}, {"en": "d"}, [])
    assert E.select_query_language(entity, "en", "infer", random.Random(0)) == "en"


def test_select_query_language_single_article():
    entity = Entity("e1", {"ro": "a"}, {"ro": "d"}, [])
    assert E.select_query_language(entity, "ro", "train", random.Random(0)) == "ro"
    assert E.select_query_language(entity, "en", "infer", random.Random(0)) == "ro"


def test_select_query_language_train_uniform():
    entity = Entity("e1", {"en": "a", "de": "b", "fr": "c"}, {"en": "d"}, [])
    rng = random.Random(42)
    counts = {"en": 0, "de": 0, "fr": 0}
    n = 10_000
    for _ in range(n):
        counts[E.select_query_language(entity, "en", "train", rng)] += 1
    sigma = (n * (1 / 3) * (2 / 3)) ** 0.5
    for lang in counts:
        assert abs(counts[lang] - n / 3) < 3 * sigma


def test_select_query_language_no_articles_error():
    entity = Entity("e1", {}, {"en": "d"}, [])
    with pytest.raises(E.EncodingError, match="no article"):
        E.select_query_language(entity, "en", "infer", random.Random(0))


def test_encoding_uses_only_first_paragraph():
    from multidesc.corpus import first_paragraph

    vocab = small_vocab()
    encoder = small_encoder()
    raw = "alpha beta gamma\n\nsecond paragraph to be ignored entirely"
    trimmed = E.encode_article(ArticleText("en", first_paragraph(raw)), encoder, vocab).matrix
    direct = E.encode_article(ArticleText("en", "alpha beta gamma"), encoder, vocab).matrix
    assert torch.equal(trimmed, direct)
