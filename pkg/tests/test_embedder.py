import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reportgen import corpus as C
from reportgen import tensor as T
from reportgen.embedder import (EMBED_DIM, SentenceEmbedder, SentenceVector, cosine_similarity,
                                read_embeddings_csv, write_embeddings_csv)
from reportgen.gradcheck import check_gradients


@pytest.fixture(scope="module")
def synth():
    sc = C.generate_synthetic_corpus(6, 30, seed=2)
    vocab = C.build_vocabulary(sc.records, 3)
    recs = C.encode_records(sc.records, vocab)
    return sc, vocab, recs, SentenceEmbedder(vocab, seed=0)


def test_same_report_identical(synth):
    _, _, recs, emb = synth
    a, b = emb.embed_text(recs[0].tokens), emb.embed_text(recs[0].tokens)
    assert np.array_equal(a.values, b.values)
    assert cosine_similarity(a, b) == pytest.approx(1.0, abs=1e-12)


def test_dimension_and_unit_norm(synth):
    _, _, recs, emb = synth
    v = emb.embed_text(recs[3].tokens)
    assert v.values.shape == (EMBED_DIM,) == (384,)
    assert abs(np.linalg.norm(v.values) - 1.0) < 1e-6


def test_single_token_is_normalized_row(synth):
    _, vocab, _, emb = synth
    tid = vocab.id("heart")
    v = emb.embed_text([C.BOS, tid, C.EOS]).values
    row = emb.table[tid]
    np.testing.assert_allclose(v, row / np.linalg.norm(row), rtol=1e-12)


def test_all_special_is_flagged_zero(synth):
    emb = synth[3]
    v = emb.embed_text([C.BOS, C.EOS])
    assert v.flagged and not v.values.any()
    assert emb.embed_text([]).flagged


def test_one_hot_soft_equals_text_exactly(synth):
    _, _, recs, emb = synth
    for r in recs[:20]:
        soft = emb.embed_soft(emb.one_hot(r.tokens)).data
        assert np.array_equal(soft, emb.embed_text(r.tokens).values)


def test_uniform_distribution_is_mean_row(synth):
    emb = synth[3]
    v = len(emb.vocab)
    out = emb.embed_soft(np.full((4, v), 1.0 / v)).data
    mean = emb.table.mean(axis=0)
    np.testing.assert_allclose(out, mean / np.linalg.norm(mean), rtol=1e-10)


def test_non_normalized_distribution_rejected(synth):
    emb = synth[3]
    with pytest.raises(ValueError):
        emb.embed_soft(np.full((2, len(emb.vocab)), 0.5))


def test_embed_soft_gradient(synth):
    emb = synth[3]
    v = len(emb.vocab)
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, v))
    probe = rng.normal(size=EMBED_DIM)

    def fn(z):
        p = T.softmax(z, axis=-1)
        return T.tsum(emb.embed_soft(p, check=False) * T.Tensor(probe))

    assert check_gradients(fn, [logits]) <= 1e-4


def test_cosine_conventions():
    e = np.zeros(EMBED_DIM)
    e[0] = 1.0
    f = np.zeros(EMBED_DIM)
    f[1] = 1.0
    v = SentenceVector(e)
    assert cosine_similarity(v, v) == 1.0
    assert cosine_similarity(v, SentenceVector(-e)) == -1.0
    assert cosine_similarity(v, SentenceVector(f)) == 0.0
    assert cosine_similarity(v, SentenceVector(np.zeros(EMBED_DIM), True)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(4, 14))))
def test_permutation_invariance(perm):
    vocab = C.Vocabulary(list(C.SPECIALS) + [f"w{i}" for i in range(10)], 1)
    emb = SentenceEmbedder(vocab, seed=1)
    base = emb.embed_text(list(range(4, 14))).values
    np.testing.assert_allclose(emb.embed_text(perm).values, base, atol=1e-12)


def test_intra_topic_more_similar_than_inter(synth):
    sc, _, recs, emb = synth
    e = emb.embed_many([r.tokens for r in recs])
    lab = np.array([sc.labels[r.id] for r in recs])
    sim = e @ e.T
    same = lab[:, None] == lab[None, :]
    np.fill_diagonal(same, False)
    diff = lab[:, None] != lab[None, :]
    assert sim[same].mean() > sim[diff].mean()


def test_embedding_csv_roundtrip(tmp_path, synth):
    _, _, recs, emb = synth
    e = emb.embed_many([r.tokens for r in recs[:3]])
    write_embeddings_csv(tmp_path / "e.csv", [r.id for r in recs[:3]], e)
    back = read_embeddings_csv(tmp_path / "e.csv")
    np.testing.assert_allclose(back[recs[1].id], e[1], rtol=1e-12)
