import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from osod_align.embeddings import (
    CapacityError,
    ClassEmbeddingTable,
    EmbeddingFormatError,
    cosine_similarity,
    load_embeddings,
    save_embeddings,
    synth_embeddings,
)


def test_load_two_classes():
    t = load_embeddings(b"dim=4\nhorse 1 0 0 0\nzebra 0 1 0 0\n")
    assert t.names == ("horse", "zebra") and t.dim == 4
    assert np.array_equal(t.vector("zebra"), [0, 1, 0, 0])


def test_load_renormalises():
    t = load_embeddings("dim=2\na 3 4\n")
    assert t.vector("a") == pytest.approx([0.6, 0.8])


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("dim=4\nhorse 0 0 0 0\n", "line 2"),
        ("dim=4\nhorse 1 0 0 0\ndog 1 0 0 0 0 0 0 0\n", "line 3"),
        ("dim=2\na 1 0\na 0 1\n", "duplicate"),
        ("dims=2\na 1 0\n", "line 1"),
        ("dim=2\na 1 x\n", "line 2"),
        ("", "empty"),
        ("dim=2\n", "no class"),
    ],
)
def test_load_errors_name_the_line(text, fragment):
    with pytest.raises(EmbeddingFormatError, match=fragment):
        load_embeddings(text)


def test_save_rejects_whitespace_names():
    t = ClassEmbeddingTable(["traffic light"], [[1.0, 0.0]])
    with pytest.raises(EmbeddingFormatError):
        save_embeddings(t)


@given(arrays(np.float64, (3, 5), elements=st.floats(-10, 10)).filter(lambda a: (np.linalg.norm(a, axis=1) > 1e-3).all()))
def test_save_load_round_trip_is_bit_exact(vecs):
    t = ClassEmbeddingTable(["a", "b", "c"], vecs)
    sink = io.StringIO()
    save_embeddings(t, sink)
    back = load_embeddings(sink.getvalue())
    assert back == t
    assert save_embeddings(back) == sink.getvalue()


def test_table_vectors_are_unit_and_read_only():
    t = ClassEmbeddingTable(["a", "b"], [[2.0, 0.0], [1.0, 1.0]])
    assert np.linalg.norm(t.vectors, axis=1) == pytest.approx([1.0, 1.0], abs=1e-6)
    with pytest.raises(ValueError):
        t.vectors[0, 0] = 5.0


def test_cosine_examples():
    u = np.array([1.0, 0.0])
    assert cosine_similarity(u, u) == 1.0
    assert cosine_similarity(u, [0.0, 1.0]) == 0.0
    assert cosine_similarity(u, np.array([1.0, 1.0]) / math.sqrt(2)) == pytest.approx(math.sqrt(2) / 2)
    with pytest.raises(ValueError):
        cosine_similarity(u, [0.0, 0.0])


vec3 = arrays(np.float64, 3, elements=st.floats(-100, 100)).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(vec3, vec3, st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_free(u, v, s):
    assert cosine_similarity(u, v) == pytest.approx(cosine_similarity(v, u))
    assert cosine_similarity(s * u, v) == pytest.approx(cosine_similarity(u, v), abs=1e-12)


def test_synth_unpaired_near_orthogonal():
    t = synth_embeddings(["a", "b", "c"], 8, seed=1)
    g = t.vectors @ t.vectors.T
    assert np.abs(g - np.eye(3)).max() <= 0.1


@given(st.integers(0, 10_000), st.floats(-0.95, 0.95))
def test_synth_pair_hits_target(seed, c):
    t = synth_embeddings(["horse", "dog", "zebra"], 6, seed, [("zebra", "horse", c)])
    assert cosine_similarity(t.vector("zebra"), t.vector("horse")) == pytest.approx(c, abs=0.05)
    assert abs(cosine_similarity(t.vector("dog"), t.vector("horse"))) <= 0.1


def test_synth_deterministic():
    args = (["horse", "zebra"], 4, 7, [("zebra", "horse", 0.8)])
    assert synth_embeddings(*args) == synth_embeddings(*args)
    assert synth_embeddings(*args) != synth_embeddings(args[0], 4, 8, args[3])


def test_synth_capacity_error():
    with pytest.raises(CapacityError):
        synth_embeddings(["a", "b", "c"], 2, 0)


@pytest.mark.parametrize("pairs", [[("a", "a", 0.5)], [("a", "b", 1.0)], [("a", "z", 0.5)], [("a", "b", 0.5), ("b", "a", 0.5)]])
def test_synth_rejects_bad_pairs(pairs):
    with pytest.raises(ValueError):
        synth_embeddings(["a", "b"], 4, 0, pairs)
