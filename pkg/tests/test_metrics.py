import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptsearch.autodiff import ParamBlock, Tape, Tensor, gradcheck, matmul_param
from adaptsearch.metrics import (
    class_centroids,
    cosine_distance,
    episode_loss,
    ncc_accuracy,
    proto_loss,
)


def test_cosine_distance_identical_vectors_is_zero():
    assert cosine_distance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(0.0, abs=1e-15)


def test_cosine_distance_bit_vectors():
    assert cosine_distance([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)


def test_cosine_distance_zero_vector_convention():
    assert cosine_distance([0, 0, 0, 0], [1, 0, 1, 0]) == 1.0
    assert cosine_distance([1, 0], [0, 0]) == 1.0
    assert cosine_distance([0, 0], [0, 0]) == 1.0


def test_cosine_distance_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        cosine_distance([1, 2], [1, 2, 3])


def test_centroid_one_shot_equals_the_embedding():
    cset = class_centroids(np.array([[2.0, 4.0]]), np.array([7]))
    np.testing.assert_array_equal(cset.centroids, [[2.0, 4.0]])
    np.testing.assert_array_equal(cset.labels, [7])


def test_centroid_is_arithmetic_mean():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    cset = class_centroids(emb, np.array([0, 0, 1]))
    np.testing.assert_allclose(cset.centroids[0], [0.5, 0.5])
    np.testing.assert_allclose(cset.centroids[1], [5.0, 5.0])


def test_centroids_invariant_under_row_permutation():
    rng = np.random.default_rng(5)
    emb = rng.standard_normal((12, 4))
    labels = rng.integers(0, 3, size=12)
    perm = rng.permutation(12)
    a = class_centroids(emb, labels)
    b = class_centroids(emb[perm], labels[perm])
    np.testing.assert_allclose(a.centroids, b.centroids)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_centroids_empty_input_raises():
    with pytest.raises(ValueError, match="non-empty"):
        class_centroids(np.zeros((0, 3)), np.array([], dtype=int))


def test_proto_loss_equidistant_two_classes_is_ln2():
    cset = class_centroids(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    q = np.array([[1.0, 1.0]])  # equal cosine distance to both centroids
    assert proto_loss(q, np.array([0]), cset) == pytest.approx(math.log(2.0), abs=1e-9)


def test_proto_loss_separated_centroids_matches_direct_softmax():
    # query at distance 0 from its centroid and 1 from the other
    cset = class_centroids(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    q = np.array([[1.0, 0.0]])
    # independent evaluation of -log softmax over logits (-0, -1)
    expected = -math.log(math.exp(0.0) / (math.exp(0.0) + math.exp(-1.0)))
    assert expected == pytest.approx(0.3132616875, abs=1e-9)
    assert proto_loss(q, np.array([0]), cset) == pytest.approx(expected, abs=1e-12)


def test_proto_loss_three_equidistant_classes_is_ln3():
    centroids = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    cset = class_centroids(centroids, np.array([0, 1, 2]))
    q = np.array([[1.0, 1.0, 1.0]])
    assert proto_loss(q, np.array([1]), cset) == pytest.approx(math.log(3.0), abs=1e-9)


def test_proto_loss_missing_centroid_raises():
    cset = class_centroids(np.eye(2), np.array([0, 1]))
    with pytest.raises(ValueError, match="without a support centroid"):
        proto_loss(np.array([[1.0, 0.0]]), np.array([5]), cset)


def test_proto_loss_non_negative_on_random_batches():
    rng = np.random.default_rng(11)
    for _ in range(25):
        emb = rng.standard_normal((10, 6))
        labels = rng.integers(0, 3, size=10)
        if len(np.unique(labels)) < 2:
            continue
        cset = class_centroids(emb, labels)
        assert proto_loss(emb, labels, cset) >= 0.0


def _brute_force_ncc(query_emb, query_labels, cset):
    """Independent per-query scan: explicit loops, explicit cosine."""
    correct = 0
    for q, label in zip(query_emb, query_labels):
        best_d, best_label = None, None
        for cl, c in zip(cset.labels, cset.centroids):
            d = cosine_distance(q, c)
            if best_d is None or d < best_d:
                best_d, best_label = d, cl
        correct += int(best_label == label)
    return correct / len(query_labels)


def test_ncc_query_on_its_own_support_point_is_correct():
    support = np.array([[1.0, 0.0], [0.0, 1.0]])
    cset = class_centroids(support, np.array([0, 1]))
    assert ncc_accuracy(np.array([[1.0, 0.0]]), np.array([0]), cset) == 1.0


def test_ncc_query_on_wrong_centroid_is_incorrect():
    cset = class_centroids(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    assert ncc_accuracy(np.array([[0.0, 1.0]]), np.array([0]), cset) == 0.0


def test_ncc_matches_brute_force_scan():
    rng = np.random.default_rng(23)
    for _ in range(100):
        support = rng.standard_normal((8, 5))
        s_labels = np.repeat(np.arange(4), 2)
        queries = rng.standard_normal((20, 5))
        q_labels = rng.integers(0, 4, size=20)
        cset = class_centroids(support, s_labels)
        assert ncc_accuracy(queries, q_labels, cset) == _brute_force_ncc(queries, q_labels, cset)


def test_ncc_argmin_tie_breaks_to_lowest_label():
    # both centroids at equal distance from the query
    cset = class_centroids(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([3, 8]))
    q = np.array([[1.0, 1.0]])
    assert ncc_accuracy(q, np.array([3]), cset) == 1.0
    assert ncc_accuracy(q, np.array([8]), cset) == 0.0


@given(scale=st.floats(min_value=1e-3, max_value=1e3), seed=st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_ncc_invariant_to_positive_rescaling(scale, seed):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((9, 4))
    labels = np.repeat(np.arange(3), 3)
    queries = rng.standard_normal((6, 4))
    q_labels = rng.integers(0, 3, size=6)
    cset = class_centroids(emb, labels)
    scaled = class_centroids(emb * scale, labels)
    assert ncc_accuracy(queries * scale, q_labels, scaled) == ncc_accuracy(queries, q_labels, cset)


def test_episode_loss_value_matches_plain_proto_loss():
    rng = np.random.default_rng(9)
    support = rng.standard_normal((6, 4))
    s_labels = np.repeat(np.arange(3), 2)
    queries = rng.standard_normal((5, 4))
    q_labels = rng.integers(0, 3, size=5)
    tape = Tape()
    loss = episode_loss(tape, Tensor(support), s_labels, Tensor(queries), q_labels)
    plain = proto_loss(queries, q_labels, class_centroids(support, s_labels))
    assert float(loss.data) == pytest.approx(plain, abs=1e-12)


def test_proto_loss_gradient_matches_finite_differences():
    # route the embeddings through ParamBlocks so gradcheck can probe them
    rng = np.random.default_rng(31)
    support_block = ParamBlock("support", rng.standard_normal((6, 4)))
    query_block = ParamBlock("query", rng.standard_normal((5, 4)))
    s_labels = np.repeat(np.arange(3), 2)
    q_labels = rng.integers(0, 3, size=5)

    def loss_fn(tape=None):
        s = matmul_param(Tensor(np.eye(6)), support_block, tape)
        q = matmul_param(Tensor(np.eye(5)), query_block, tape)
        return episode_loss(tape or Tape(), s, s_labels, q, q_labels) if tape else _value(s, q)

    def _value(s, q):
        cset = class_centroids(s.data, s_labels)
        return Tensor(proto_loss(q.data, q_labels, cset))

    tape = Tape()
    loss = loss_fn(tape=tape)
    tape.backward(loss)
    analytic = {b.id: b.grad.copy() for b in (support_block, query_block)}
    worst = gradcheck(
        lambda: float(loss_fn().data), [support_block, query_block], analytic
    )
    assert worst < 1e-4
