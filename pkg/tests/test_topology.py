import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dmgda.topology import (
    DisconnectedGraphError, MixingValidationError, build_mixing, from_edge_file, mix,
    read_edge_list, spectral_gap, validate_mixing,
)

FAMILIES = ("complete", "ring", "path", "grid2d")


def test_complete_four_is_uniform_average():
    W = build_mixing("complete", 4)
    assert np.array_equal(W.weights, np.full((4, 4), 0.25))
    assert W.nu == 0.0


def test_single_node_ring():
    W = build_mixing("ring", 1)
    assert np.array_equal(W.weights, [[1.0]])
    assert W.nu == 0.0


def test_ring_four_metropolis_weights_and_nu():
    W = build_mixing("ring", 4)
    expected = np.array([[1, 1, 0, 1], [1, 1, 1, 0], [0, 1, 1, 1], [1, 0, 1, 1]]) / 3
    np.testing.assert_allclose(W.weights, expected, atol=1e-15)
    # circulant oracle: eigenvalues 1/3 + (2/3) cos(2 pi k / 4)
    eig = 1 / 3 + 2 / 3 * np.cos(2 * np.pi * np.arange(4) / 4)
    assert abs(W.nu - np.sort(np.abs(eig))[-2]) <= 1e-12
    assert abs(W.nu - 1 / 3) <= 1e-12


@pytest.mark.parametrize("m", [2, 3, 5, 8])
def test_complete_nu_is_exactly_zero(m):
    assert spectral_gap(build_mixing("complete", m)) == 0.0


def test_path_two_nodes():
    W = build_mixing("path", 2)
    np.testing.assert_array_equal(W.weights, np.full((2, 2), 0.5))
    assert W.nu == 0.0


def test_identity_fails_nu_check():
    report = validate_mixing(np.eye(2))
    failed = {c.name for c in report.checks.values() if not c.passed}
    assert failed == {"nu_below_one"}
    with pytest.raises(MixingValidationError):
        report.raise_if_failed()


def test_complete_three_passes_all_checks():
    assert validate_mixing(np.full((3, 3), 1 / 3)).passed


def test_asymmetric_matrix_fails_symmetry_and_stochasticity():
    # columns sum to 1, rows to 1.1 and 0.9
    report = validate_mixing(np.array([[0.6, 0.5], [0.4, 0.5]]))
    failed = {c.name for c in report.checks.values() if not c.passed}
    assert failed == {"symmetry", "row_sums"}
    assert validate_mixing(np.array([[0.6, 0.4], [0.5, 0.5]])).checks["column_sums"].passed is False


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("weighting", ["metropolis", "lazy-uniform"])
@pytest.mark.parametrize("m", [1, 2, 3, 4, 6, 9, 16])
def test_every_constructed_matrix_validates(family, weighting, m):
    W = build_mixing(family, m, weighting)
    report = validate_mixing(W.weights)
    assert report.passed, report.checks
    assert 0.0 <= W.nu < 1.0
    assert not W.weights.flags.writeable


def test_lazy_uniform_is_half_identity_plus_half_max_degree():
    W = build_mixing("ring", 5, "lazy-uniform")
    # max-degree part: 1/d_max on edges, so a 2-regular ring gets 1/4 per edge
    np.testing.assert_allclose(np.diag(W.weights), 0.5)
    assert W.weights[0, 1] == 0.25
    P = build_mixing("path", 3, "lazy-uniform")
    np.testing.assert_allclose(np.diag(P.weights), [0.75, 0.5, 0.75])


def test_grid_shape_and_neighbors():
    W = build_mixing("grid2d", 6, shape=(2, 3))
    assert W.neighbors(0) == [0, 1, 3]
    assert W.neighbors(4) == [1, 3, 4, 5]
    with pytest.raises(ValueError):
        build_mixing("grid2d", 6, shape=(2, 2))


def test_custom_disconnected_reports_components():
    with pytest.raises(DisconnectedGraphError) as info:
        build_mixing("custom", 4, edges=[(0, 1), (2, 3)])
    assert sorted(map(sorted, info.value.components)) == [[0, 1], [2, 3]]


def test_unknown_family_and_weighting():
    with pytest.raises(ValueError):
        build_mixing("star", 4)
    with pytest.raises(ValueError):
        build_mixing("ring", 4, "uniform")


def test_edge_file_round_trip(tmp_path):
    path = tmp_path / "edges.txt"
    path.write_text("# a star\n0 1\n0 2\n0 3\n")
    assert read_edge_list(path) == [(0, 1), (0, 2), (0, 3)]
    W = from_edge_file(path)
    assert W.m == 4 and validate_mixing(W.weights).passed
    assert W.weights[0, 1] == pytest.approx(1 / 4)


def test_mix_examples():
    W = build_mixing("complete", 2)
    np.testing.assert_allclose(mix(W, np.eye(2)), np.full((2, 2), 0.5))
    R = build_mixing("ring", 4)
    out = mix(R, np.eye(4))
    for i in range(4):
        support = {(i - 1) % 4, i, (i + 1) % 4}
        for j in range(4):
            assert out[i, j] == pytest.approx(1 / 3 if j in support else 0.0, abs=1e-15)
    v = np.array([1.5, -2.0, 3.0])
    np.testing.assert_allclose(mix(R, np.tile(v, (4, 1))), np.tile(v, (4, 1)), atol=1e-15)
    with pytest.raises(ValueError):
        mix(R, np.ones((3, 2)))


graphs = st.sampled_from([(f, m, w) for f in FAMILIES for m in (1, 2, 3, 5, 8, 12)
                          for w in ("metropolis", "lazy-uniform")])


@settings(max_examples=1000, deadline=None)
@given(graph=graphs, data=st.data())
def test_mix_preserves_mean(graph, data):
    family, m, weighting = graph
    W = build_mixing(family, m, weighting)
    k = data.draw(st.integers(1, 4))
    V = data.draw(arrays(np.float64, (m, k), elements=st.floats(-1e3, 1e3, allow_nan=False)))
    out = mix(W, V)
    np.testing.assert_allclose(out.mean(axis=0), V.mean(axis=0), rtol=1e-12, atol=1e-9)
