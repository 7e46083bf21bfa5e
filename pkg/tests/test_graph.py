import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gliomamil import autodiff as ad
from gliomamil.autodiff import Tensor
from gliomamil.errors import ConfigError, DegenerateInputError, DimensionError, EstimationError
from gliomamil.graph import (
    CooccurrenceMatrix,
    GraphParams,
    conditional,
    cosine_matrix,
    estimate_cooccurrence,
    gcn_forward,
    lc_loss,
)
from gliomamil.gradcheck import check_gradients

from conftest import autodiff_grad, central_diff, max_rel_err, scalar_of


class TestCooccurrence:
    def test_four_sample_example(self):
        m = np.array([[1, 1, 0], [1, 0, 0], [0, 0, 1], [0, 0, 1]])
        a = estimate_cooccurrence(m).A
        assert conditional(m.astype(bool), 0, 1) == 1.0
        assert conditional(m.astype(bool), 1, 0) == 0.5
        assert a[0, 1] == a[1, 0] == 0.75

    def test_identical_markers_give_ones(self):
        col = np.array([1, 0, 1, 1, 0])
        a = estimate_cooccurrence(np.stack([col, col, col], axis=1)).A
        assert np.array_equal(a, np.ones((3, 3)))

    def test_empty_raises(self):
        with pytest.raises(EstimationError):
            estimate_cooccurrence([])

    def test_never_altered_marker_is_smoothed(self):
        m = np.array([[1, 0, 0], [1, 0, 1], [0, 0, 1]])
        a = estimate_cooccurrence(m).A
        assert np.all(np.isfinite(a))
        assert np.isclose(conditional(m.astype(bool), 0, 1), 0.5)

    def test_from_marker_labels(self):
        from gliomamil.who import MarkerLabels

        labels = [MarkerLabels.from_markers(1, 1, 0, 0), MarkerLabels.from_markers(1, 0, 0, 0),
                  MarkerLabels.from_markers(0, 0, 1, 1), MarkerLabels.from_markers(0, 0, 1, 0)]
        assert estimate_cooccurrence(labels).A[0, 1] == 0.75

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.int8, st.tuples(st.integers(1, 40), st.just(3)), elements=st.integers(0, 1)))
    def test_symmetric_unit_diagonal_bounded(self, m):
        a = estimate_cooccurrence(m).A
        assert np.array_equal(a, a.T)
        assert np.array_equal(np.diag(a), np.ones(3))
        assert np.all((a >= 0) & (a <= 1))

    def test_manifest_round_trip(self, rng):
        a = rng.uniform(size=(3, 3))
        back = CooccurrenceMatrix.from_manifest(CooccurrenceMatrix(a).to_manifest()).A
        assert np.array_equal(a, back)

    def test_manifest_wrong_length(self):
        with pytest.raises(ConfigError):
            CooccurrenceMatrix.from_manifest("1 2 3")


class TestGCN:
    def test_identity_case_is_bitwise(self, rng):
        f = np.abs(rng.normal(size=(3, 5)))
        for alpha in (0.0, 0.1, 0.37, 1.0):
            out = gcn_forward(Tensor(f), np.eye(3), GraphParams(Tensor(np.eye(5)), alpha))
            assert np.array_equal(out.data, f)

    def test_alpha_zero_is_identity(self, rng):
        f = rng.normal(size=(3, 4))
        out = gcn_forward(Tensor(f), rng.uniform(size=(3, 3)), GraphParams(Tensor(rng.normal(size=(4, 4))), 0.0))
        assert np.array_equal(out.data, f)

    def test_matches_formula(self, rng):
        f, a, w = rng.normal(size=(3, 4)), rng.uniform(size=(3, 3)), rng.normal(size=(4, 4))
        mid = a @ f @ w
        mid = np.where(mid > 0, mid, 0.01 * mid)
        out = gcn_forward(Tensor(f), a, GraphParams(Tensor(w), 0.1)).data
        np.testing.assert_allclose(out, 0.1 * mid + 0.9 * f, rtol=1e-13, atol=1e-15)

    def test_batched_matches_single(self, rng):
        f, a, w = rng.normal(size=(4, 3, 5)), rng.uniform(size=(3, 3)), rng.normal(size=(5, 5))
        p = GraphParams(Tensor(w), 0.1)
        batched = gcn_forward(Tensor(f), a, p).data
        for i in range(4):
            np.testing.assert_allclose(batched[i], gcn_forward(Tensor(f[i]), a, p).data, rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            gcn_forward(Tensor(np.ones((2, 4))), np.eye(3), GraphParams(Tensor(np.eye(4))))
        with pytest.raises(DimensionError):
            gcn_forward(Tensor(np.ones((3, 4))), np.eye(3), GraphParams(Tensor(np.eye(3))))

    def test_alpha_range(self):
        with pytest.raises(ConfigError):
            GraphParams(Tensor(np.eye(2)), 1.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        f = Tensor(rng.normal(size=(3, 4)) * 0.3, True)
        w = Tensor(rng.normal(size=(4, 4)) * 0.3, True)
        a = rng.uniform(size=(3, 3))
        probe = rng.normal(size=(3, 4))
        err = check_gradients(lambda: ad.sum(gcn_forward(f, a, GraphParams(w, 0.1)) * Tensor(probe)), [f, w])
        assert err < 1e-3


class TestLCLoss:
    def test_zero_when_cosines_match(self):
        f = np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.0, 2.0]])
        unit = f / np.linalg.norm(f, axis=1, keepdims=True)
        a = unit @ unit.T
        assert abs(lc_loss(Tensor(f), a).item()) <= 1e-12

    def test_orthogonal_rows_half_matrix(self):
        a = np.full((3, 3), 0.5)
        np.fill_diagonal(a, 1.0)
        assert abs(lc_loss(Tensor(np.eye(3) * 3.0), a).item() - 1 / 6) <= 1e-12

    def test_duplicated_rows_identity(self):
        f = np.tile([[1.0, -2.0, 0.5]], (3, 1))
        assert abs(lc_loss(Tensor(f), np.eye(3)).item() - 6 / 9) <= 1e-12

    def test_matches_cosine_op_route(self, rng):
        f, a = rng.normal(size=(3, 6)), rng.uniform(size=(3, 3))
        via_op = ad.mse(cosine_matrix(Tensor(f)), Tensor(a)).item()
        assert abs(lc_loss(Tensor(f), a).item() - via_op) <= 1e-14

    def test_batched_is_mean(self, rng):
        f, a = rng.normal(size=(5, 3, 4)), rng.uniform(size=(3, 3))
        single = np.mean([lc_loss(Tensor(f[i]), a).item() for i in range(5)])
        assert abs(lc_loss(Tensor(f), a).item() - single) <= 1e-14

    def test_zero_row_degenerate(self):
        f = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        with pytest.raises(DegenerateInputError):
            lc_loss(Tensor(f), np.eye(3))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (3, 4), elements=st.floats(0.1, 5)),
           hnp.arrays(np.float64, (3, 3), elements=st.floats(0, 1)))
    def test_non_negative(self, f, a):
        assert lc_loss(Tensor(f), a).item() >= 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        f, a = rng.normal(size=(3, 5)), rng.uniform(size=(3, 3))
        build = lambda t: lc_loss(t, a)
        assert max_rel_err(autodiff_grad(build, f), central_diff(scalar_of(build), f)) < 1e-3
