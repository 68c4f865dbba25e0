import numpy as np
import pytest

from dvio import marginalization as marg
from dvio.errors import LandmarkBlockNotDiagonal, UnknownStateId


def relative_frobenius(A, B):
    return np.linalg.norm(A - B) / max(1.0, np.linalg.norm(B))


def small_system():
    # two scalar blocks, H = [[2, 1], [1, 2]], b = (1, 1)
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, 1.0])
    layout = [("a", "landmark_1d"), ("b", "landmark_1d")]
    return marg.InformationSystem(H, b, layout)


def test_reorder_noop_and_unknown_id():
    sys = small_system()
    out = marg.reorder_for_marginalization(sys, set())
    assert np.array_equal(out.H, sys.H) and np.array_equal(out.b, sys.b)
    assert out.layout == sys.layout

    out = marg.reorder_for_marginalization(sys, {"a"})
    assert out.layout[0][0] == "a" and out.marginalized_prefix == 1
    with pytest.raises(UnknownStateId):
        marg.reorder_for_marginalization(sys, {"zzz"})


def test_reorder_matches_index_map_oracle():
    rng = np.random.default_rng(0)
    sys, _ = marg.synthetic_system(3, 4, "3d", rng)
    drop = {"lm1", "lm3", "pose0", "sb0"}
    out = marg.reorder_for_marginalization(sys, drop)

    # entry-by-entry re-indexing oracle
    old_index = {}
    offset = 0
    for sid, kind in sys.layout:
        size = marg.BLOCK_SIZES[kind]
        old_index[sid] = list(range(offset, offset + size))
        offset += size
    perm = [i for sid, _ in out.layout for i in old_index[sid]]
    assert np.array_equal(out.H, sys.H[np.ix_(perm, perm)])
    assert np.array_equal(out.b, sys.b[perm])

    # idempotent layout: reorder twice equals once
    again = marg.reorder_for_marginalization(out, drop)
    assert again.layout == out.layout
    assert np.array_equal(again.H, out.H)


def test_scalar_schur_example():
    sys = small_system()
    ordered = marg.reorder_for_marginalization(sys, {"a"})
    out = marg.marginalize_landmarks(ordered, "1d")
    assert out.H.shape == (1, 1)
    assert out.H[0, 0] == pytest.approx(1.5)
    assert out.b[0] == pytest.approx(0.5)

    oracle = marg.dense_schur_oracle(sys, {"a"})
    assert oracle.H[0, 0] == pytest.approx(1.5)
    assert oracle.b[0] == pytest.approx(0.5)


def test_decoupled_states_unchanged():
    H = np.diag([3.0, 5.0])
    b = np.array([1.0, 2.0])
    sys = marg.InformationSystem(H, b, [("a", "landmark_1d"), ("b", "landmark_1d")])
    out = marg.dense_schur_oracle(sys, {"a"})
    assert out.H[0, 0] == pytest.approx(5.0)
    assert out.b[0] == pytest.approx(2.0)


def test_oracle_identity_and_rank_zero_cases():
    # identity H_mm: H_new = H_rr - H_rm H_mr
    rng = np.random.default_rng(1)
    J = rng.normal(size=(8, 4))
    H = J.T @ J + np.eye(4)
    H[:2, :2] = np.eye(2)
    b = rng.normal(size=4)
    layout = [("m1", "landmark_1d"), ("m2", "landmark_1d"),
              ("r1", "landmark_1d"), ("r2", "landmark_1d")]
    sys = marg.InformationSystem(0.5 * (H + H.T), b, layout)
    out = marg.dense_schur_oracle(sys, {"m1", "m2"})
    expected = H[2:, 2:] - H[2:, :2] @ H[:2, 2:]
    assert np.allclose(out.H, expected, atol=1e-12)

    # zero dropped block with zero coupling: pseudo-inverse of zero is zero
    H2 = np.zeros((2, 2))
    H2[1, 1] = 4.0
    sys2 = marg.InformationSystem(H2, np.array([0.0, 1.0]),
                                  [("m", "landmark_1d"), ("r", "landmark_1d")])
    out2 = marg.dense_schur_oracle(sys2, {"m"})
    assert out2.H[0, 0] == pytest.approx(4.0)
    assert out2.b[0] == pytest.approx(1.0)


def test_landmark_block_not_diagonal_detected():
    H = np.array([[2.0, 0.5, 0.0], [0.5, 2.0, 0.0], [0.0, 0.0, 2.0]])
    b = np.zeros(3)
    layout = [("l0", "landmark_1d"), ("l1", "landmark_1d"), ("r", "landmark_1d")]
    sys = marg.InformationSystem(H, b, layout, marginalized_prefix=2)
    with pytest.raises(LandmarkBlockNotDiagonal):
        marg.marginalize_landmarks(sys, "1d")


@pytest.mark.parametrize("mode", ["1d", "3d"])
def test_fast_matches_oracle_random_systems(mode):
    rng = np.random.default_rng(2)
    for trial in range(25):
        K = int(rng.integers(3, 8))
        L = int(rng.integers(0, 50))
        sys, drop = marg.synthetic_system(K, L, mode, rng,
                                          rank_deficient_fraction=0.1,
                                          with_time_offset=trial % 3 == 0)
        fast, _ = marg.fast_marginalize(sys, drop, mode)
        oracle = marg.dense_schur_oracle(sys, drop)
        assert fast.layout == oracle.layout
        assert relative_frobenius(fast.H, oracle.H) <= 1e-9
        assert relative_frobenius(fast.b, oracle.b) <= 1e-9


def test_nav_block_only_and_rank_deficient_nav():
    rng = np.random.default_rng(3)
    sys, _ = marg.synthetic_system(4, 0, "1d", rng)
    drop = {"pose0", "sb0"}
    fast, _ = marg.fast_marginalize(sys, drop, "1d")
    oracle = marg.dense_schur_oracle(sys, drop)
    assert relative_frobenius(fast.H, oracle.H) <= 1e-9

    # dropped nav block with an exact null direction
    n = 21
    J = rng.normal(size=(40, n))
    null = rng.normal(size=15)
    null /= np.linalg.norm(null)
    # remove one direction from the dropped block's information
    J[:, :15] -= np.outer(J[:, :15] @ null, null)
    H = J.T @ J
    b = J.T @ rng.normal(size=40)
    layout = [("pose0", "pose"), ("sb0", "speed_bias"), ("pose1", "pose")]
    sys2 = marg.InformationSystem(0.5 * (H + H.T), b, layout)
    fast2, _ = marg.fast_marginalize(sys2, {"pose0", "sb0"}, "1d")
    oracle2 = marg.dense_schur_oracle(sys2, {"pose0", "sb0"})
    assert relative_frobenius(fast2.H, oracle2.H) <= 1e-6
    assert relative_frobenius(fast2.b, oracle2.b) <= 1e-6


def test_psd_preserved():
    rng = np.random.default_rng(4)
    for mode in ("1d", "3d"):
        sys, drop = marg.synthetic_system(5, 30, mode, rng)
        fast, _ = marg.fast_marginalize(sys, drop, mode)
        eigvals = np.linalg.eigvalsh(fast.H)
        assert eigvals.min() >= -1e-9 * max(np.abs(eigvals).max(), 1.0)


def test_landmark_elimination_order_independent():
    rng = np.random.default_rng(5)
    sys, drop = marg.synthetic_system(4, 12, "3d", rng)
    base = marg.dense_schur_oracle(sys, drop)

    # eliminate landmarks one at a time in a shuffled order, then the nav block
    order = [f"lm{l}" for l in rng.permutation(12)]
    current = sys
    for lm in order:
        current = marg.dense_schur_oracle(current, {lm})
    current = marg.dense_schur_oracle(current, {"pose0", "sb0"})
    assert relative_frobenius(current.H, base.H) <= 1e-10
    assert relative_frobenius(current.b, base.b) <= 1e-10


def test_prior_factor_reproduces_information():
    rng = np.random.default_rng(6)
    sys, drop = marg.synthetic_system(4, 20, "1d", rng)
    reduced, prior = marg.fast_marginalize(sys, drop, "1d")
    S = prior.sqrt_information
    assert relative_frobenius(S.T @ S, reduced.H) <= 1e-8

    # quadratic-form oracle: factor cost vs direct (H, b) evaluation
    const = prior.residual_offset @ prior.residual_offset
    for _ in range(100):
        dx = rng.normal(scale=0.1, size=reduced.dim)
        direct = const + 2.0 * reduced.b @ dx + dx @ reduced.H @ dx
        assert abs(prior.quadratic_cost(dx) - direct) <= 1e-8 * max(1.0, abs(direct))


def test_prior_factor_identity_case():
    layout = [("x", "pose")]
    sys = marg.InformationSystem(np.eye(6), np.zeros(6), layout)
    prior = marg.build_prior_factor(sys, {})
    assert np.allclose(prior.residual_for_delta(np.zeros(6)), 0.0)
    assert np.allclose(prior.sqrt_information.T @ prior.sqrt_information, np.eye(6), atol=1e-12)

    # tiny negative eigenvalue from numerical noise is clamped away
    H = np.eye(6)
    H[0, 0] = -1e-13
    sysn = marg.InformationSystem(H, np.zeros(6), layout)
    priorn = marg.build_prior_factor(sysn, {})
    Hrec = priorn.sqrt_information.T @ priorn.sqrt_information
    assert np.linalg.eigvalsh(Hrec).min() >= 0.0
