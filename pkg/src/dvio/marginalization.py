"""Schur-complement marginalization of dropped states.

Two interchangeable paths compute the reduced information system
(H_new, b_new) after eliminating a drop set:

* dense_schur_oracle: eigendecomposition pseudo-inverse of the full
  dropped block, the reference implementation.
* fast_marginalize: two-step block elimination. Landmark blocks are
  mutually decoupled, so 1D landmarks are eliminated in one vectorized
  diagonal step and 3D landmarks via batched closed-form 3x3 inverses;
  the small remaining nav block is eliminated with an LDL factorization.

Both paths share the same relative eigenvalue/pivot floor so that
rank-deficient blocks are treated identically.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import LandmarkBlockNotDiagonal, ModeMismatch, UnknownStateId

BLOCK_SIZES = {
    "landmark_1d": 1,
    "landmark_3d": 3,
    "pose": 6,
    "speed_bias": 9,
    "time_offset": 1,
}

LANDMARK_KINDS = ("landmark_1d", "landmark_3d")

# Relative cutoff below which eigenvalues / pivots are treated as zero.
EIG_FLOOR = 1e-8


@dataclass
class InformationSystem:
    """Symmetric information matrix and residual vector in block layout.

    layout lists (state_id, kind) in storage order; marginalized_prefix is
    the number of leading blocks scheduled for elimination (0 for a plain
    system).
    """

    H: np.ndarray
    b: np.ndarray
    layout: list[tuple[Any, str]]
    marginalized_prefix: int = 0
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        offset = 0
        self._index = {}
        for state_id, kind in self.layout:
            size = BLOCK_SIZES[kind]
            self._index[state_id] = (offset, size, kind)
            offset += size
        if offset != self.H.shape[0] or offset != self.b.shape[0]:
            raise ValueError("layout sizes do not match matrix dimensions")

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def block_slice(self, state_id) -> slice:
        offset, size, _ = self._index[state_id]
        return slice(offset, offset + size)

    def kind_of(self, state_id) -> str:
        return self._index[state_id][2]

    def check_symmetric(self, tol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.abs(self.H).max()))
        return float(np.abs(self.H - self.H.T).max()) <= tol * scale


def reorder_for_marginalization(sys: InformationSystem, to_drop) -> InformationSystem:
    """Permute so dropped landmarks lead, then dropped nav blocks, then the rest.

    The permutation is a similarity transform; marginalized_prefix of the
    result counts the dropped blocks.
    """
    to_drop = set(to_drop)
    for state_id in to_drop:
        if state_id not in sys._index:
            raise UnknownStateId(f"{state_id!r} not in layout")

    dropped_lm = [e for e in sys.layout if e[0] in to_drop and e[1] in LANDMARK_KINDS]
    dropped_other = [e for e in sys.layout if e[0] in to_drop and e[1] not in LANDMARK_KINDS]
    remaining = [e for e in sys.layout if e[0] not in to_drop]
    new_layout = dropped_lm + dropped_other + remaining

    perm = np.concatenate([np.arange(*sys.block_slice(sid).indices(sys.dim))
                           for sid, _ in new_layout]) if new_layout else np.array([], dtype=int)
    return InformationSystem(sys.H[np.ix_(perm, perm)], sys.b[perm], new_layout,
                             marginalized_prefix=len(to_drop))


def _pinv_eigh(A: np.ndarray) -> np.ndarray:
    """Symmetric pseudo-inverse with the shared relative eigenvalue floor."""
    if A.size == 0:
        return A.copy()
    vals, vecs = np.linalg.eigh(0.5 * (A + A.T))
    cutoff = EIG_FLOOR * max(vals.max(initial=0.0), 0.0)
    inv = np.where(vals > cutoff, 1.0 / np.where(vals > cutoff, vals, 1.0), 0.0)
    return (vecs * inv) @ vecs.T


def dense_schur_oracle(sys: InformationSystem, to_drop) -> InformationSystem:
    """Single-step Schur complement via full eigendecomposition of H_mm."""
    ordered = reorder_for_marginalization(sys, to_drop)
    m = sum(BLOCK_SIZES[k] for _, k in ordered.layout[:ordered.marginalized_prefix])
    H, b = ordered.H, ordered.b
    Hmm_inv = _pinv_eigh(H[:m, :m])
    W = H[m:, :m] @ Hmm_inv
    H_new = H[m:, m:] - W @ H[:m, m:]
    b_new = b[m:] - W @ b[:m]
    return InformationSystem(0.5 * (H_new + H_new.T), b_new,
                             ordered.layout[ordered.marginalized_prefix:])


def _check_landmark_block_diagonal(H: np.ndarray, sizes: list[int]) -> None:
    n = sum(sizes)
    mask = np.ones((n, n), dtype=bool)
    offset = 0
    for s in sizes:
        mask[offset:offset + s, offset:offset + s] = False
        offset += s
    off = np.abs(H[:n, :n][mask])
    if off.size and off.max() > 1e-12 * max(1.0, np.abs(H[:n, :n]).max()):
        raise LandmarkBlockNotDiagonal(
            "distinct marginalized landmarks share information; factor indexing bug")


def _batched_3x3_inverse(blocks: np.ndarray) -> np.ndarray:
    """Closed-form adjugate inverses with pseudo-inverse fallback.

    blocks has shape (L, 3, 3); near-singular blocks (determinant below the
    shared floor on the trace scale) fall back to the eigendecomposition
    pseudo-inverse.
    """
    a = blocks
    det = (a[:, 0, 0] * (a[:, 1, 1] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 1])
           - a[:, 0, 1] * (a[:, 1, 0] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 0])
           + a[:, 0, 2] * (a[:, 1, 0] * a[:, 2, 1] - a[:, 1, 1] * a[:, 2, 0]))
    trace_scale = (np.trace(a, axis1=1, axis2=2) / 3.0) ** 3
    ok = np.abs(det) > EIG_FLOOR * np.maximum(trace_scale, 0.0)

    inv = np.zeros_like(a)
    safe_det = np.where(ok, det, 1.0)
    adj = np.empty_like(a)
    adj[:, 0, 0] = a[:, 1, 1] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 1]
    adj[:, 0, 1] = a[:, 0, 2] * a[:, 2, 1] - a[:, 0, 1] * a[:, 2, 2]
    adj[:, 0, 2] = a[:, 0, 1] * a[:, 1, 2] - a[:, 0, 2] * a[:, 1, 1]
    adj[:, 1, 0] = a[:, 1, 2] * a[:, 2, 0] - a[:, 1, 0] * a[:, 2, 2]
    adj[:, 1, 1] = a[:, 0, 0] * a[:, 2, 2] - a[:, 0, 2] * a[:, 2, 0]
    adj[:, 1, 2] = a[:, 0, 2] * a[:, 1, 0] - a[:, 0, 0] * a[:, 1, 2]
    adj[:, 2, 0] = a[:, 1, 0] * a[:, 2, 1] - a[:, 1, 1] * a[:, 2, 0]
    adj[:, 2, 1] = a[:, 0, 1] * a[:, 2, 0] - a[:, 0, 0] * a[:, 2, 1]
    adj[:, 2, 2] = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
    inv[ok] = adj[ok] / safe_det[ok, None, None]
    for idx in np.nonzero(~ok)[0]:
        inv[idx] = _pinv_eigh(a[idx])
    return inv


def marginalize_landmarks(sys: InformationSystem, mode: str) -> InformationSystem:
    """Eliminate the leading landmark blocks (Schur complement, step one).

    mode is '1d' or '3d'; the dropped landmark block must be (block-)
    diagonal, which holds by construction because distinct landmarks share
    no residual.
    """
    kind = {"1d": "landmark_1d", "3d": "landmark_3d"}.get(mode)
    if kind is None:
        raise ModeMismatch(f"unknown mode {mode!r}")
    prefix = sys.layout[:sys.marginalized_prefix]
    lm_entries = [e for e in prefix if e[1] in LANDMARK_KINDS]
    if any(e[1] != kind for e in lm_entries):
        raise ModeMismatch("landmark kind does not match the requested mode")
    if not lm_entries:
        return sys

    d = BLOCK_SIZES[kind]
    L = len(lm_entries)
    n = L * d
    _check_landmark_block_diagonal(sys.H, [d] * L)

    H, b = sys.H, sys.b
    C = H[n:, :n]
    if d == 1:
        h = np.diagonal(H)[:n].copy()
        cutoff = EIG_FLOOR * max(h.max(initial=0.0), 0.0)
        hinv = np.where(h > cutoff, 1.0 / np.where(h > cutoff, h, 1.0), 0.0)
        D = C * hinv
    else:
        blocks = np.stack([H[k * 3:k * 3 + 3, k * 3:k * 3 + 3] for k in range(L)])
        inv = _batched_3x3_inverse(blocks)
        C3 = C.reshape(C.shape[0], L, 3)
        D = np.einsum("rlj,ljk->rlk", C3, inv).reshape(C.shape[0], n)
    H_new = H[n:, n:] - D @ C.T
    b_new = b[n:] - D @ b[:n]
    return InformationSystem(0.5 * (H_new + H_new.T), b_new, sys.layout[L:],
                             marginalized_prefix=sys.marginalized_prefix - L)


def _ldl_clamped(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unpivoted LDL^T with small pivots clamped to zero.

    For a positive semidefinite block a vanishing pivot implies a vanishing
    row, so skipping it realizes the pseudo-inverse action.
    """
    m = A.shape[0]
    L = np.eye(m)
    dinv = np.zeros(m)
    work = A.copy()
    floor = EIG_FLOOR * max(np.diagonal(A).max(initial=0.0), 0.0)
    for k in range(m):
        pivot = work[k, k]
        if pivot <= floor:
            continue
        dinv[k] = 1.0 / pivot
        col = work[k + 1:, k] * dinv[k]
        L[k + 1:, k] = col
        work[k + 1:, k + 1:] -= np.outer(col, work[k, k + 1:])
    return L, dinv


def _ldl_solve(L: np.ndarray, dinv: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve (L D L^T) X = B with the clamped factorization."""
    m = L.shape[0]
    X = B.astype(float).copy()
    if X.ndim == 1:
        X = X[:, None]
        squeeze = True
    else:
        squeeze = False
    for k in range(m):
        X[k + 1:] -= np.outer(L[k + 1:, k], X[k])
    X *= dinv[:, None]
    for k in range(m - 1, -1, -1):
        X[k] -= L[k + 1:, k] @ X[k + 1:]
    return X[:, 0] if squeeze else X


def ldl_solve_clamped(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve the symmetric system A X = B with clamped-pivot LDL^T."""
    L, dinv = _ldl_clamped(A)
    return _ldl_solve(L, dinv, B)


def marginalize_nav_block(sys: InformationSystem) -> InformationSystem:
    """Eliminate the remaining (small, fixed-size) dropped block via LDL."""
    m = sum(BLOCK_SIZES[k] for _, k in sys.layout[:sys.marginalized_prefix])
    if m == 0:
        return sys
    H, b = sys.H, sys.b
    L, dinv = _ldl_clamped(H[:m, :m])
    X = _ldl_solve(L, dinv, np.hstack([H[:m, m:], b[:m, None]]))
    H_new = H[m:, m:] - H[m:, :m] @ X[:, :-1]
    b_new = b[m:] - H[m:, :m] @ X[:, -1]
    return InformationSystem(0.5 * (H_new + H_new.T), b_new,
                             sys.layout[sys.marginalized_prefix:])


@dataclass
class PriorFactor:
    """Square-root prior left behind by marginalization.

    residual(x) = residual_offset + sqrt_information @ (x [-] linearization),
    evaluated blockwise on the layout; sqrt_information^T sqrt_information
    reproduces the reduced H.
    """

    sqrt_information: np.ndarray
    residual_offset: np.ndarray
    layout: list[tuple[Any, str]]
    linearization_point: dict

    @property
    def dim(self) -> int:
        return self.sqrt_information.shape[1]

    def residual_for_delta(self, delta: np.ndarray) -> np.ndarray:
        return self.residual_offset + self.sqrt_information @ delta

    def quadratic_cost(self, delta: np.ndarray) -> float:
        r = self.residual_for_delta(delta)
        return float(r @ r)


def build_prior_factor(sys: InformationSystem, linearization_point: dict) -> PriorFactor:
    """Square-root factorization of (H, b) with negative eigenvalues clamped."""
    vals, vecs = np.linalg.eigh(0.5 * (sys.H + sys.H.T))
    cutoff = EIG_FLOOR * max(vals.max(initial=0.0), 0.0)
    keep = vals > cutoff
    lam = vals[keep]
    U = vecs[:, keep]
    sqrt_info = (U * np.sqrt(lam)).T
    offset = (U * (1.0 / np.sqrt(lam))).T @ sys.b
    return PriorFactor(sqrt_info, offset, list(sys.layout), linearization_point)


def fast_marginalize(sys: InformationSystem, to_drop, mode: str,
                     linearization_point: dict | None = None):
    """Full two-step elimination returning the reduced system and its prior."""
    ordered = reorder_for_marginalization(sys, to_drop)
    reduced = marginalize_landmarks(ordered, mode)
    reduced = marginalize_nav_block(reduced)
    prior = build_prior_factor(reduced, linearization_point or {})
    return reduced, prior


# ------------------------------------------------------- synthetic systems

def synthetic_system(K: int, L: int, mode: str, rng: np.random.Generator,
                     rank_deficient_fraction: float = 0.1,
                     with_time_offset: bool = False) -> tuple[InformationSystem, set]:
    """Random factor-graph-structured information system for tests/benchmarks.

    Builds H as a sum of J^T J contributions (prior, nav chain, per-landmark
    observations) so the system is PSD, landmark blocks are mutually
    decoupled, and b lies in the range of H. Returns (system, drop_set)
    where the drop set is the oldest nav state plus every landmark.
    A rank_deficient_fraction of landmarks get too few observations to be
    fully constrained.
    """
    kind = {"1d": "landmark_1d", "3d": "landmark_3d"}[mode]
    d = BLOCK_SIZES[kind]
    layout = [(f"lm{l}", kind) for l in range(L)]
    for k in range(K):
        layout += [(f"pose{k}", "pose"), (f"sb{k}", "speed_bias")]
    if with_time_offset:
        layout.append(("td", "time_offset"))

    dim = sum(BLOCK_SIZES[k] for _, k in layout)
    H = np.zeros((dim, dim))
    b = np.zeros(dim)
    index = {}
    offset = 0
    for sid, knd in layout:
        size = BLOCK_SIZES[knd]
        index[sid] = slice(offset, offset + size)
        offset += size

    def add_factor(ids, res_dim):
        cols = np.concatenate([np.arange(index[i].start, index[i].stop) for i in ids])
        J = rng.normal(size=(res_dim, cols.size))
        r = rng.normal(size=res_dim)
        H[np.ix_(cols, cols)] += J.T @ J
        b[cols] += J.T @ r

    add_factor(["pose0", "sb0"], 15)
    for k in range(K - 1):
        add_factor([f"pose{k}", f"sb{k}", f"pose{k + 1}", f"sb{k + 1}"], 15)

    n_deficient = int(round(rank_deficient_fraction * L))
    for l in range(L):
        lm = f"lm{l}"
        if l < n_deficient:
            if d == 1:
                continue  # zero-information scalar landmark
            ids = ["pose0", f"pose{rng.integers(1, K)}", lm]
            if with_time_offset:
                ids.append("td")
            add_factor(ids, 2)  # single 2-dim residual leaves a null direction
        else:
            n_obs = int(rng.integers(2, min(K, 4) + 1))
            frames = rng.choice(np.arange(1, K), size=min(n_obs, K - 1), replace=False)
            for j in frames:
                ids = ["pose0", f"pose{j}", lm]
                if with_time_offset:
                    ids.append("td")
                add_factor(ids, d)

    drop = {f"lm{l}" for l in range(L)} | {"pose0", "sb0"}
    return InformationSystem(0.5 * (H + H.T), b, layout), drop
