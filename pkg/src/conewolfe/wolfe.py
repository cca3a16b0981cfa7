"""Active-set min-norm-point solver for the dual cone program.

The dual objective g(z) = ||U z||^2 + p'z is minimized over the product of
capped second-order cones by alternating two steps:

* an outer step that asks a linear minimization oracle (LMO) for the
  feasible point most aligned with -grad g and adds it to an active set of
  atoms, and
* an inner loop that minimizes g over the affine hull of the active atoms
  and, whenever the affine minimizer leaves the simplex, walks back to the
  boundary and drops the atoms whose coefficients hit zero.

The iterate is always the convex combination z = sum_k alpha_k a_k, so it
stays feasible for free.  Per-atom products U a and p'a are cached; the
gradient 2 U'(U z) + p then costs one n-by-dim product per outer step
regardless of how many atoms are active.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import baselines
from .socp import DualPoint, DualSocp, SolveReport, suboptimality

Array = np.ndarray

#: Reciprocal-condition threshold below which the Gram solve falls back to
#: a minimum-norm least-squares solution.
_RCOND_FLOOR = 1e-12


class Atom:
    """A feasible dual point stored block-sparsely.

    LMO output has, per cone block, either the zero pair or the extreme pair
    (-lam_max * w/||w||, lam_max); only the nonzero blocks are stored.  Warm
    starts are wrapped the same way and may populate every block.
    """

    __slots__ = ("blocks",)

    def __init__(self, blocks: dict[int, tuple[Array, float]]):
        self.blocks = blocks

    @classmethod
    def zero(cls) -> "Atom":
        return cls({})

    @classmethod
    def from_dense(cls, z: Array, L: int, m: int) -> "Atom":
        blocks = {}
        w = m + 1
        for i in range(L):
            piece = z[i * w : (i + 1) * w]
            if np.any(piece != 0.0):
                blocks[i] = (piece[:m].copy(), float(piece[m]))
        return cls(blocks)

    @property
    def is_zero(self) -> bool:
        return not self.blocks

    def dense(self, L: int, m: int) -> Array:
        z = np.zeros((m + 1) * L)
        for i, (v, lam) in self.blocks.items():
            z[i * (m + 1) : i * (m + 1) + m] = v
            z[i * (m + 1) + m] = lam
        return z

    def equals(self, other: "Atom") -> bool:
        if self.blocks.keys() != other.blocks.keys():
            return False
        return all(
            lam == olam and np.array_equal(v, ov)
            for (v, lam), (ov, olam) in (
                (self.blocks[i], other.blocks[i]) for i in self.blocks
            )
        )

    def u_product(self, dual: DualSocp) -> Array:
        """U @ atom, accumulated over the nonzero blocks."""
        out = np.zeros(dual.n)
        for i, (v, lam) in self.blocks.items():
            sl = dual.block_slice(i)
            out += dual.U[:, sl] @ np.append(v, lam)
        return out

    def p_product(self, dual: DualSocp) -> float:
        out = 0.0
        for i, (v, lam) in self.blocks.items():
            sl = dual.block_slice(i)
            out += dual.p[sl] @ np.append(v, lam)
        return float(out)

    def feasibility_violation(self, lambda_max: float) -> float:
        worst = 0.0
        for v, lam in self.blocks.values():
            worst = max(worst, np.linalg.norm(v) - lam, lam - lambda_max)
        return worst


def lmo(gradient: Array, L: int, m: int, lambda_max: float) -> Atom:
    """Minimize z'g over the product of capped cones.

    Per block with gradient pieces (w, gamma): the minimum of v'w + lam*gamma
    over ||v|| <= lam <= lam_max is attained at (0, 0) when ||w|| - gamma <= 0
    (ties included) and at (-lam_max * w/||w||, lam_max) otherwise.
    """
    W = np.asarray(gradient, dtype=float).reshape(L, m + 1)
    wnorm = np.linalg.norm(W[:, :m], axis=1)
    blocks = {}
    for i in np.nonzero(wnorm - W[:, m] > 0.0)[0]:
        if wnorm[i] > 0.0:
            v = -lambda_max * W[i, :m] / wnorm[i]
        else:
            v = np.zeros(m)  # w = 0 with gamma < 0: any v works, pick 0
        blocks[int(i)] = (v, lambda_max)
    return Atom(blocks)


class ActiveSet:
    """Atoms, their convex coefficients, and the cached products.

    cached U@a vectors form the columns of ``Ua``; ``pa`` holds the p'a
    values.  Both are append/drop-coherent with ``atoms`` at all times.
    """

    def __init__(self, dual: DualSocp):
        self.dual = dual
        self.atoms: list[Atom] = []
        self.alpha = np.zeros(0)
        self.Ua = np.zeros((dual.n, 0))
        self.pa = np.zeros(0)

    def __len__(self) -> int:
        return len(self.atoms)

    def add(self, atom: Atom, coefficient: float = 0.0) -> None:
        self.atoms.append(atom)
        self.alpha = np.append(self.alpha, coefficient)
        self.Ua = np.column_stack([self.Ua, atom.u_product(self.dual)])
        self.pa = np.append(self.pa, atom.p_product(self.dual))

    def drop(self, indices: Sequence[int]) -> None:
        keep = [k for k in range(len(self.atoms)) if k not in set(indices)]
        self.atoms = [self.atoms[k] for k in keep]
        self.alpha = self.alpha[keep]
        self.Ua = self.Ua[:, keep]
        self.pa = self.pa[keep]

    def zero_index(self) -> int | None:
        for k, a in enumerate(self.atoms):
            if a.is_zero:
                return k
        return None

    def uz(self) -> Array:
        return self.Ua @ self.alpha

    def dense_z(self) -> Array:
        z = np.zeros(self.dual.dim)
        w = self.dual.m + 1
        for atom, coef in zip(self.atoms, self.alpha):
            for i, (v, lam) in atom.blocks.items():
                z[i * w : i * w + self.dual.m] += coef * v
                z[i * w + self.dual.m] += coef * lam
        return z

    def gradient(self) -> Array:
        return 2.0 * (self.dual.U.T @ self.uz()) + self.dual.p

    def objective(self) -> float:
        Uz = self.uz()
        return float(Uz @ Uz + self.pa @ self.alpha)

    def max_cache_error(self) -> float:
        """Worst mismatch between cached products and a from-scratch recompute."""
        worst = 0.0
        for k, atom in enumerate(self.atoms):
            worst = max(worst, float(np.max(np.abs(self.Ua[:, k] - atom.u_product(self.dual)))))
            worst = max(worst, abs(self.pa[k] - atom.p_product(self.dual)))
        return worst


def _solve_gram(Q: Array, rhs: Array) -> tuple[Array, bool]:
    """Solve Q x = rhs, falling back to min-norm least squares when Q is
    numerically singular.  Returns (x, fallback_used)."""
    if Q.shape[0] == 0:
        return np.zeros_like(rhs), False
    try:
        cond = np.linalg.cond(Q)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or 1.0 / cond < _RCOND_FLOOR:
        x, *_ = np.linalg.lstsq(Q, rhs, rcond=None)
        return x, True
    return np.linalg.solve(Q, rhs), False


def affine_minimize(active: ActiveSet) -> tuple[Array, bool]:
    """Minimize g over the affine hull of the active atoms.

    Case 1 (no zero atom): with Q = (UA)'(UA) and q = A'p, the solution of
    min ||UA b||^2 + b'q  s.t.  1'b = 1 is b = -(Q^{-1}q + nu Q^{-1}1)/2
    with nu = -(1'Q^{-1}q + 2)/(1'Q^{-1}1).

    Case 2 (zero atom present): the nonzero coefficients solve the
    unconstrained problem, b_hat = -(A_hat'U'U A_hat)^{-1} A_hat'p / 2, and
    the zero atom absorbs 1 - 1'b_hat.

    Returns (beta, fallback_used); beta sums to one in both cases (callers
    must verify when the fallback engaged).
    """
    zero_k = active.zero_index()
    K = len(active)
    if zero_k is None:
        Q = active.Ua.T @ active.Ua
        x, fb1 = _solve_gram(Q, active.pa)
        y, fb2 = _solve_gram(Q, np.ones(K))
        denom = float(y.sum())
        if denom == 0.0 or not np.isfinite(denom):
            return np.full(K, np.nan), True
        nu = -(float(x.sum()) + 2.0) / denom
        return -0.5 * (x + nu * y), fb1 or fb2
    others = [k for k in range(K) if k != zero_k]
    beta = np.empty(K)
    if others:
        M = active.Ua[:, others]
        x, fb = _solve_gram(M.T @ M, active.pa[others])
        beta_hat = -0.5 * x
    else:
        beta_hat = np.zeros(0)
        fb = False
    beta[others] = beta_hat
    beta[zero_k] = 1.0 - beta_hat.sum()
    return beta, fb


def line_search_to_boundary(alpha: Array, beta: Array) -> tuple[float, Array]:
    """Largest step from alpha toward beta that keeps the coefficients >= 0.

    gamma* = min over {k : beta_k < 0} of alpha_k / (alpha_k - beta_k); the
    entries attaining it are clamped to exactly zero so the subsequent drop
    rule is deterministic.
    """
    neg = beta < 0.0
    if not np.any(neg):
        raise ValueError("beta has no negative entry; nothing to walk back from")
    ratios = np.full(beta.shape, np.inf)
    ratios[neg] = alpha[neg] / (alpha[neg] - beta[neg])
    gamma = float(ratios.min())
    new_alpha = gamma * beta + (1.0 - gamma) * alpha
    new_alpha[ratios == gamma] = 0.0
    return gamma, new_alpha


def solve(
    dual: DualSocp,
    max_outer: int = 500,
    tol: float = 1e-6,
    warm_start: Array | DualPoint | None = None,
    inner_cap: int = 100,
    validate: bool = False,
) -> SolveReport:
    """Run the active-set method until the sub-optimality drops below tol.

    The stopping measure is checked at the top of every outer iteration, so
    a warm start that is already optimal certifies itself in one iteration
    without an LMO call.  ``validate`` turns on per-iteration assertions of
    the solver invariants (feasibility, cache coherence, monotone descent)
    for use in tests.
    """
    if dual.primal is None:
        raise ValueError("dual carries no source primal; build it via transform_to_dual")
    t0 = time.perf_counter()
    L, m, lam_max = dual.L, dual.m, dual.lambda_max

    if warm_start is None:
        z0 = np.zeros(dual.dim)
    else:
        z0 = np.array(warm_start.z if isinstance(warm_start, DualPoint) else warm_start, dtype=float)
        if z0.shape != (dual.dim,):
            raise ValueError(f"warm start has shape {z0.shape}, expected ({dual.dim},)")
        if not DualPoint(z0, L, m).is_feasible(lam_max, tol=1e-12):
            z0 = baselines.project_dual(z0, L, m, lam_max)

    active = ActiveSet(dual)
    active.add(Atom.from_dense(z0, L, m), coefficient=1.0)

    inner_total = 0
    fallback = False
    stale = 0
    delta = np.inf
    outer = 0

    for outer in range(1, max_outer + 1):
        z = active.dense_z()
        if validate:
            assert DualPoint(z, L, m).is_feasible(lam_max, tol=1e-9), "iterate left the feasible set"
            assert active.max_cache_error() <= 1e-12 * (1.0 + float(np.abs(active.pa).max(initial=0.0)))
        delta = suboptimality(dual.primal, dual, z).delta
        if delta < tol:
            return SolveReport(
                fail=False, z_star=DualPoint(z, L, m), outer_iters=outer,
                inner_iters=inner_total, final_delta=delta,
                wall_time=time.perf_counter() - t0, fallback_used=fallback,
            )

        atom = lmo(active.gradient(), L, m, lam_max)
        if any(atom.equals(a) for a in active.atoms):
            # The oracle has nothing new to offer; one repeat can still help
            # (the previous inner loop may have stopped at the cap), two in a
            # row cannot.
            stale += 1
            if stale >= 2:
                break
        else:
            stale = 0
            active.add(atom, coefficient=0.0)

        g_before = active.objective() if validate else None
        for _ in range(inner_cap):
            inner_total += 1
            beta, fb = affine_minimize(active)
            fallback = fallback or fb
            if not np.all(np.isfinite(beta)) or abs(beta.sum() - 1.0) > 1e-6:
                # Degenerate Gram fallback; retire the oldest atom and retry.
                fallback = True
                if len(active) <= 1:
                    break
                active.drop([0])
                s = active.alpha.sum()
                active.alpha = active.alpha / s if s > 0 else np.append(np.zeros(len(active) - 1), 1.0)
                continue
            if beta.min() >= 0.0:
                active.alpha = beta
                break
            _, new_alpha = line_search_to_boundary(active.alpha, beta)
            active.alpha = new_alpha
            zero_ks = np.nonzero(active.alpha == 0.0)[0]
            if len(zero_ks) == len(active):
                active.alpha[-1] = 1.0  # numerical corner: keep a convex combination
                zero_ks = zero_ks[:-1]
            if len(zero_ks):
                active.drop(list(zero_ks))
        else:
            fallback = True  # inner cap hit
        if validate:
            g_after = active.objective()
            assert g_after <= g_before + 1e-9 * (1.0 + abs(g_before)), "inner loop increased g"

    z = active.dense_z()
    delta = suboptimality(dual.primal, dual, z).delta
    return SolveReport(
        fail=True, z_star=DualPoint(z, L, m), outer_iters=outer,
        inner_iters=inner_total, final_delta=delta,
        wall_time=time.perf_counter() - t0, fallback_used=fallback,
    )
