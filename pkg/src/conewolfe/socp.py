"""Second-order cone programs in shifted-quadratic form, and their duals.

The primal problem is

    minimize    ||u + p_hat/2||^2
    subject to  ||B_i u + b_i|| <= c_i'u + d_i,    i = 1..L,

with u in R^n and every block sharing the row dimension m.  Its dual is a
quadratic over a product of (capped) second-order cones,

    minimize    ||U z||^2 + p'z
    subject to  ||v_i|| <= lam_i <= lam_max,       i = 1..L,

where z = [v_1; lam_1; ...; v_L; lam_L], the i-th column block of U is
(1/2)[B_i', -c_i] and p = U'p_hat - [b_1; -d_1; ...; b_L; -d_L].  A dual
point z maps back to the primal through u = -(p_hat/2 + U z).

This module owns the problem containers, the primal<->dual transform, the
composite sub-optimality measure used by every solver as stopping rule, and
the JSON interchange format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

Array = np.ndarray

#: Default cap on the dual cone heights; large enough to never bind in
#: practice while keeping the feasible set compact.
LAMBDA_MAX_DEFAULT = 1e4


class BlockDimensionError(ValueError):
    """A cone block's matrices disagree with the problem dimensions."""

    def __init__(self, block: int, message: str):
        super().__init__(f"cone block {block}: {message}")
        self.block = block


def _frozen(a, dtype=float) -> Array:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ConeBlock:
    """One constraint ||B u + b|| <= c'u + d."""

    B: Array
    b: Array
    c: Array
    d: float

    def __post_init__(self):
        B = _frozen(self.B)
        b = _frozen(self.b)
        c = _frozen(self.c)
        if B.ndim != 2:
            raise ValueError("B must be a matrix")
        if b.shape != (B.shape[0],):
            raise ValueError(f"b has length {b.shape}, expected ({B.shape[0]},)")
        if c.shape != (B.shape[1],):
            raise ValueError(f"c has length {c.shape}, expected ({B.shape[1]},)")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", float(self.d))

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def n(self) -> int:
        return self.B.shape[1]

    def margin(self, u: Array) -> float:
        """||B u + b|| - (c'u + d); feasible iff <= 0."""
        return float(np.linalg.norm(self.B @ u + self.b) - (self.c @ u + self.d))


@dataclass(frozen=True)
class PrimalSocp:
    """min ||u + p_hat/2||^2 over the intersection of L cone constraints."""

    p_hat: Array
    blocks: tuple[ConeBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "p_hat", _frozen(self.p_hat))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.p_hat.ndim != 1 or self.p_hat.size < 1:
            raise ValueError("p_hat must be a nonempty vector")
        if len(self.blocks) < 1:
            raise ValueError("need at least one cone block")
        n, m = self.p_hat.size, self.blocks[0].m
        for i, blk in enumerate(self.blocks):
            if blk.n != n:
                raise BlockDimensionError(i, f"has {blk.n} columns, problem has n={n}")
            if blk.m != m:
                raise BlockDimensionError(i, f"has {blk.m} rows, block 0 has m={m}")

    @property
    def n(self) -> int:
        return self.p_hat.size

    @property
    def m(self) -> int:
        return self.blocks[0].m

    @property
    def L(self) -> int:
        return len(self.blocks)

    def objective(self, u: Array) -> float:
        r = u + self.p_hat / 2.0
        return float(r @ r)

    def margins(self, u: Array) -> Array:
        """Constraint margins at u; all <= 0 iff u is feasible."""
        return np.array([blk.margin(u) for blk in self.blocks])

    def is_feasible(self, u: Array, tol: float = 0.0) -> bool:
        return bool(np.all(self.margins(u) <= tol))


@dataclass(frozen=True)
class DualSocp:
    """Dual data (U, p) plus cone layout; built by :func:`transform_to_dual`.

    Keeps a reference to the source primal so that the sub-optimality
    measure (which needs the primal constraint margins) can be evaluated
    from a dual point alone.
    """

    U: Array
    p: Array
    L: int
    m: int
    lambda_max: float
    primal: PrimalSocp | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "U", _frozen(self.U))
        object.__setattr__(self, "p", _frozen(self.p))
        if self.lambda_max <= 0:
            raise ValueError("lambda_max must be positive")
        if self.U.shape[1] != (self.m + 1) * self.L or self.p.shape != (self.U.shape[1],):
            raise ValueError("U/p shapes inconsistent with (m+1)L layout")

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def dim(self) -> int:
        """Length of the dual vector, (m+1)L."""
        return (self.m + 1) * self.L

    def block_slice(self, i: int) -> slice:
        w = self.m + 1
        return slice(i * w, (i + 1) * w)

    def objective(self, z: Array) -> float:
        Uz = self.U @ z
        return float(Uz @ Uz + self.p @ z)


def split_blocks(z: Array, L: int, m: int) -> Iterator[tuple[Array, float]]:
    """Yield (v_i, lam_i) pairs from the stacked dual layout."""
    w = m + 1
    for i in range(L):
        blk = z[i * w : (i + 1) * w]
        yield blk[:m], float(blk[m])


@dataclass(frozen=True)
class DualPoint:
    """A dual vector with its cone layout attached."""

    z: Array
    L: int
    m: int

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen(self.z))
        if self.z.shape != ((self.m + 1) * self.L,):
            raise ValueError("z length does not match (m+1)L")

    def blocks(self) -> Iterator[tuple[Array, float]]:
        return split_blocks(self.z, self.L, self.m)

    def is_feasible(self, lambda_max: float, tol: float = 0.0) -> bool:
        for v, lam in self.blocks():
            if np.linalg.norm(v) > lam + tol or lam > lambda_max + tol:
                return False
        return True


@dataclass(frozen=True)
class Suboptimality:
    """Components of the composite stopping measure.

    delta is the maximum of three normalized terms: duality gap over
    |primal objective|+1, worst primal infeasibility over the largest
    |c_i'u + d_i|+1, and worst dual infeasibility over the largest
    |lam_i|+1.  delta <= 0 certifies an optimal primal-dual pair.
    """

    primal_objective: float
    duality_gap: float
    primal_infeas: Array
    dual_infeas: Array
    delta: float


@dataclass
class SolveReport:
    """Outcome of one dual solve; shared by every solver in the package."""

    fail: bool
    z_star: DualPoint
    outer_iters: int
    inner_iters: int
    final_delta: float
    wall_time: float
    fallback_used: bool = False

    def to_json_dict(self) -> dict:
        return {
            "fail": bool(self.fail),
            "outer": int(self.outer_iters),
            "inner": int(self.inner_iters),
            "delta": float(self.final_delta),
            "seconds": float(self.wall_time),
        }


def transform_to_dual(primal: PrimalSocp, lambda_max: float = LAMBDA_MAX_DEFAULT) -> DualSocp:
    """Assemble the dual data (U, p) from the primal blocks.

    Column block i of U is (1/2)[B_i', -c_i]; p = U'p_hat minus the
    stacked [b_i; -d_i] vector.
    """
    cols = [np.hstack([blk.B.T, -blk.c[:, None]]) for blk in primal.blocks]
    U = 0.5 * np.hstack(cols)
    shift = np.concatenate([np.append(blk.b, -blk.d) for blk in primal.blocks])
    p = U.T @ primal.p_hat - shift
    return DualSocp(U=U, p=p, L=primal.L, m=primal.m, lambda_max=float(lambda_max), primal=primal)


def recover_primal(dual: DualSocp, z: Array | DualPoint, p_hat: Array) -> Array:
    """Map a dual point to its primal candidate u = -(p_hat/2 + U z)."""
    zv = z.z if isinstance(z, DualPoint) else np.asarray(z, dtype=float)
    if zv.shape != (dual.dim,):
        raise ValueError(f"z has shape {zv.shape}, expected ({dual.dim},)")
    return -(np.asarray(p_hat, dtype=float) / 2.0 + dual.U @ zv)


def suboptimality(
    primal: PrimalSocp,
    dual: DualSocp,
    z: Array | DualPoint,
    Uz: Array | None = None,
) -> Suboptimality:
    """Evaluate the composite stopping measure at a dual point.

    Uz may be supplied by solver hot loops that already hold the product;
    when omitted it is recomputed from scratch, which is the verification
    path used by the benchmark harness.
    """
    zv = z.z if isinstance(z, DualPoint) else np.asarray(z, dtype=float)
    if Uz is None:
        Uz = dual.U @ zv
    f_p = float(Uz @ Uz)
    d_gap = 2.0 * f_p + float(dual.p @ zv)
    u = -(primal.p_hat / 2.0 + Uz)

    rhs = np.array([blk.c @ u + blk.d for blk in primal.blocks])
    lhs = np.array([np.linalg.norm(blk.B @ u + blk.b) for blk in primal.blocks])
    primal_infeas = lhs - rhs

    lam = np.empty(dual.L)
    vnorm = np.empty(dual.L)
    for i, (v, lam_i) in enumerate(split_blocks(zv, dual.L, dual.m)):
        lam[i] = lam_i
        vnorm[i] = np.linalg.norm(v)
    dual_infeas = vnorm - lam

    delta = max(
        d_gap / (abs(f_p) + 1.0),
        float(primal_infeas.max()) / (float(np.abs(rhs).max()) + 1.0),
        float(dual_infeas.max()) / (float(np.abs(lam).max()) + 1.0),
    )
    return Suboptimality(
        primal_objective=f_p,
        duality_gap=d_gap,
        primal_infeas=primal_infeas,
        dual_infeas=dual_infeas,
        delta=float(delta),
    )


# ---------------------------------------------------------------------------
# JSON interchange
#
# {"n": ..., "m": ..., "L": ..., "p_hat": [...],
#  "blocks": [{"B": [[...]], "b": [...], "c": [...], "d": ...}, ...]}
#
# Matrices are row-major nested lists of IEEE-754 doubles.  Writers may add
# extra top-level keys (e.g. "lambda_max", "warm_start"); readers ignore
# unknown keys.
# ---------------------------------------------------------------------------


def primal_to_dict(primal: PrimalSocp) -> dict:
    return {
        "n": primal.n,
        "m": primal.m,
        "L": primal.L,
        "p_hat": primal.p_hat.tolist(),
        "blocks": [
            {"B": blk.B.tolist(), "b": blk.b.tolist(), "c": blk.c.tolist(), "d": blk.d}
            for blk in primal.blocks
        ],
    }


def primal_from_dict(data: dict) -> PrimalSocp:
    blocks = tuple(
        ConeBlock(B=np.array(b["B"]), b=np.array(b["b"]), c=np.array(b["c"]), d=b["d"])
        for b in data["blocks"]
    )
    primal = PrimalSocp(p_hat=np.array(data["p_hat"]), blocks=blocks)
    for key, got, want in (("n", primal.n, data.get("n")),
                           ("m", primal.m, data.get("m")),
                           ("L", primal.L, data.get("L"))):
        if want is not None and got != want:
            raise ValueError(f"declared {key}={want} but blocks imply {key}={got}")
    return primal


def save_problem(path: str | Path, primal: PrimalSocp, **extra) -> None:
    data = primal_to_dict(primal)
    data.update(extra)
    Path(path).write_text(json.dumps(data) + "\n")


def load_problem(path: str | Path) -> tuple[PrimalSocp, dict]:
    """Read a problem file; returns (primal, extras) with extras holding any
    additional top-level keys such as lambda_max or warm_start."""
    data = json.loads(Path(path).read_text())
    primal = primal_from_dict(data)
    extras = {k: v for k, v in data.items() if k not in ("n", "m", "L", "p_hat", "blocks")}
    return primal, extras
