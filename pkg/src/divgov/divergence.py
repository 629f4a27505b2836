"""Density-function (divergence) stability checks.

Two densities are supported:

* the structured density built from three squares plus ``0.5*alpha*x3^2``,
  whose Lie derivative along the flow is the quadratic form ``z^T W z`` in
  ``z = (x1, x2, x3, phi)``;
* a quadratic density ``x^T Q x`` whose Lie derivative is ``z^T F0 z``.

Throughout, ``phi`` is the relay value ``-sign(x2)`` (see
:func:`divgov.model.relay`), and ``side = sign(x2)`` labels the half-space.
Everything is evaluated per half-space; nothing is defined on x2 = 0.

Useful identities (per half-space, ``div f = -(B+C)``):

    div(rho f) - rho div f           = grad(rho).f
    div(rho f) - rho^2 div(f / rho)  = 2 grad(rho).f
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from divgov.model import GovernorParams, LurieSystem, build_system

SAMPLING_RADII = (0.1, 1.0, 10.0)


def _side(x2, side):
    if side is None:
        if x2 == 0:
            raise ValueError("x2 = 0 lies on the switching surface; pass side=+1 or -1")
        return 1 if x2 > 0 else -1
    if side not in (1, -1):
        raise ValueError("side must be +1 or -1")
    return side


# ---------------------------------------------------------------------------
# structured density


@dataclass(frozen=True)
class StructuredDensity:
    params: GovernorParams
    alpha: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    def terms(self, side: int):
        """``rho = sum w * (a.x + b)^2`` for the half-space ``side``."""
        A, B = self.params.A, self.params.B
        D = A * B - 1.0
        s = 0.5 * side
        return [
            (0.5 * A, np.array([1.0 / A, 1.0, 0.0]), 0.0),
            (0.5, np.array([A, D / A, -1.0]), s),
            (D / (2.0 * A * A), np.array([0.0, 1.0, 0.0]), 0.0),
            (0.5 * self.alpha, np.array([0.0, 0.0, 1.0]), 0.0),
        ]

    def quadratic(self, side: int):
        """Return ``(P, q, r)`` with ``rho = x^T P x + 2 q.x + r`` on ``side``."""
        P = np.zeros((3, 3))
        q = np.zeros(3)
        r = 0.0
        for w, a, b in self.terms(side):
            P += w * np.outer(a, a)
            q += w * b * a
            r += w * b * b
        return P, q, r

    def __call__(self, x, side: Optional[int] = None) -> float:
        x = np.asarray(x, dtype=float)
        sd = _side(x[1], side)
        A, B = self.params.A, self.params.B
        D = A * B - 1.0
        x1, x2, x3 = x
        return (
            0.5 * A * (x1 / A + x2) ** 2
            + 0.5 * (A * x1 - x3 + D / A * x2 + 0.5 * sd) ** 2
            + D / (2 * A * A) * x2**2
            + 0.5 * self.alpha * x3**2
        )

    def evaluate_many(self, X: np.ndarray, side: np.ndarray) -> np.ndarray:
        A, B = self.params.A, self.params.B
        D = A * B - 1.0
        x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
        return (
            0.5 * A * (x1 / A + x2) ** 2
            + 0.5 * (A * x1 - x3 + D / A * x2 + 0.5 * side) ** 2
            + D / (2 * A * A) * x2**2
            + 0.5 * self.alpha * x3**2
        )


def eval_structured_density(d: StructuredDensity, x, side: Optional[int] = None) -> float:
    return d(x, side)


@dataclass(frozen=True)
class WForm:
    W: np.ndarray
    params: GovernorParams
    alpha: float

    def value(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(z @ self.W @ z)


def build_w_form(params: GovernorParams, alpha: float = 0.0) -> WForm:
    """Symmetric 4x4 form with ``grad(rho).f = z^T W z``, ``z = (x, phi)``.

    W23 carries ``+B(AB-1)/A``; with the opposite sign the form no longer
    equals the Lie derivative (checked by finite differences in the tests).
    """
    A, B, C = params.A, params.B, params.C
    D = A * B - 1.0
    W = np.empty((4, 4))
    W[0, 0] = -A * D
    W[0, 1] = -B * D
    W[0, 2] = D - 0.5 * alpha + 0.5 * A * C
    W[0, 3] = 0.5 * D
    W[1, 1] = -B * B * D / A
    W[1, 2] = -C / (2 * A) + 0.5 * C * B + B * D / A
    W[1, 3] = B * D / (2 * A)
    W[2, 2] = -C - D / A - alpha * C
    W[2, 3] = -0.25 * C - D / (2 * A)
    W[3, 3] = -D / (4 * A)
    for i in range(4):
        for j in range(i):
            W[i, j] = W[j, i]
    return WForm(W, params, alpha)


def closed_form_lie_derivative(params: GovernorParams, alpha: float, x, side: Optional[int] = None) -> float:
    """Scalar closed form of ``grad(rho).f`` for the structured density.

    The leading square is ``-(AB-1)/A * (x2')^2`` evaluated at C = 0; the
    remaining terms are the alpha weight and the self-regulation correction,
    which vanishes when C = 0.
    """
    x1, x2, x3 = (float(v) for v in x)
    sd = _side(x2, side)
    A, B, C = params.A, params.B, params.C
    D = A * B - 1.0
    phi = -sd
    lead = -D / A * (x3 - A * x1 - B * x2 + 0.5 * phi) ** 2
    reg = -alpha * x1 * x3 - alpha * C * x3 * x3
    self_reg = C * x3 * (A * x1 + (B - 1.0 / A) * x2 - x3 - 0.5 * phi)
    return lead + reg + self_reg


def _field_side(sys: LurieSystem, x, side: int) -> np.ndarray:
    A, B, C, k = sys.A, sys.B, sys.C, sys.k
    x1, x2, x3 = x
    return np.array([x2, -A * x1 - B * x2 + x3 - k * side, -x1 - C * x3])


def fd_divergence(fun, x, h: float) -> float:
    """Central-difference divergence of a vector function ``fun(x)``."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        total += (fun(x + e)[i] - fun(x - e)[i]) / (2 * h)
    return total


@dataclass(frozen=True)
class IdentityCheck:
    finite_difference: float
    closed_form: float
    quadratic_form: float

    @property
    def residual(self) -> float:
        v = (self.finite_difference, self.closed_form, self.quadratic_form)
        return max(abs(a - b) for a in v for b in v)


def structured_divergence_identity_check(
    params: GovernorParams, alpha: float, x, side: Optional[int] = None, h: float = 1e-5
) -> IdentityCheck:
    """Compare three evaluations of ``div(rho f) - rho div f``."""
    x = np.asarray(x, dtype=float)
    sd = _side(x[1], side)
    sys = build_system(params)
    d = StructuredDensity(params, alpha)

    def rho_f(y):
        return d(y, sd) * _field_side(sys, y, sd)

    div_rho_f = fd_divergence(rho_f, x, h)
    div_f = fd_divergence(lambda y: _field_side(sys, y, sd), x, 1e-3)
    a = div_rho_f - d(x, sd) * div_f
    b = closed_form_lie_derivative(params, alpha, x, sd)
    z = np.append(x, -sd)
    c = build_w_form(params, alpha).value(z)
    return IdentityCheck(a, b, c)


def divergence_of_field(sys: LurieSystem, x, side: Optional[int] = None, h: float = 1e-3) -> float:
    x = np.asarray(x, dtype=float)
    sd = _side(x[1], side)
    return fd_divergence(lambda y: _field_side(sys, y, sd), x, h)


# ---------------------------------------------------------------------------
# sufficient condition for the structured density


@dataclass
class Theorem2Result:
    verdict: str  # "sufficient-holds" | "fails"
    analytic: str  # verdict of the Schur-complement analysis
    sampled_max: float  # largest z^T W z / |z|^2 found by sampling
    witness: Optional[np.ndarray] = None
    conflict: bool = False  # sampling found a witness the analysis missed
    extra: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.verdict == "sufficient-holds"


def form_nonpositive_on_sheet(W: np.ndarray, atol: float = 1e-10):
    """Decide ``sup_x z^T W z <= 0`` over ``z = (x, +-1)``.

    With ``W = [[W3, w], [w^T, w44]]`` this holds iff ``W3 <= 0``, ``w`` lies
    in the range of ``W3`` and ``w44 - w^T W3^+ w <= 0``. Both sheets give
    the same answer because the form is even in ``z``. Returns
    ``(holds, witness_or_None)``.
    """
    W3 = W[:3, :3]
    w = W[:3, 3]
    w44 = W[3, 3]
    lam, V = np.linalg.eigh(W3)
    scale = max(1.0, float(np.max(np.abs(W))))
    tol = atol * scale
    if lam[-1] > tol:
        v = V[:, -1]
        t = 1.0 + abs(float(w @ v) / lam[-1]) * 4 + math.sqrt(abs(w44) / lam[-1]) * 2
        x = t * v * (1 if w @ v >= 0 else -1)
        return False, np.append(x, 1.0)
    # component of w outside range(W3): null directions of W3
    null = np.abs(lam) <= tol
    wn = V[:, null].T @ w if null.any() else np.zeros(0)
    if wn.size and np.max(np.abs(wn)) > tol:
        j = int(np.argmax(np.abs(wn)))
        v = V[:, null][:, j]
        # z^T W z = 2 t (w.v) + w44 along x = t v (W3 v ~ 0)
        t = (abs(w44) + 1.0) / abs(float(w @ v)) * np.sign(float(w @ v))
        return False, np.append(t * v, 1.0)
    rng_mask = ~null
    inv = np.zeros(3)
    if rng_mask.any():
        c = V[:, rng_mask].T @ w
        inv_w = float(np.sum(c * c / lam[rng_mask]))
        x_opt = -V[:, rng_mask] @ (c / lam[rng_mask])
    else:
        inv_w = 0.0
        x_opt = inv
    schur = w44 - inv_w
    if schur > tol:
        return False, np.append(x_opt, 1.0)
    return True, None


def sample_form_max(W: np.ndarray, n: int = 100_000, seed: int = 0, radii=SAMPLING_RADII, batches: int = 10):
    """Largest ``z^T W z`` over ``x`` on spheres of the given radii, phi = +-1.

    Each batch has its own child seed, so the result does not depend on how
    batches are scheduled.
    """
    children = np.random.SeedSequence(seed).spawn(batches)
    per = max(1, n // batches)
    best, arg = -math.inf, None
    for ss in children:
        rng = np.random.default_rng(ss)
        u = rng.normal(size=(per, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = np.asarray(radii)[rng.integers(len(radii), size=per)]
        phi = np.where(rng.random(per) < 0.5, -1.0, 1.0)
        Z = np.column_stack([u * r[:, None], phi])
        vals = np.einsum("ij,jk,ik->i", Z, W, Z)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, arg = float(vals[i]), Z[i]
    return best, arg


def theorem2_check_structured(
    params: GovernorParams,
    alpha: float = 0.0,
    n_samples: int = 100_000,
    seed: int = 0,
    atol: float = 1e-10,
) -> Theorem2Result:
    """Pointwise sufficient check ``grad(rho).f = z^T W z <= 0`` off the surface."""
    wf = build_w_form(params, alpha)
    holds, witness = form_nonpositive_on_sheet(wf.W, atol)
    smax, sarg = sample_form_max(wf.W, n_samples, seed)
    scale = max(1.0, float(np.max(np.abs(wf.W))))
    sampled_positive = smax > atol * scale * 100.0
    conflict = holds and sampled_positive
    if not holds:
        verdict = "fails"
    elif sampled_positive:
        verdict = "fails"
        witness = sarg
    else:
        verdict = "sufficient-holds"
    if witness is None and sampled_positive:
        witness = sarg
    return Theorem2Result(verdict, "holds" if holds else "fails", smax, witness, conflict)


def lie_derivative_structured_many(params: GovernorParams, alpha: float, X: np.ndarray, side: np.ndarray):
    W = build_w_form(params, alpha).W
    Z = np.column_stack([X, -side])
    return np.einsum("ij,jk,ik->i", Z, W, Z)


# ---------------------------------------------------------------------------
# quadratic density


@dataclass(frozen=True)
class QuadraticDensity:
    Q: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if Q.shape != (3, 3):
            raise ValueError("Q must be 3x3")
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(Q)))):
            raise ValueError("Q must be symmetric")
        if np.linalg.eigvalsh(Q)[0] <= 0:
            raise ValueError("Q must be positive definite")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))

    def __call__(self, x, side: Optional[int] = None) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.Q @ x)

    def quadratic(self, side: int):
        return self.Q.copy(), np.zeros(3), 0.0

    def evaluate_many(self, X, side=None):
        return np.einsum("ij,jk,ik->i", X, self.Q, X)


@dataclass(frozen=True)
class FForm:
    F: np.ndarray
    tau: float

    def value(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(z @ self.F @ z)


def build_f_form(sys: LurieSystem, Q, tau: float = 1.0) -> FForm:
    """``F = [[H^T Q + Q H, Q G], [G^T Q, -tau]]``.

    ``tau = 0`` gives F0, whose form equals ``grad(x^T Q x).f`` at
    ``z = (x, phi)``.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    Q = np.asarray(Q.Q if isinstance(Q, QuadraticDensity) else Q, dtype=float)
    H, G = sys.H, sys.G
    F = np.empty((4, 4))
    F[:3, :3] = H.T @ Q + Q @ H
    qg = Q @ G
    F[:3, 3] = qg
    F[3, :3] = qg
    F[3, 3] = -tau
    return FForm(0.5 * (F + F.T), tau)


def lie_derivative_quadratic_many(sys: LurieSystem, Q: np.ndarray, X: np.ndarray, side: np.ndarray):
    F0 = build_f_form(sys, Q, 0.0).F
    Z = np.column_stack([X, -side])
    return np.einsum("ij,jk,ik->i", Z, F0, Z)


# ---------------------------------------------------------------------------
# necessary condition (Monte Carlo)


@dataclass
class Theorem1Result:
    verdict: str  # necessary-consistent | violated | inconclusive
    levels: list
    estimates: list
    std_errors: list


def _ellipsoid_samples(P, center, radius2, n, rng):
    """Uniform samples of ``{(x-center)^T P (x-center) <= radius2}`` and its volume."""
    lam, V = np.linalg.eigh(P)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / 3.0)
    semi = np.sqrt(radius2 / lam)
    X = center + (u * r[:, None] * semi) @ V.T
    vol = 4.0 / 3.0 * math.pi * float(np.prod(semi))
    return X, vol


def theorem1_check(
    density,
    sys: LurieSystem,
    levels=(0.1, 1.0, 10.0, 100.0),
    n_samples: int = 1_000_000,
    seed: int = 0,
    batches: int = 10,
) -> Theorem1Result:
    """Monte Carlo sign of ``int_V div(rho f) dV`` over ``V = {rho <= c}``.

    Each half-space piece of ``V`` is an ellipsoid intersected with the
    half-space; points are drawn uniformly in the ellipsoid and rejected on
    the wrong side.
    """
    BC = sys.B + sys.C
    if isinstance(density, StructuredDensity):
        lie = lambda X, s: lie_derivative_structured_many(density.params, density.alpha, X, s)  # noqa: E731
    elif isinstance(density, QuadraticDensity):
        lie = lambda X, s: lie_derivative_quadratic_many(sys, density.Q, X, s)  # noqa: E731
    else:
        raise TypeError("unsupported density")

    children = np.random.SeedSequence(seed).spawn(batches * len(levels) * 2)
    per = max(1, n_samples // (batches * 2))
    estimates, errors = [], []
    it = iter(children)
    for c in levels:
        total, var = 0.0, 0.0
        for side in (1, -1):
            P, q, r = density.quadratic(side)
            center = -np.linalg.solve(P, q)
            rmin = r - float(q @ np.linalg.solve(P, q))
            rad2 = c - rmin
            if rad2 <= 0:
                for _ in range(batches):
                    next(it)
                continue
            vals = []
            vol = None
            for _ in range(batches):
                rng = np.random.default_rng(next(it))
                X, vol = _ellipsoid_samples(P, center, rad2, per, rng)
                sd = np.full(per, float(side))
                keep = X[:, 1] * side > 0
                rho = density.evaluate_many(X, sd)
                integrand = np.where(keep, lie(X, sd) - BC * rho, 0.0)
                vals.append(integrand)
            v = np.concatenate(vals)
            total += vol * float(v.mean())
            var += vol * vol * float(v.var(ddof=1)) / v.size
        estimates.append(total)
        errors.append(math.sqrt(var))

    if all(e < -3 * s for e, s in zip(estimates, errors)):
        verdict = "necessary-consistent"
    elif any(e > 3 * s for e, s in zip(estimates, errors)):
        verdict = "violated"
    else:
        verdict = "inconclusive"
    return Theorem1Result(verdict, list(levels), estimates, errors)


# ---------------------------------------------------------------------------
# pointwise forms of the sufficient conditions


def sufficient_conditions_sampled(density, sys: LurieSystem, n: int = 20_000, seed: int = 0, radii=SAMPLING_RADII):
    """Whether every sampled point satisfies each sufficient condition.

    The third check is taken with beta = 1. Returns a dict with keys
    ``"i"``, ``"ii"``, ``"iii"`` mapping to booleans (all samples satisfy the
    non-strict inequality).
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    X = u * np.asarray(radii)[rng.integers(len(radii), size=n)][:, None]
    side = np.where(X[:, 1] >= 0, 1.0, -1.0)
    if isinstance(density, StructuredDensity):
        lie = lie_derivative_structured_many(density.params, density.alpha, X, side)
    else:
        lie = lie_derivative_quadratic_many(sys, density.Q, X, side)
    rho = density.evaluate_many(X, side)
    divf = -(sys.B + sys.C)
    # div(rho f) - rho div f = lie ; div(rho f) - rho^2 div(f/rho) = 2 lie
    scale = 1e-12 * np.maximum(1.0, np.abs(rho))
    cond_i = lie <= scale
    div_inv = divf / rho - lie / rho**2
    cond_ii = (div_inv >= -scale) & (divf <= 0)
    cond_iii = 2 * lie <= scale
    return {"i": bool(cond_i.all()), "ii": bool(cond_ii.all()), "iii": bool(cond_iii.all())}
