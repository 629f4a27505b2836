"""Small dense LMI feasibility for the quadratic density.

Find ``Q = Q^T > 0`` and ``tau >= 0`` with

    F(Q, tau) = [[H^T Q + Q H, Q G], [G^T Q, -tau]] < 0.

The problem is homogeneous, so ``Q`` is kept at unit Frobenius norm and the
margins ``eps_pd``/``eps_nd`` are measured at that scale. The search
minimises the spectral penalty

    g = max(lmax(F) + eps_nd, 0) + max(eps_pd - lmin(Q), 0)

by Polyak-step subgradient descent from a fixed list of starts (all starts
advance together in one batch). Certificates are re-checked with the
in-house Jacobi eigensolver before being reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from divgov.model import GovernorParams, LurieSystem, build_system

N_SEEDS = 20
STALL_ITERS = 200
MAX_ITERS = 3000
STALL_GAIN = 0.5


def eig_symmetric(M, tol: float = 1e-14, max_sweeps: int = 100):
    """Cyclic Jacobi eigen-decomposition of a small symmetric matrix.

    Returns ``(eigenvalues ascending, eigenvectors as columns)``.
    """
    a = np.array(M, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    n = a.shape[0]
    norm = float(np.linalg.norm(a))
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix must be finite")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-12 * max(norm, 1e-300):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    target = tol * norm
    for _ in range(max_sweeps):
        off = math.sqrt(2.0 * sum(a[p, q] ** 2 for p in range(n) for q in range(p + 1, n)))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/columns p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


@dataclass(frozen=True)
class LmiProblem:
    sys: LurieSystem
    eps_pd: float = 1e-6
    eps_nd: float = 1e-8
    scale_cap: float = 1e6

    def __post_init__(self):
        if not self.eps_pd > 0:
            raise ValueError("eps_pd must be positive")
        if self.eps_nd < 0:
            raise ValueError("eps_nd must be non-negative")
        if self.scale_cap < 1:
            raise ValueError("scale_cap must be >= 1")


@dataclass
class LmiResult:
    verdict: str  # feasible | infeasible | undetermined
    Q: Optional[np.ndarray]
    tau: float
    margins: tuple  # (lmin(Q), lmax(F))
    iterations: int
    seed_index: Optional[int] = None
    best_penalty: float = math.inf
    info: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.verdict == "feasible"


def f_matrix(sys: LurieSystem, Q: np.ndarray, tau: float) -> np.ndarray:
    H, G = sys.H, sys.G
    F = np.empty((4, 4))
    F[:3, :3] = H.T @ Q + Q @ H
    qg = Q @ G
    F[:3, 3] = qg
    F[3, :3] = qg
    F[3, 3] = -tau
    return 0.5 * (F + F.T)


def verify_certificate(sys: LurieSystem, Q, tau: float, eps_pd: float = 1e-6, eps_nd: float = 1e-8) -> bool:
    """Recompute F from scratch and check both margins with Jacobi."""
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (3, 3) or not np.all(np.isfinite(Q)) or not math.isfinite(tau) or tau < 0:
        return False
    if np.max(np.abs(Q - Q.T)) > 1e-12 * max(1.0, np.max(np.abs(Q))):
        return False
    lq, _ = eig_symmetric(Q)
    if lq[0] < eps_pd:
        return False
    lf, _ = eig_symmetric(f_matrix(sys, Q, tau))
    return bool(lf[-1] <= -eps_nd)


def certificate_margins(sys: LurieSystem, Q, tau: float):
    lq, _ = eig_symmetric(Q)
    lf, _ = eig_symmetric(f_matrix(sys, Q, tau))
    return float(lq[0]), float(lf[-1])


def _lyapunov(H: np.ndarray, R: np.ndarray) -> Optional[np.ndarray]:
    """Solve ``H^T Q + Q H = -R`` by vectorisation; None if singular."""
    n = H.shape[0]
    I = np.eye(n)
    K = np.kron(I, H.T) + np.kron(H.T, I)
    try:
        q = np.linalg.solve(K, -R.reshape(-1))
    except np.linalg.LinAlgError:
        return None
    Q = q.reshape(n, n)
    Q = 0.5 * (Q + Q.T)
    if not np.all(np.isfinite(Q)):
        return None
    return Q


def _tau_for(sys: LurieSystem, Q: np.ndarray, eps: float) -> float:
    """Multiplier making F negative definite when H^T Q + Q H is."""
    M = sys.H.T @ Q + Q @ sys.H
    qg = Q @ sys.G
    lam, V = np.linalg.eigh(-M - eps * np.eye(3))
    if lam[0] <= 0:
        return 1.0
    c = V.T @ qg
    return float(2.0 * (eps + np.sum(c * c / lam)) + eps)


def _psd_clip(Q: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    lam, V = np.linalg.eigh(0.5 * (Q + Q.T))
    lam = np.maximum(np.abs(lam), floor * max(1.0, float(np.max(np.abs(lam)))))
    return (V * lam) @ V.T


def initial_points(sys: LurieSystem, n_seeds: int = N_SEEDS, seed: int = 0):
    """Deterministic list of ``(Q, tau)`` starts."""
    H = sys.H
    starts = [(np.eye(3), 1.0)]
    for R in (np.eye(3), np.diag([1.0, 0.1, 1.0]), np.diag([0.1, 1.0, 0.1]), np.diag([1.0, 1.0, 0.1])):
        Q = _lyapunov(H, R)
        if Q is None:
            Q = np.eye(3)
        Q = _psd_clip(Q)
        starts.append((Q, _tau_for(sys, Q, 0.0)))
    rng = np.random.default_rng(seed)
    while len(starts) < n_seeds:
        M = rng.normal(size=(3, 3))
        Q = M @ M.T + 0.1 * np.eye(3)
        starts.append((Q, float(rng.uniform(0.1, 10.0))))
    out = []
    for Q, tau in starts[:n_seeds]:
        s = float(np.linalg.norm(Q))
        out.append((Q / s, tau / s))
    return out


def solve_feasibility(
    p: LmiProblem,
    n_seeds: int = N_SEEDS,
    seed: int = 0,
    max_iters: int = MAX_ITERS,
    stall_iters: int = STALL_ITERS,
) -> LmiResult:
    return solve_feasibility_batch([p], n_seeds, seed, max_iters, stall_iters)[0]


def solve_feasibility_batch(
    problems,
    n_seeds: int = N_SEEDS,
    seed: int = 0,
    max_iters: int = MAX_ITERS,
    stall_iters: int = STALL_ITERS,
):
    """Run :func:`solve_feasibility` on many problems in one vectorised loop.

    Every (problem, start) pair follows exactly the arithmetic it would
    follow alone, so verdicts do not depend on how problems are batched.
    """
    P = len(problems)
    if P == 0:
        return []
    S = n_seeds
    N = P * S
    H = np.repeat(np.stack([p.sys.H for p in problems]), S, axis=0)
    Ht = np.transpose(H, (0, 2, 1))
    G = np.repeat(np.stack([p.sys.G for p in problems]), S, axis=0)
    eps_pd = np.repeat([p.eps_pd for p in problems], S)
    eps_nd = np.repeat([p.eps_nd for p in problems], S)
    cap = np.repeat([p.scale_cap for p in problems], S)
    Qs = np.empty((N, 3, 3))
    taus = np.empty(N)
    for i, p in enumerate(problems):
        for j, (Q, tau) in enumerate(initial_points(p.sys, S, seed)):
            Qs[i * S + j] = Q
            taus[i * S + j] = tau

    best = np.full(N, math.inf)
    ring = np.full((stall_iters, N), math.inf)
    active = np.ones(N, dtype=bool)
    results = [None] * P
    open_ = np.ones(P, dtype=bool)
    iters = np.zeros(P, dtype=int)

    for it in range(1, max_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Qa, ta = Qs[idx], taus[idx]
        M = Ht[idx] @ Qa + Qa @ H[idx]
        QG = np.einsum("nij,nj->ni", Qa, G[idx])
        F = np.zeros((idx.size, 4, 4))
        F[:, :3, :3] = M
        F[:, :3, 3] = QG
        F[:, 3, :3] = QG
        F[:, 3, 3] = -ta
        lf, vf = np.linalg.eigh(F)
        lq, vq = np.linalg.eigh(Qa)
        gF = np.maximum(lf[:, -1] + eps_nd[idx], 0.0)
        gQ = np.maximum(eps_pd[idx] - lq[:, 0], 0.0)
        g = gF + gQ
        iters[np.unique(idx // S)] = it

        for n in idx[g == 0.0]:
            pi = n // S
            if not open_[pi]:
                continue
            prob = problems[pi]
            if verify_certificate(prob.sys, Qs[n], float(taus[n]), prob.eps_pd, prob.eps_nd):
                margins = certificate_margins(prob.sys, Qs[n], float(taus[n]))
                results[pi] = LmiResult("feasible", Qs[n].copy(), float(taus[n]), margins, it, int(n % S), 0.0)
                open_[pi] = False
        g = np.where(g == 0.0, 1e-300, g)  # unverified hits keep iterating

        best[idx] = np.minimum(best[idx], g)
        slot = (it - 1) % stall_iters
        old = ring[slot, idx].copy()
        ring[slot, idx] = best[idx]
        if it > stall_iters:
            # stalled: best penalty did not shrink by STALL_GAIN over the window
            stalled = best[idx] > old * STALL_GAIN
            active[idx[stalled]] = False
        # drop every start of a solved problem
        active &= np.repeat(open_, S)

        keep = active[idx]
        idx, g, gF, gQ = idx[keep], g[keep], gF[keep], gQ[keep]
        if idx.size == 0:
            continue
        vf, vq = vf[keep], vq[keep]
        # subgradient of lmax(F): v^T F v = 2 w^T Q (H w + s G) - tau s^2
        w = vf[:, :3, -1]
        sv = vf[:, 3, -1]
        y = np.einsum("nij,nj->ni", H[idx], w) + sv[:, None] * G[idx]
        onF = (gF > 0)[:, None, None]
        dQ = np.where(onF, w[:, :, None] * y[:, None, :] + y[:, :, None] * w[:, None, :], 0.0)
        dtau = np.where(gF > 0, -(sv**2), 0.0)
        u = vq[:, :, 0]
        dQ = dQ - np.where((gQ > 0)[:, None, None], u[:, :, None] * u[:, None, :], 0.0)
        norm2 = np.einsum("nij,nij->n", dQ, dQ) + dtau**2
        # Polyak step towards g = 0, overshooting slightly so strict margins are reached
        step = 1.5 * g / np.where(norm2 > 0, norm2, np.inf)
        Qn = Qs[idx] - step[:, None, None] * dQ
        tn = np.clip(taus[idx] - step * dtau, 0.0, cap[idx])
        Qn = 0.5 * (Qn + np.transpose(Qn, (0, 2, 1)))
        nrm = np.linalg.norm(Qn, axis=(1, 2))
        nrm = np.where(nrm > 0, nrm, 1.0)
        Qs[idx] = Qn / nrm[:, None, None]
        taus[idx] = np.clip(tn / nrm, 0.0, cap[idx])

    for pi, prob in enumerate(problems):
        if results[pi] is not None:
            continue
        sl = slice(pi * S, (pi + 1) * S)
        b = pi * S + int(np.argmin(best[sl]))
        verdict = "undetermined" if active[sl].any() else "infeasible"
        lq = float(np.linalg.eigvalsh(Qs[b])[0])
        lf = float(np.linalg.eigvalsh(f_matrix(prob.sys, Qs[b], taus[b]))[-1])
        results[pi] = LmiResult(verdict, None, float(taus[b]), (lq, lf), int(iters[pi]), None, float(best[b]))
    return results


def lmi_verdict(params: GovernorParams, eps_pd: float = 1e-6, eps_nd: float = 1e-8, seed: int = 0) -> LmiResult:
    return solve_feasibility(LmiProblem(build_system(params), eps_pd, eps_nd), seed=seed)


def certificate_record(params: GovernorParams, res: LmiResult) -> dict:
    rec = {
        "params": params.as_dict(),
        "verdict": res.verdict,
        "iterations": res.iterations,
        "margins": {"min_eig_Q": res.margins[0], "max_eig_F": res.margins[1]},
        "tau": res.tau,
    }
    if res.Q is not None:
        Q = res.Q
        rec["Q"] = [Q[0, 0], Q[0, 1], Q[0, 2], Q[1, 1], Q[1, 2], Q[2, 2]]
    else:
        rec["Q"] = None
    return rec
