"""The t-walk: a self-adjusting MCMC sampler on pairs of points.

The chain runs on the product space ``(x, x')`` with target
``pi(x) pi(x')``.  Each iteration moves one of the two points with one of
four proposals built from the current pair:

* walk      -- ``y = x + (x - x') z``, a scaled step along the pair
* traverse  -- ``y = x' + beta (x' - x)``, a jump over the other point
* blow      -- ``y = x' + sigma N(0, I)`` with ``sigma`` the pair distance
* hop       -- ``y = x + sigma/3 N(0, I)``

None of them needs tuning: every scale comes from the pair itself.  The
kernel is compiled per target; all randomness is drawn up front from a numpy
``Generator`` so a seed fully determines the chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

from .errors import SamplerError

# move probabilities: traverse, walk, blow, hop
MOVE_WEIGHTS = (0.4918, 0.4918, 0.0082, 0.0082)
WALK_PARAM = 1.5
TRAVERSE_PARAM = 6.0
N_PHI = 4.0  # expected number of coordinates moved per proposal

_NUM_MOVES = 4


@dataclass(frozen=True)
class TWalkResult:
    chain: np.ndarray  # (n_iter + 1, dim), the x-point after each iteration
    log_density: np.ndarray  # (n_iter + 1,)
    proposed: np.ndarray  # per move type
    accepted: np.ndarray
    n_failed: int  # target evaluations that returned NaN

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.sum() / max(1, self.proposed.sum()))


@njit(cache=True)
def _draw_beta(u_branch, u, at):
    if u_branch < (at - 1.0) / (2.0 * at):
        return math.exp(math.log(u) / (at + 1.0))
    return math.exp(math.log(u) / (1.0 - at))


def _make_kernel(logpdf):
    @njit
    def kernel(x0, xp0, args, rnd, fw, pphi, aw, at):
        n_iter = rnd.shape[0]
        n = x0.shape[0]
        chain = np.empty((n_iter + 1, n))
        lchain = np.empty(n_iter + 1)
        proposed = np.zeros(4, dtype=np.int64)
        accepted = np.zeros(4, dtype=np.int64)
        n_failed = 0

        x = x0.copy()
        xp = xp0.copy()
        lx = logpdf(x, args)
        lxp = logpdf(xp, args)
        chain[0] = x
        lchain[0] = lx
        y = np.empty(n)
        phi = np.empty(n, dtype=np.bool_)

        for it in range(n_iter):
            r = rnd[it]
            move_x = r[1] >= 0.5
            if move_x:
                cur = x
                other = xp
                lcur = lx
            else:
                cur = xp
                other = x
                lcur = lxp
            nphi = 0
            for i in range(n):
                phi[i] = r[5 + i] < pphi
                if phi[i]:
                    nphi += 1
                y[i] = cur[i]

            ker = r[0]
            log_extra = 0.0
            valid = nphi > 0
            if ker < fw[0]:
                mv = 0
                beta = _draw_beta(r[3], r[4], at)
                for i in range(n):
                    if phi[i]:
                        y[i] = other[i] + beta * (other[i] - cur[i])
                log_extra = (nphi - 2) * math.log(beta)
            elif ker < fw[1]:
                mv = 1
                for i in range(n):
                    if phi[i]:
                        u = r[5 + n + i]
                        z = (aw / (1.0 + aw)) * (aw * u * u + 2.0 * u - 1.0)
                        y[i] = cur[i] + (cur[i] - other[i]) * z
                for i in range(n):
                    if y[i] == other[i]:
                        valid = False
            elif ker < fw[2]:
                mv = 2
                sig = 0.0
                for i in range(n):
                    if phi[i]:
                        sig = max(sig, abs(other[i] - cur[i]))
                sig_rev = 0.0
                q_fwd = 0.0
                q_rev = 0.0
                for i in range(n):
                    if phi[i]:
                        y[i] = other[i] + sig * r[5 + 2 * n + i]
                        sig_rev = max(sig_rev, abs(other[i] - y[i]))
                if sig <= 0.0 or sig_rev <= 0.0:
                    valid = False
                else:
                    for i in range(n):
                        if phi[i]:
                            q_fwd += (y[i] - other[i]) ** 2
                            q_rev += (cur[i] - other[i]) ** 2
                    log_extra = (-nphi * math.log(sig_rev) - 0.5 * q_rev / sig_rev ** 2
                                 + nphi * math.log(sig) + 0.5 * q_fwd / sig ** 2)
            else:
                mv = 3
                sig = 0.0
                for i in range(n):
                    if phi[i]:
                        sig = max(sig, abs(other[i] - cur[i]))
                sig /= 3.0
                sig_rev = 0.0
                q = 0.0
                for i in range(n):
                    if phi[i]:
                        y[i] = cur[i] + sig * r[5 + 2 * n + i]
                        sig_rev = max(sig_rev, abs(other[i] - y[i]))
                        q += (y[i] - cur[i]) ** 2
                sig_rev /= 3.0
                if sig <= 0.0 or sig_rev <= 0.0:
                    valid = False
                else:
                    log_extra = (-nphi * math.log(sig_rev) - 0.5 * q / sig_rev ** 2
                                 + nphi * math.log(sig) + 0.5 * q / sig ** 2)

            proposed[mv] += 1
            if valid:
                ly = logpdf(y, args)
                if math.isnan(ly):
                    n_failed += 1
                elif ly > -np.inf:
                    log_a = ly - lcur + log_extra
                    if log_a >= 0.0 or r[2] < math.exp(log_a):
                        accepted[mv] += 1
                        if move_x:
                            for i in range(n):
                                x[i] = y[i]
                            lx = ly
                        else:
                            for i in range(n):
                                xp[i] = y[i]
                            lxp = ly
            chain[it + 1] = x
            lchain[it + 1] = lx
        return chain, lchain, proposed, accepted, n_failed

    return kernel


@lru_cache(maxsize=None)
def _kernel_for(logpdf):
    return _make_kernel(logpdf)


def draw_randomness(rng: np.random.Generator, n_iter: int, dim: int) -> np.ndarray:
    """Per-iteration random numbers consumed by the kernel.

    Columns: move choice, which point moves, acceptance, beta branch, beta
    draw, then ``dim`` coordinate-selection uniforms, ``dim`` walk uniforms,
    ``dim`` standard normals.
    """
    rnd = np.empty((n_iter, 5 + 3 * dim))
    rnd[:, : 5 + 2 * dim] = rng.random((n_iter, 5 + 2 * dim))
    rnd[:, 4] = 1.0 - rnd[:, 4]  # beta draw needs u in (0, 1]
    rnd[:, 5 + 2 * dim:] = rng.standard_normal((n_iter, dim))
    return rnd


def run_twalk(logpdf, x0, xp0, n_iter: int, rng: np.random.Generator, args=()) -> TWalkResult:
    """Run ``n_iter`` t-walk iterations on a compiled target.

    ``logpdf(x, args)`` must be a numba ``@njit`` function returning the log
    density (``-inf`` outside the support, NaN to signal a failed evaluation,
    which is counted and treated as a rejection).
    """
    x0 = np.ascontiguousarray(x0, dtype=float)
    xp0 = np.ascontiguousarray(xp0, dtype=float)
    n = x0.shape[0]
    if xp0.shape != x0.shape:
        raise ValueError("x0 and xp0 must have the same shape")
    if np.any(x0 == xp0):
        raise SamplerError("initial points must differ in every coordinate")
    pphi = min(n, N_PHI) / n
    fw = np.cumsum(MOVE_WEIGHTS) / sum(MOVE_WEIGHTS)
    rnd = draw_randomness(rng, n_iter, n)
    kernel = _kernel_for(logpdf)
    chain, lchain, proposed, accepted, n_failed = kernel(
        x0, xp0, args, rnd, fw, pphi, WALK_PARAM, TRAVERSE_PARAM)
    if not np.isfinite(lchain[0]):
        raise SamplerError("starting point has zero target density",
                           {"x0": x0.tolist(), "log_density": float(lchain[0])})
    return TWalkResult(chain, lchain, proposed, accepted, int(n_failed))


def perturbed_partner(x0, rng: np.random.Generator, rel: float = 1e-3) -> np.ndarray:
    """Second t-walk point: ``x0`` moved by ``rel`` of its magnitude per coordinate."""
    x0 = np.asarray(x0, dtype=float)
    scale = rel * np.where(x0 != 0, np.abs(x0), 1.0)
    return x0 + scale * rng.standard_normal(x0.shape)
