"""Worst-case-rate beamforming under per-AP spherical channel uncertainty.

For user ``k`` with estimate ``h_k`` and errors ``||dh_km|| <= eps_km`` the
robust SINR constraint

    (h + dh)^H M_k (h + dh) - sigma^2 >= 0,   M_k = W_k / gamma - sum_{j != k} W_j

holds for every admissible ``dh`` if there are multipliers ``lam_km >= 0`` with

    [[M_k + Lam_k,  M_k h],
     [h^H M_k,      h^H M_k h - sigma^2 - sum_m lam_km eps_km^2]]  >= 0.

Everything below is solved in normalized units (noise power 1, per-AP power
budget 1) and, exactly, in the subspace spanned per AP by the channel
estimates: projecting a beamformer onto that subspace keeps every useful and
interfering term, shrinks the power, and maps the uncertainty balls into
themselves, so nothing is lost.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from . import conic
from .array_channel import ChannelSet, UncertaintyBounds, uncertainty_bounds
from .fim_crlb import crlb_at
from .matrix_io import format_matrices, parse_matrices
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)

RANK_DEFECT_FLAG = 0.05


# ---------------------------------------------------------------------------
# rate <-> SINR
# ---------------------------------------------------------------------------
def rate_from_gamma(gamma, eta, block_duration):
    """Bits delivered in a block: eta T log2(1 + gamma)."""
    return eta * block_duration * np.log2(1.0 + np.asarray(gamma))


def gamma_from_rate(rate, eta, block_duration):
    with np.errstate(over="ignore"):
        return np.exp2(np.asarray(rate) / (eta * block_duration)) - 1.0


def default_rate_upper(eta, channels: ChannelSet, config: ScenarioConfig) -> float:
    """eta T K log2(1 + M P max_k ||h_k||^2 / sigma^2)."""
    hmax = np.max(np.sum(channels.norms**2, axis=1))
    snr = channels.n_aps * config.comm_power_budget * hmax / config.noise_power
    return float(eta * config.block_duration * channels.n_users * np.log2(1.0 + snr))


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BeamformerSet:
    """Relaxed matrices ``W_k`` (K, MN, MN) or vectors ``w_k`` (K, MN), in watts."""

    n_aps: int
    matrices: np.ndarray | None = None
    vectors: np.ndarray | None = None

    def __post_init__(self):
        if (self.matrices is None) == (self.vectors is None):
            raise ValueError("exactly one of matrices / vectors must be given")

    @property
    def is_relaxed(self) -> bool:
        return self.matrices is not None

    @property
    def n_users(self) -> int:
        arr = self.matrices if self.is_relaxed else self.vectors
        return arr.shape[0]

    @property
    def dimension(self) -> int:
        arr = self.matrices if self.is_relaxed else self.vectors
        return arr.shape[1]

    @property
    def covariances(self) -> np.ndarray:
        if self.is_relaxed:
            return self.matrices
        w = self.vectors
        return np.einsum("ka,kb->kab", w, w.conj())

    def per_ap_power(self) -> np.ndarray:
        N = self.dimension // self.n_aps
        if self.is_relaxed:
            diag = np.einsum("kaa->ka", self.matrices).real
        else:
            diag = np.abs(self.vectors) ** 2
        return diag.reshape(self.n_users, self.n_aps, N).sum(axis=(0, 2))

    def slice(self, k: int, m: int) -> np.ndarray:
        N = self.dimension // self.n_aps
        if self.is_relaxed:
            return self.matrices[k, m * N:(m + 1) * N, m * N:(m + 1) * N]
        return self.vectors[k, m * N:(m + 1) * N]

    def to_text(self) -> str:
        if self.is_relaxed:
            items = [(f"W[{k}]", W) for k, W in enumerate(self.matrices)]
        else:
            items = [("w", self.vectors.T)]
        items.append(("n_aps", np.array([[self.n_aps]])))
        return format_matrices(items)

    @classmethod
    def from_text(cls, text: str) -> "BeamformerSet":
        mats = parse_matrices(text)
        n_aps = int(mats.pop("n_aps").real[0, 0])
        if "w" in mats:
            return cls(n_aps=n_aps, vectors=mats["w"].T.copy())
        keys = sorted(mats, key=lambda s: int(s[2:-1]))
        return cls(n_aps=n_aps, matrices=np.array([mats[k] for k in keys]))


@dataclass(frozen=True)
class RobustRateCertificate:
    """Certified worst-case rate with its S-procedure multipliers.

    ``multipliers`` are in the original units (W per squared channel error);
    ``min_eigenvalues`` are of each user's LMI normalized by the noise power.
    """

    rate: float
    gamma: float
    eta: float
    multipliers: np.ndarray
    min_eigenvalues: np.ndarray
    user_gammas: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# LMI in original units (used by tests, the margin and the oracles)
# ---------------------------------------------------------------------------
def _interference_matrix(k, gamma, W):
    others = W.sum(axis=0) - W[k]
    return W[k] / gamma - others


def build_robust_lmi(k: int, gamma: float, beams: BeamformerSet, channels: ChannelSet,
                     bounds: UncertaintyBounds, lam, config: ScenarioConfig) -> np.ndarray:
    """The (MN + 1) Hermitian S-procedure matrix of user ``k`` (watts)."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    W = beams.covariances
    h = channels.stacked[k]
    if W.shape[1] != h.size:
        raise ValueError(f"beam dimension {W.shape[1]} does not match channel dimension {h.size}")
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (channels.n_aps,) or np.any(lam < 0):
        raise ValueError("lam must be a nonnegative vector with one entry per AP")
    M = _interference_matrix(k, gamma, W)
    Lam = np.repeat(lam, channels.n_elements)
    Mh = M @ h
    corner = (h.conj() @ Mh).real - config.noise_power - lam @ bounds.eps[k] ** 2
    top = np.concatenate([M + np.diag(Lam), Mh[:, None]], axis=1)
    bottom = np.concatenate([Mh.conj(), [corner]])[None, :]
    L = np.concatenate([top, bottom], axis=0)
    return (L + L.conj().T) / 2


def robust_quadratic(k, gamma, beams: BeamformerSet, channels: ChannelSet, dh, config) -> np.ndarray:
    """(h + dh)^H M_k (h + dh) - sigma^2 for a batch of errors dh (S, MN)."""
    W = beams.covariances
    M = _interference_matrix(k, gamma, W)
    x = channels.stacked[k] + np.atleast_2d(dh)
    return np.einsum("sa,ab,sb->s", x.conj(), M, x).real - config.noise_power


def sinr(beams: BeamformerSet, hs) -> np.ndarray:
    """SINR of every user for channels hs (K, MN) (in units of the noise power = 1)."""
    W = beams.covariances
    P = np.einsum("ka,jab,kb->kj", hs.conj(), W, hs).real
    sig = np.diag(P).copy()
    return sig, P.sum(axis=1) - sig


# ---------------------------------------------------------------------------
# reduced normalized instance
# ---------------------------------------------------------------------------
class _Reduced:
    """Channel estimates and error radii in the per-AP channel subspace.

    ``Q`` maps reduced coordinates to the full space; coordinates are grouped
    by AP (``owner[a]`` is the AP of coordinate ``a``).
    """

    def __init__(self, channels: ChannelSet, config: ScenarioConfig, eps=None, extra=None):
        self.config = config
        self.K, self.M, self.N = channels.n_users, channels.n_aps, channels.n_elements
        self.scale = math.sqrt(config.comm_power_budget / config.noise_power)
        H = channels.channels  # (K, M, N)
        bases, owner = [], []
        for m in range(self.M):
            vecs = [H[:, m].T]
            if extra is not None:
                vecs.append(extra[:, m * self.N:(m + 1) * self.N].T)
            A = np.concatenate(vecs, axis=1)
            U, s, _ = np.linalg.svd(A, full_matrices=False)
            keep = s > 1e-10 * s.max() if s.size and s.max() > 0 else np.zeros(0, bool)
            bases.append(U[:, keep])
            owner += [m] * int(keep.sum())
        self.bases = bases
        self.owner = np.array(owner)
        self.R = len(owner)
        Q = np.zeros((self.M * self.N, self.R), complex)
        col = 0
        for m, B in enumerate(bases):
            Q[m * self.N:(m + 1) * self.N, col:col + B.shape[1]] = B
            col += B.shape[1]
        self.Q = Q
        self.g = (channels.stacked @ Q.conj()) * self.scale  # rows: Q^H h_k
        self.eps = np.zeros((self.K, self.M)) if eps is None else np.asarray(eps) * self.scale

    def lift(self, X):
        """Reduced matrices (K, R, R) -> full (K, MN, MN), normalized units."""
        return np.einsum("ar,krs,bs->kab", self.Q, X, self.Q.conj())

    def reduce(self, W):
        return np.einsum("ar,kab,bs->krs", self.Q.conj(), W, self.Q)

    def power_selector(self):
        return [np.flatnonzero(self.owner == m) for m in range(self.M)]


def _cmul(ar, ai, br, bi):
    """Complex product of (ar + j ai)(br + j bi) with at most one side symbolic."""
    return ar @ br - ai @ bi, ar @ bi + ai @ br


def _lmi_parts(red: _Reduced, k, sel, Mr, Mi, lam, eps2, conditioned=True):
    """Realified S-procedure LMI of user k restricted to coordinates ``sel``."""
    g = red.g[k]
    s = float(np.linalg.norm(g)) if conditioned else 1.0
    s = s if s > 0 else 1.0
    C = np.outer(g, g.conj())
    quad = cp.sum(cp.multiply(Mr, C.real.T)) - cp.sum(cp.multiply(Mi, C.imag.T))
    owners = red.owner[sel]
    used = sorted(set(owners.tolist()))
    corner = quad - 1.0
    if used:
        corner = corner - cp.sum(cp.multiply(eps2[used], lam[used]))
    if len(sel) == 0:
        return None, corner / s**2
    Mg_r = Mr @ g.real - Mi @ g.imag
    Mg_i = Mr @ g.imag + Mi @ g.real
    E = np.zeros((len(sel), red.M))
    E[np.arange(len(sel)), owners] = 1.0
    top_r = Mr[sel][:, sel] + cp.diag(E @ lam)
    top_i = Mi[sel][:, sel]
    col_r = cp.reshape(Mg_r[sel] / s, (len(sel), 1), order="C")
    col_i = cp.reshape(Mg_i[sel] / s, (len(sel), 1), order="C")
    c = cp.reshape(corner / s**2, (1, 1), order="C")
    re = cp.bmat([[top_r, col_r], [col_r.T, c]])
    im = cp.bmat([[top_i, col_i], [-col_i.T, np.zeros((1, 1))]])
    return conic.realify_hermitian_lmi(re, im), None


def _index_array(sel):
    return np.asarray(sel, dtype=int)


class _RobustFeasibility:
    """Parameterized feasibility SDP: exists (X_k, lam_k) meeting every user's LMI.

    ``maps`` is None for full beamforming (X_k free Hermitian PSD in the
    reduced space) or a list of (R, d) matrices G_k with X_k = G_k Y_k G_k^H
    (MRT power allocation, d = M).
    """

    def __init__(self, red: _Reduced, pattern: np.ndarray, maps=None):
        self.red = red
        self.pattern = pattern
        K, M, R = red.K, red.M, red.R
        prob = conic.ConicProblem("robust-feasibility" if maps is None else "mrt-feasibility")
        self.inv_gamma = prob.parameter("inv_gamma", nonneg=True, value=1.0)
        self.eps2 = prob.parameter("eps2", (K, M), nonneg=True, value=np.zeros((K, M)))
        t = prob.variable("t")
        self.t = t
        Xr, Xi, self.Y = [], [], []
        for k in range(K):
            if maps is None:
                X = prob.variable(f"X{k}", R, cone="hermitian_psd")
                self.Y.append(X)
                Xr.append(X.re)
                Xi.append(X.im)
            else:
                G = maps[k]
                Y = prob.variable(f"Y{k}", G.shape[1], cone="hermitian_psd")
                self.Y.append(Y)
                ar, ai = _cmul(G.real, G.imag, Y.re, Y.im)
                r, i = _cmul(ar, ai, G.real.T, -G.imag.T)
                Xr.append(r)
                Xi.append(i)
        self.Xr, self.Xi = Xr, Xi
        self.lam = [prob.variable(f"lam{k}", M, cone="nonneg") for k in range(K)]
        sum_r, sum_i = sum(Xr), sum(Xi)
        for k in range(K):
            Mr = self.inv_gamma * Xr[k] - (sum_r - Xr[k])
            Mi = self.inv_gamma * Xi[k] - (sum_i - Xi[k])
            sel = _index_array([a for a in range(R) if pattern[k, red.owner[a]]])
            lmi, scalar = _lmi_parts(red, k, sel, Mr, Mi, self.lam[k], self.eps2[k])
            if lmi is not None:
                prob.add(cp.PSD(lmi - t * np.eye(lmi.shape[0])), f"lmi user {k}")
            else:
                prob.add(scalar >= t, f"sinr user {k}")
        for m, idx in enumerate(red.power_selector()):
            prob.add(sum(cp.sum(cp.diag(x)[idx]) for x in Xr) <= 1.0, f"power AP {m}")
        prob.add(t <= 1.0)
        prob.maximize(t)
        self.problem = prob

    def solve(self, gamma, tol):
        self.problem.set(inv_gamma=1.0 / gamma, eps2=self.red.eps**2 * self.pattern)
        sol = conic.solve(self.problem, tol=tol)
        if sol.status == conic.NUMERICAL_FAILURE:
            return None, sol
        if sol.infeasible or sol.objective < 0:
            return False, sol
        return True, sol

    def values(self):
        K = self.red.K
        Xr = np.array([x.value for x in self.Xr])
        Xi = np.array([x.value for x in self.Xi])
        X = Xr + 1j * Xi
        X = (X + np.conj(np.transpose(X, (0, 2, 1)))) / 2
        # users with no error ball never touch their multipliers
        lam = np.array([self.lam[k].value if self.lam[k].value is not None else np.zeros(self.red.M)
                        for k in range(K)])
        lam = np.maximum(lam, 0.0) * self.pattern
        Y = [y.value for y in self.Y]
        return X, lam, Y


_CACHE: dict = {}


def _feasibility(red: _Reduced, maps=None, key=None) -> _RobustFeasibility:
    pattern = red.eps > 0
    ck = (key, pattern.tobytes()) if key is not None else None
    if ck is not None and ck in _CACHE:
        prob = _CACHE[ck]
        prob.red = red
        return prob
    prob = _RobustFeasibility(red, pattern, maps)
    if ck is not None:
        if len(_CACHE) > 16:
            _CACHE.clear()
        _CACHE[ck] = prob
    return prob


def _instance_key(red: _Reduced, tag):
    return (tag, red.K, red.M, red.R, red.g.tobytes(), red.Q.tobytes())


# ---------------------------------------------------------------------------
# bisection drivers
# ---------------------------------------------------------------------------
@dataclass
class BisectionTrace:
    lower: list = field(default_factory=list)
    upper: list = field(default_factory=list)
    feasible: list = field(default_factory=list)

    @property
    def widths(self):
        return [u - l for l, u in zip(self.lower, self.upper)]


def _bisect(test, lo, hi, tol_b, trace: BisectionTrace, max_iter=200):
    """Largest feasible value on [lo, hi] given test(value) -> bool; lo assumed feasible."""
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        ok = test(mid)
        trace.feasible.append(bool(ok))
        if ok:
            lo, best = mid, mid
        else:
            hi = mid
        trace.lower.append(lo)
        trace.upper.append(hi)
        if hi - lo <= tol_b * hi:
            break
    return lo, best


def _bounds_at(eta, crlb_bar, channels, config):
    total = crlb_at(crlb_bar, eta, config.sensing_slot, config.block_duration)
    return uncertainty_bounds(total, channels, config)


def bi_rbo(eta: float, crlb_bar: float, channels: ChannelSet, config: ScenarioConfig,
           R_upper: float | None = None, tol_b: float = 1e-3, R_lower: float = 0.0,
           solver_tol: float = 1e-8, bounds: UncertaintyBounds | None = None, variant: str = "main"):
    """Bisection on the common rate with the robust feasibility SDP as oracle.

    ``R_lower`` seeds the search; if it turns out infeasible the search
    restarts from zero. Returns
    ``(beams, certificate, trace)`` where ``beams`` are the relaxed matrices
    (or, for ``variant="mrt"``, the MRT covariances ``A_k P_k A_k^H``) of the
    last feasible point and ``certificate.rate`` its rate.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if bounds is None:
        bounds = _bounds_at(eta, crlb_bar, channels, config)
    if R_upper is None:
        R_upper = default_rate_upper(eta, channels, config)
    if not R_upper > 0:
        raise ValueError("R_upper must be positive")
    red = _Reduced(channels, config, bounds.eps)
    maps = _mrt_maps(red, channels) if variant == "mrt" else None
    feas = _feasibility(red, maps, key=_instance_key(red, variant))
    T = config.block_duration
    found = {}
    failures = []

    def test(R):
        gamma = float(gamma_from_rate(R, eta, T))
        ok, sol = feas.solve(gamma, solver_tol)
        if ok is None:
            failures.append((R, sol.solver_status))
            return False
        if ok:
            found["R"] = R
            found["values"] = feas.values()
            found["t"] = sol.objective
        return ok

    trace = BisectionTrace()
    R_lower = max(0.0, min(R_lower, R_upper))
    lo, hi = 0.0, R_upper
    if R_lower > 0:
        if test(R_lower):
            lo = R_lower
        else:
            hi = R_lower
    _bisect(test, lo, hi, tol_b, trace)
    K, R = red.K, red.R
    diag = {"bisection_widths": trace.widths, "solver_failures": failures, "variant": variant,
            "reduced_dimension": R}
    if "values" not in found:
        W = np.zeros((K, red.M * red.N, red.M * red.N), complex)
        cert = RobustRateCertificate(rate=0.0, gamma=0.0, eta=eta,
                                     multipliers=np.zeros((K, red.M)),
                                     min_eigenvalues=np.full(K, np.nan),
                                     diagnostics=dict(diag, note="no positive rate was feasible"))
        return BeamformerSet(red.M, matrices=W), cert, trace
    rate = found["R"]
    X, lam, Y = found["values"]
    Wn = red.lift(X)
    W = Wn * config.comm_power_budget
    beams = BeamformerSet(red.M, matrices=W)
    gamma = float(gamma_from_rate(rate, eta, T))
    mins = np.array([_normalized_min_eig(k, gamma, beams, channels, bounds,
                                         lam[k] * config.comm_power_budget, config)
                     for k in range(K)])
    diag["slack"] = found["t"]
    if variant == "mrt":
        diag["mrt_powers"] = [np.asarray(y) for y in Y]
    cert = RobustRateCertificate(rate=rate, gamma=gamma, eta=eta,
                                 multipliers=lam * config.comm_power_budget,
                                 min_eigenvalues=mins, diagnostics=diag)
    return beams, cert, trace


def _normalized_min_eig(k, gamma, beams, channels, bounds, lam, config):
    """Smallest eigenvalue of user k's LMI over the APs with a nonzero error radius.

    A zero radius pins that block of the error to zero, so its rows drop out
    and only the corner remains when every radius is zero.
    """
    L = build_robust_lmi(k, gamma, beams, channels, bounds, lam, config)
    N = channels.n_elements
    keep = [m * N + i for m in range(channels.n_aps) if bounds.eps[k, m] > 0 for i in range(N)]
    keep.append(L.shape[0] - 1)
    L = L[np.ix_(keep, keep)]
    return float(np.linalg.eigvalsh(L / config.noise_power)[0])


# ---------------------------------------------------------------------------
# rank-one extraction and certification
# ---------------------------------------------------------------------------
def extract_rank_one(beams: BeamformerSet, config: ScenarioConfig):
    """Leading eigenvector beams with a common per-AP power scaling.

    Returns ``(BeamformerSet of vectors, defects, rho)`` where
    ``defects[k] = 1 - lambda_max / Tr(W_k)``.
    """
    W = beams.matrices
    K, n = W.shape[:2]
    w = np.zeros((K, n), complex)
    defects = np.zeros(K)
    for k in range(K):
        vals, vecs = np.linalg.eigh((W[k] + W[k].conj().T) / 2)
        lmax = max(vals[-1], 0.0)
        tr = max(vals.clip(min=0).sum(), 0.0)
        defects[k] = 1.0 - lmax / tr if tr > 0 else 0.0
        v = vecs[:, -1]
        # fix the global phase so the largest entry is real positive
        v = v * np.exp(-1j * np.angle(v[np.argmax(np.abs(v))]))
        w[k] = math.sqrt(lmax) * v
    tmp = BeamformerSet(beams.n_aps, vectors=w)
    power = tmp.per_ap_power()
    with np.errstate(divide="ignore"):
        ratios = np.where(power > 0, config.comm_power_budget / power, np.inf)
    rho = float(min(1.0, math.sqrt(ratios.min()))) if np.isfinite(ratios.min()) else 1.0
    return BeamformerSet(beams.n_aps, vectors=w * rho), defects, rho


class _Certifier:
    """min s s.t. the user's LMI holds with M_k = s W_k - sum_j W_j (fixed beams).

    The constraint is linear in (s, lam), so the largest certifiable SINR is
    1 / s* without bisection. ``s`` is carried relative to its nominal value
    ``s0 = 1 / SINR(h_k)`` (a lower bound on s*), which keeps the objective
    near one whatever the SINR.
    """

    def __init__(self, red: _Reduced, Wred: np.ndarray, k: int, pattern):
        self.red, self.k = red, k
        g = red.g[k]
        Wk = Wred[k]
        others = Wred.sum(axis=0) - Wk
        sig = (g.conj() @ Wk @ g).real
        intf = (g.conj() @ others @ g).real
        self.s0 = (intf + 1.0) / sig if sig > 0 else np.inf
        s0 = self.s0 if np.isfinite(self.s0) else 1.0
        prob = conic.ConicProblem(f"certify user {k}")
        u = prob.variable("u", cone="nonneg")
        lam = prob.variable("lam", red.M, cone="nonneg")
        self.u, self.lam = u, lam
        self.fixed_u = prob.parameter("fixed_u", nonneg=True, value=1.0)
        self.eps2 = prob.parameter("eps2", red.M, nonneg=True, value=np.zeros(red.M))
        sel = _index_array([a for a in range(red.R) if pattern[k, red.owner[a]]])

        def lmi_for(scale):
            Mr = scale * (s0 * Wk.real) - others.real
            Mi = scale * (s0 * Wk.imag) - others.imag
            return _lmi_parts(red, k, sel, Mr, Mi, lam, self.eps2)

        lmi, scalar = lmi_for(u)
        prob.add(cp.PSD(lmi) if lmi is not None else scalar >= 0)
        prob.add(u <= 1e12)
        prob.minimize(u)
        self.p1 = prob
        # at a fixed s, maximize the eigenvalue slack
        p2 = conic.ConicProblem(f"certify slack user {k}")
        p2.variables.update(lam=lam)
        t = p2.variable("t")
        lmi2, scalar2 = lmi_for(self.fixed_u)
        if lmi2 is not None:
            p2.add(cp.PSD(lmi2 - t * np.eye(lmi2.shape[0])))
        else:
            p2.add(scalar2 >= t)
        p2.add(t <= 1.0)
        p2.maximize(t)
        p2.parameters.update(fixed_u=self.fixed_u, eps2=self.eps2)
        self.p2 = p2


def certify_worst_case_rate(beams: BeamformerSet, eta: float, bounds: UncertaintyBounds,
                            channels: ChannelSet, config: ScenarioConfig, tol_b: float = 1e-3,
                            solver_tol: float = 1e-8) -> RobustRateCertificate:
    """Largest common rate certified by the S-procedure for fixed vector beams.

    Each user's largest certifiable SINR is found by a linear SDP in
    ``(1/gamma, lam)``; the value is then backed off until the multipliers
    found at the fixed SINR give an LMI whose smallest eigenvalue (normalized
    by the noise power) is nonnegative when re-evaluated in double precision.
    """
    if beams.is_relaxed:
        raise ValueError("certification expects vector beams")
    K = channels.n_users
    red = _Reduced(channels, config, bounds.eps, extra=beams.vectors)
    Wn = beams.covariances / config.comm_power_budget
    Wred = red.reduce(Wn)
    pattern = red.eps > 0
    gammas = np.zeros(K)
    lams = np.zeros((K, red.M))
    mins = np.full(K, np.nan)
    notes = []
    for k in range(K):
        cert = _Certifier(red, Wred, k, pattern)
        if not np.isfinite(cert.s0):
            notes.append(f"user {k}: no useful signal")
            continue
        cert.p1.set(eps2=red.eps[k] ** 2 * pattern[k])
        sol = conic.solve(cert.p1, tol=solver_tol)
        if not sol.optimal or cert.u.value is None or cert.u.value >= 1e12 * (1 - 1e-6):
            notes.append(f"user {k}: no positive SINR certifiable ({sol.status})")
            continue
        u_star = max(float(cert.u.value), 1.0)
        backoff = 1e-6
        while backoff <= 0.5:
            u_try = u_star * (1.0 + backoff)
            cert.fixed_u.value = u_try
            sol2 = conic.solve(cert.p2, tol=solver_tol)
            if sol2.optimal and sol2.objective is not None and sol2.objective >= 0:
                lam_v = cert.lam.value if cert.lam.value is not None else np.zeros(red.M)
                lam_k = np.maximum(lam_v, 0.0) * pattern[k] * config.comm_power_budget
                g_try = 1.0 / (cert.s0 * u_try)
                me = _normalized_min_eig(k, g_try, beams, channels, bounds, lam_k, config)
                if me >= 0.0:
                    gammas[k] = g_try
                    lams[k] = lam_k
                    mins[k] = me
                    break
            backoff *= 10.0
        else:
            notes.append(f"user {k}: verification failed after back-off")
    gamma = float(gammas.min())
    rate = float(rate_from_gamma(gamma, eta, config.block_duration))
    return RobustRateCertificate(rate=rate, gamma=gamma, eta=eta, multipliers=lams,
                                 min_eigenvalues=mins, user_gammas=gammas,
                                 diagnostics={"notes": notes})


def nominal_rate(beams: BeamformerSet, eta: float, channels: ChannelSet, config: ScenarioConfig) -> float:
    sig, intf = sinr(beams, channels.stacked)
    gam = sig / (intf + config.noise_power)
    return float(rate_from_gamma(gam.min(), eta, config.block_duration))


# ---------------------------------------------------------------------------
# error-ignorant SOCP
# ---------------------------------------------------------------------------
class _EiSocp:
    def __init__(self, red: _Reduced):
        K, R = red.K, red.R
        prob = conic.ConicProblem("ei-socp")
        self.c = prob.parameter("c", nonneg=True, value=1.0)
        ur = [prob.variable(f"ur{k}", R) for k in range(K)]
        ui = [prob.variable(f"ui{k}", R) for k in range(K)]
        G = red.g
        for k in range(K):
            gr, gi = G[k].real, G[k].imag
            useful = gr @ ur[k] + gi @ ui[k]
            prob.add(gr @ ui[k] - gi @ ur[k] == 0, f"phase user {k}")
            terms = []
            for j in range(K):
                if j == k:
                    continue
                terms += [gr @ ur[j] + gi @ ui[j], gr @ ui[j] - gi @ ur[j]]
            terms.append(cp.Constant(1.0))
            prob.add_soc(self.c * useful, cp.hstack(terms), f"sinr user {k}")
        for m, idx in enumerate(red.power_selector()):
            stack = cp.hstack([cp.hstack([ur[k][idx], ui[k][idx]]) for k in range(K)])
            prob.add_soc(cp.Constant(1.0), stack, f"power AP {m}")
        prob.minimize(0)
        self.prob, self.ur, self.ui = prob, ur, ui

    def solve(self, gamma, tol):
        self.prob.set(c=1.0 / math.sqrt(gamma))
        return conic.solve(self.prob, tol=tol)


def ei_socp_feasibility(gamma: float, channels: ChannelSet, config: ScenarioConfig,
                        solver_tol: float = 1e-8, _cache: dict | None = None):
    """Beams meeting nominal SINR ``gamma`` for every user, or None if infeasible."""
    K = channels.n_users
    n = channels.n_aps * channels.n_elements
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0:
        return BeamformerSet(channels.n_aps, vectors=np.zeros((K, n), complex))
    red = _Reduced(channels, config)
    key = ("ei",) + _instance_key(red, "ei")[1:]
    socp = _CACHE.get(key)
    if socp is None:
        socp = _EiSocp(red)
        _CACHE[key] = socp
    sol = socp.solve(gamma, solver_tol)
    if not sol.optimal:
        return None
    u = np.array([socp.ur[k].value + 1j * socp.ui[k].value for k in range(K)])
    w = (u @ red.Q.T) * math.sqrt(config.comm_power_budget)
    return BeamformerSet(channels.n_aps, vectors=w)


def ei_bisection(eta, channels, config, tol_b=1e-3, R_upper=None, solver_tol=1e-8):
    """Largest nominal common rate with the error-ignorant SOCP; returns (beams, rate, trace)."""
    if R_upper is None:
        R_upper = default_rate_upper(eta, channels, config)
    T = config.block_duration
    found = {}

    def test(R):
        b = ei_socp_feasibility(float(gamma_from_rate(R, eta, T)), channels, config, solver_tol)
        if b is not None:
            found["beams"], found["R"] = b, R
            return True
        return False

    trace = BisectionTrace()
    _bisect(test, 0.0, R_upper, tol_b, trace)
    if "beams" not in found:
        n = channels.n_aps * channels.n_elements
        return BeamformerSet(channels.n_aps, vectors=np.zeros((channels.n_users, n), complex)), 0.0, trace
    return found["beams"], found["R"], trace


# ---------------------------------------------------------------------------
# MRT power allocation
# ---------------------------------------------------------------------------
def mrt_directions(channels: ChannelSet) -> np.ndarray:
    """A_k = blkdiag(h_km / ||h_km||), shape (K, MN, M)."""
    K, M, N = channels.n_users, channels.n_aps, channels.n_elements
    H = channels.channels
    A = np.zeros((K, M * N, M), complex)
    for k in range(K):
        for m in range(M):
            A[k, m * N:(m + 1) * N, m] = H[k, m] / np.linalg.norm(H[k, m])
    return A


def _mrt_maps(red: _Reduced, channels: ChannelSet):
    A = mrt_directions(channels)
    return [red.Q.conj().T @ A[k] for k in range(red.K)]


def mrt_power_feasibility(gamma: float, eta: float, bounds: UncertaintyBounds,
                          channels: ChannelSet, config: ScenarioConfig, solver_tol: float = 1e-8):
    """Relaxed MRT power matrices P_k (watts) and multipliers, or None if infeasible."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    K, M = channels.n_users, channels.n_aps
    if gamma == 0:
        return np.zeros((K, M, M), complex), np.zeros((K, M))
    red = _Reduced(channels, config, bounds.eps)
    feas = _feasibility(red, _mrt_maps(red, channels), key=_instance_key(red, "mrt"))
    ok, _ = feas.solve(gamma, solver_tol)
    if not ok:
        return None
    _, lam, Y = feas.values()
    P = np.array([(y + y.conj().T) / 2 for y in Y]) * config.comm_power_budget
    return P, lam * config.comm_power_budget


def mrt_beams_from_powers(P: np.ndarray, channels: ChannelSet) -> BeamformerSet:
    A = mrt_directions(channels)
    W = np.einsum("kam,kmn,kbn->kab", A, P, A.conj())
    return BeamformerSet(channels.n_aps, matrices=W)


def extract_mrt(P: np.ndarray, channels: ChannelSet, config: ScenarioConfig):
    """p_k = rho sqrt(lambda_max) u_max(P_k); returns (vector beams, p, defects, rho)."""
    K, M = P.shape[:2]
    p = np.zeros((K, M), complex)
    defects = np.zeros(K)
    for k in range(K):
        vals, vecs = np.linalg.eigh((P[k] + P[k].conj().T) / 2)
        lmax = max(vals[-1], 0.0)
        tr = vals.clip(min=0).sum()
        defects[k] = 1.0 - lmax / tr if tr > 0 else 0.0
        v = vecs[:, -1]
        v = v * np.exp(-1j * np.angle(v[np.argmax(np.abs(v))]))
        p[k] = math.sqrt(lmax) * v
    power = (np.abs(p) ** 2).sum(axis=0)
    with np.errstate(divide="ignore"):
        ratios = np.where(power > 0, config.comm_power_budget / power, np.inf)
    rho = float(min(1.0, math.sqrt(ratios.min()))) if np.isfinite(ratios.min()) else 1.0
    p = p * rho
    A = mrt_directions(channels)
    w = np.einsum("kam,km->ka", A, p)
    return BeamformerSet(channels.n_aps, vectors=w), p, defects, rho


# ---------------------------------------------------------------------------
# adversarial oracle
# ---------------------------------------------------------------------------
def _project_balls(dh, eps, N):
    S = dh.shape[0]
    blocks = dh.reshape(S, -1, N)
    norms = np.linalg.norm(blocks, axis=2, keepdims=True)
    factor = np.minimum(1.0, eps[None, :, None] / np.maximum(norms, 1e-300))
    return (blocks * factor).reshape(S, -1)


def adversarial_oracle(beams: BeamformerSet, gamma: float, bounds: UncertaintyBounds,
                       channels: ChannelSet, config: ScenarioConfig, n_samples: int = 10_000,
                       n_steps: int = 100, seed: int = 0):
    """Search for channel errors that break the robust SINR constraint.

    Per user: ``n_samples`` random errors (uniform directions, radii on the
    ball boundary or inside) plus projected gradient descent on the
    quadratic from the worst samples. Returns per-user minima of the
    quadratic ``(h+dh)^H M (h+dh) - sigma^2`` (watts) and of the achieved SINR.
    """
    rng = np.random.default_rng(seed)
    K, M, N = channels.n_users, channels.n_aps, channels.n_elements
    W = beams.covariances
    min_q = np.zeros(K)
    min_sinr = np.zeros(K)
    for k in range(K):
        eps = bounds.eps[k]
        z = rng.standard_normal((n_samples, M, N)) + 1j * rng.standard_normal((n_samples, M, N))
        z /= np.linalg.norm(z, axis=2, keepdims=True)
        radius = np.where(rng.random((n_samples, M, 1)) < 0.8, 1.0,
                          rng.random((n_samples, M, 1)) ** (1.0 / (2 * N)))
        dh = (z * radius * eps[None, :, None]).reshape(n_samples, -1)
        q = robust_quadratic(k, gamma, beams, channels, dh, config)
        # projected gradient from the worst few samples
        Mk = _interference_matrix(k, gamma, W)
        h = channels.stacked[k]
        starts = dh[np.argsort(q)[:10]]
        step = 0.5 / max(np.linalg.norm(Mk, 2), 1e-300)
        x = starts
        for _ in range(n_steps):
            grad = (h + x) @ Mk.T  # d/d conj(dh) of the quadratic
            x = _project_balls(x - step * grad, eps, N)
        q_pg = robust_quadratic(k, gamma, beams, channels, x, config)
        allx = np.concatenate([dh, x])
        hs = h + allx
        sig = np.einsum("sa,ab,sb->s", hs.conj(), W[k], hs).real
        tot = np.einsum("sa,ab,sb->s", hs.conj(), W.sum(axis=0), hs).real
        min_q[k] = min(q.min(), q_pg.min())
        min_sinr[k] = float(np.min(sig / (tot - sig + config.noise_power)))
    return min_q, min_sinr
