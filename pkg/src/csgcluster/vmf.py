"""Von Mises-Fisher fitting, divergences, link weights, and sampling.

Everything here works on the unit hypersphere S^(d-1).  The density is
f(x) = C_d(kappa) * exp(kappa * mu . x) with normalizer
C_d(kappa) = kappa^(d/2-1) / ((2 pi)^(d/2) * I_(d/2-1)(kappa)).

Modified Bessel functions of the first kind are evaluated in the log domain
with three regimes: an exact log-summed power series, Olver's uniform
large-order asymptotic expansion (coefficients generated by the exact
rational recurrence at import time), and a large-argument ratio expansion
for the I_(v+1)/I_v ratios that dominate fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from csgcluster.stream_core import CFVector, DegenerateMeanError

KAPPA_MAX = 1.0e4


# ---------------------------------------------------------------------------
# Olver expansion coefficients u_k(t)
#
# u_0 = 1 and u_(k+1)(t) = t^2 (1 - t^2) u_k'(t) / 2
#                          + (1/8) Integral_0^t (1 - 5 s^2) u_k(s) ds.
# Each u_k is a polynomial t^k * (polynomial in t^2); generated exactly.
# ---------------------------------------------------------------------------


def _gen_olver_u(n_terms: int):
    polys = [{0: Fraction(1)}]
    for _ in range(n_terms - 1):
        u = polys[-1]
        nxt: dict[int, Fraction] = {}
        # t^2 (1 - t^2) u'(t) / 2
        for p, c in u.items():
            if p == 0:
                continue
            dc = c * p
            nxt[p + 1] = nxt.get(p + 1, Fraction(0)) + dc / 2
            nxt[p + 3] = nxt.get(p + 3, Fraction(0)) - dc / 2
        # (1/8) int_0^t (1 - 5 s^2) u(s) ds
        for p, c in u.items():
            nxt[p + 1] = nxt.get(p + 1, Fraction(0)) + c / (8 * (p + 1))
            nxt[p + 3] = nxt.get(p + 3, Fraction(0)) - 5 * c / (8 * (p + 3))
        polys.append({p: c for p, c in nxt.items() if c != 0})
    out = []
    for poly in polys:
        if not poly:
            out.append((0, np.array([0.0])))
            continue
        pmax = max(poly)
        coeffs = np.array([float(poly.get(p, 0)) for p in range(pmax + 1)])
        out.append((pmax, coeffs))
    return out


_OLVER_U = _gen_olver_u(10)  # u_0 .. u_9
_OLVER_NU_MIN = 15.0  # calibrated against mpmath; see tests


def _olver_series(t, nu):
    """Sum of u_k(t) / nu^k for the uniform expansion; t may be an array."""
    t = np.asarray(t, dtype=np.float64)
    total = np.zeros_like(t)
    for k, (pmax, coeffs) in enumerate(_OLVER_U):
        uk = np.zeros_like(t)
        tp = np.ones_like(t)
        for p in range(pmax + 1):
            c = coeffs[p]
            if c != 0.0:
                uk = uk + c * tp
            tp = tp * t
        total = total + uk / nu**k
    return total


def _olver_log_i(nu: float, x):
    """log I_nu(x) by Olver's uniform large-order expansion (nu >= ~15)."""
    x = np.asarray(x, dtype=np.float64)
    z = x / nu
    s = np.sqrt(1.0 + z * z)
    t = 1.0 / s
    eta = s + np.log(z / (1.0 + s))
    series = _olver_series(t, nu)
    return nu * eta - 0.5 * math.log(2.0 * math.pi * nu) - 0.5 * np.log(s) + np.log(series)


# ---------------------------------------------------------------------------
# log I_v(x): power series backbone plus Olver branch
# ---------------------------------------------------------------------------


def _series_log_i(v: float, x: float) -> float:
    """Log-domain power series: exact up to rounding for any (v, x)."""
    log_half_x = math.log(x / 2.0)
    lt = v * log_half_x - math.lgamma(v + 1.0)
    total = lt
    m = 0
    while True:
        m += 1
        lt += 2.0 * log_half_x - math.log(m) - math.log(v + m)
        total = np.logaddexp(total, lt)
        # stop once terms are decaying and negligibly small
        if lt < total - 40.0 and m * (v + m) > x * x / 4.0:
            break
        if m > 2_000_000:
            raise RuntimeError(f"series failed to converge for I_{v}({x})")
    return float(total)


def log_bessel_i(v: float, x) -> float | np.ndarray:
    """log of the modified Bessel function of the first kind, elementwise in x.

    Supports v >= 0 and x >= 0; returns -inf where I_v(x) = 0 (x = 0, v > 0).
    """
    if v < 0:
        raise ValueError("order must be non-negative")
    scalar = np.isscalar(x)
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if np.any(xs < 0):
        raise ValueError("argument must be non-negative")
    out = np.empty_like(xs)
    zero = xs == 0.0
    out[zero] = 0.0 if v == 0.0 else -math.inf
    pos = ~zero
    if np.any(pos):
        if v >= 100.0:
            out[pos] = _olver_log_i(v, xs[pos])
        else:
            out[pos] = [_series_log_i(v, float(xi)) for xi in xs[pos]]
    return float(out[0]) if scalar else out


def bessel_i(v: float, x) -> float | np.ndarray:
    """I_v(x); overflows to inf for very large arguments (use log_bessel_i then)."""
    return np.exp(log_bessel_i(v, x))


# ---------------------------------------------------------------------------
# Ratio A(nu, x) = I_(nu+1)(x) / I_nu(x), vectorized over x
# ---------------------------------------------------------------------------


def _ratio_cf(nu: float, x: np.ndarray) -> np.ndarray:
    """I_(nu+1)/I_nu via the standard continued fraction (Lentz), nu modest, x <= ~1000."""
    tiny = 1e-30
    f = np.full_like(x, tiny)
    c = f.copy()
    d = np.zeros_like(x)
    x2 = x * x
    max_iter = int(1.3 * float(x.max())) + 200
    conv = np.zeros(x.shape, dtype=bool)
    for k in range(1, max_iter + 1):
        a = x if k == 1 else x2
        b = 2.0 * (nu + k)
        d = b + a * d
        np.copyto(d, tiny, where=d == 0.0)
        c = b + a / c
        np.copyto(c, tiny, where=c == 0.0)
        d = 1.0 / d
        delta = c * d
        f = f * delta
        conv |= np.abs(delta - 1.0) < 5e-16
        if bool(conv.all()):
            break
    return f


def _ratio_hankel(nu: float, x: np.ndarray) -> np.ndarray:
    """Ratio via large-argument expansions whose exponential prefactors cancel."""

    def tail(v: float) -> np.ndarray:
        mu4 = 4.0 * v * v
        term = np.ones_like(x)
        total = np.ones_like(x)
        for k in range(1, 30):
            term = term * -(mu4 - (2 * k - 1) ** 2) / (8.0 * k * x)
            total = total + term
            if float(np.abs(term).max()) < 1e-17:
                break
        return total

    return tail(nu + 1.0) / tail(nu)


def bessel_ratio(nu: float, x) -> float | np.ndarray:
    """A(nu, x) = I_(nu+1)(x) / I_nu(x), elementwise; 0 at x = 0."""
    scalar = np.isscalar(x)
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(xs)
    pos = xs > 0.0
    if np.any(pos):
        xp = xs[pos]
        if nu >= _OLVER_NU_MIN:
            vals = np.exp(_olver_log_i(nu + 1.0, xp) - _olver_log_i(nu, xp))
        else:
            vals = np.empty_like(xp)
            small = xp <= 1000.0
            if np.any(small):
                vals[small] = _ratio_cf(nu, xp[small])
            if np.any(~small):
                vals[~small] = _ratio_hankel(nu, xp[~small])
        out[pos] = vals
    return float(out[0]) if scalar else out


def mean_resultant(d: int, kappa) -> float | np.ndarray:
    """A_d(kappa) = I_(d/2)(kappa) / I_(d/2-1)(kappa), the mean resultant length."""
    if d < 2:
        raise ValueError("dimension must be at least 2")
    return bessel_ratio(d / 2.0 - 1.0, kappa)


def mean_resultant_deriv(d: int, kappa, a=None):
    """A_d'(kappa) = 1 - A^2 - (d-1) A / kappa, elementwise; limit 1/d at 0."""
    scalar = np.isscalar(kappa)
    ks = np.atleast_1d(np.asarray(kappa, dtype=np.float64))
    if a is None:
        a = mean_resultant(d, ks)
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    out = np.empty_like(ks)
    tiny = ks < 1e-12
    out[tiny] = 1.0 / d
    big = ~tiny
    out[big] = 1.0 - a[big] * a[big] - (d - 1.0) * a[big] / ks[big]
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Normalizer and density
# ---------------------------------------------------------------------------


def log_norm_const(d: int, kappa: float) -> float:
    """log C_d(kappa) with the analytic uniform limit below kappa = 1e-8."""
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if kappa < 0:
        raise ValueError("concentration must be non-negative")
    if kappa < 1e-8:
        # uniform density on S^(d-1): Gamma(d/2) / (2 pi^(d/2))
        return math.lgamma(d / 2.0) - math.log(2.0) - (d / 2.0) * math.log(math.pi)
    nu = d / 2.0 - 1.0
    return nu * math.log(kappa) - (d / 2.0) * math.log(2.0 * math.pi) - float(
        log_bessel_i(nu, kappa)
    )


@dataclass
class VmfParams:
    """Fitted von Mises-Fisher parameters on S^(dim-1)."""

    mu: np.ndarray
    kappa: float
    dim: int


def vmf_log_density(x, params: VmfParams) -> float | np.ndarray:
    """Log density at unit vector(s) x, rows if 2-D."""
    base = log_norm_const(params.dim, params.kappa)
    proj = np.asarray(x, dtype=np.float64) @ params.mu
    return base + params.kappa * proj


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _fit_kappa_arrays(d: int, r_bar: np.ndarray, kappa_max: float, newton_steps: int) -> np.ndarray:
    """Vectorized concentration fit: Banerjee start, Newton refinement on A_d."""
    r = np.clip(r_bar, 0.0, 1.0)
    kappa = np.empty_like(r)
    r_cap = float(mean_resultant(d, kappa_max))
    capped = r >= r_cap
    kappa[capped] = kappa_max
    free = ~capped
    if np.any(free):
        rf = r[free]
        k0 = rf * (d - rf * rf) / np.maximum(1.0 - rf * rf, 1e-300)
        k0 = np.clip(k0, 1e-8, kappa_max)
        for _ in range(newton_steps):
            a = mean_resultant(d, k0)
            da = mean_resultant_deriv(d, k0, a)
            step = (a - rf) / np.maximum(da, 1e-300)
            k0 = np.clip(k0 - step, 1e-8, kappa_max)
        kappa[free] = k0
    return kappa


def vmf_fit(cf: CFVector, kappa_max: float = KAPPA_MAX, newton_steps: int = 5) -> VmfParams:
    """Fit (mu, kappa) from a cluster feature's count and linear sum.

    mu is the unit mean direction; kappa solves A_d(kappa) = |LS| / K via
    Newton from the standard rational starting point, capped at kappa_max.
    Raises DegenerateMeanError when the linear sum vanishes.
    """
    ls = np.asarray(cf.linear_sum, dtype=np.float64)
    d = int(ls.shape[0])
    norm = float(np.linalg.norm(ls))
    if norm == 0.0:
        raise DegenerateMeanError("degenerate mean direction: linear sum is zero")
    mu = ls / norm
    r_bar = np.array([norm / cf.count])
    kappa = float(_fit_kappa_arrays(d, r_bar, kappa_max, newton_steps)[0])
    return VmfParams(mu=mu, kappa=kappa, dim=d)


def vmf_fit_arrays(
    counts: np.ndarray,
    linear_sums: np.ndarray,
    kappa_max: float = KAPPA_MAX,
    newton_steps: int = 5,
):
    """Batched fit over M clusters: returns (mu (M,d), kappa (M,), degenerate (M,) bool).

    Degenerate rows get mu = 0 and kappa = 0 and must be handled by the caller.
    """
    ls = np.asarray(linear_sums, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    norms = np.linalg.norm(ls, axis=1)
    degenerate = norms == 0.0
    safe = np.maximum(norms, 1e-300)
    mu = ls / safe[:, None]
    mu[degenerate] = 0.0
    r_bar = np.where(degenerate, 0.0, norms / counts)
    kappa = _fit_kappa_arrays(ls.shape[1], r_bar, kappa_max, newton_steps)
    kappa[degenerate] = 0.0
    return mu, kappa, degenerate


# ---------------------------------------------------------------------------
# Fisher terms and the Taylor KL
# ---------------------------------------------------------------------------


def fisher_terms(d: int, kappa):
    """Per-parameter curvature scalars (tau_kappa, tau_kappa_mu, tau_mu).

    tau_kappa is the expectation-form Fisher information of the concentration,
    Var(mu . x) = A_d'(kappa).  The kappa-mu cross term vanishes identically:
    with nu = d/2 - 1 the recurrence I_(nu-1) - I_(nu+1) = (2 nu / kappa) I_nu
    cancels the printed numerator (d-2) I_nu - kappa (I_(nu-1) - I_(nu+1))
    exactly, for every d and kappa.  tau_mu = kappa^2.
    """
    scalar = np.isscalar(kappa)
    ks = np.atleast_1d(np.asarray(kappa, dtype=np.float64))
    tau_kappa = mean_resultant_deriv(d, ks)
    tau_kappa = np.atleast_1d(tau_kappa)
    tau_mu = ks * ks
    zeros = np.zeros_like(ks)
    if scalar:
        return float(tau_kappa[0]), float(zeros[0]), float(tau_mu[0])
    return tau_kappa, zeros, tau_mu


def fisher_terms_mc(d: int, kappa: float, n: int = 200_000, rng=None):
    """Monte-Carlo estimate of the same triple; validation oracle / alt backend.

    tau_kappa is estimated as E[(d/dkappa log f)^2] = E[(mu . x - A_d)^2]
    over samples of the distribution itself.
    """
    rng = np.random.default_rng(rng)
    mu = np.zeros(d)
    mu[0] = 1.0
    x = vmf_sample(mu, kappa, n, rng)
    a = float(mean_resultant(d, kappa))
    score = x @ mu - a
    return float(np.mean(score * score)), 0.0, kappa * kappa


def _taylor_quad_arrays(
    d: int,
    dk: np.ndarray,
    dmu: np.ndarray,
    mu_eval: np.ndarray,
    kappa_eval: np.ndarray,
    a_eval: np.ndarray,
    da_eval: np.ndarray,
    mu_term: str,
) -> np.ndarray:
    """Quadratic divergence form, vectorized over rows; clamped at zero."""
    proj = np.einsum("ij,ij->i", mu_eval, dmu)
    if mu_term == "full":
        quad = (
            da_eval * dk * dk
            + 2.0 * kappa_eval * da_eval * dk * proj
            + kappa_eval * a_eval * np.einsum("ij,ij->i", dmu, dmu)
            + kappa_eval * (kappa_eval - d * a_eval) * proj * proj
        )
    elif mu_term == "projected":
        quad = da_eval * dk * dk + (kappa_eval * kappa_eval) * proj * proj
    else:
        raise ValueError(f"unknown mu_term mode: {mu_term!r}")
    return np.maximum(0.5 * quad, 0.0)


def kl_vmf_taylor(
    p: VmfParams,
    q: VmfParams,
    eval_point: str = "merged",
    mu_term: str = "full",
) -> float:
    """Second-order divergence approximation of KL(p || q).

    The curvature is evaluated at q's parameters under the default "merged"
    reading (in engine use q is the merged-cluster fit) or at p's parameters
    under "first".  mu_term picks the full expectation-form metric (default)
    or the projected form that keeps only the kappa^2 mu mu^T block.
    """
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    if eval_point == "merged":
        ke, me = q.kappa, q.mu
    elif eval_point == "first":
        ke, me = p.kappa, p.mu
    else:
        raise ValueError(f"unknown eval_point mode: {eval_point!r}")
    ke_arr = np.array([ke])
    a = np.atleast_1d(mean_resultant(p.dim, ke_arr))
    da = np.atleast_1d(mean_resultant_deriv(p.dim, ke_arr, a))
    dk = np.array([q.kappa - p.kappa])
    dmu = (q.mu - p.mu)[None, :]
    out = _taylor_quad_arrays(p.dim, dk, dmu, me[None, :], ke_arr, a, da, mu_term)
    return float(out[0])


def js_vmf(p: VmfParams, q: VmfParams, eval_point: str = "merged", mu_term: str = "full") -> float:
    """Jensen-Shannon style symmetrization: (KL(p||q) + KL(q||p)) / 2.

    Under the "merged" reading both directions share the metric at q (the
    merged fit in engine use); under "first" each direction evaluates the
    metric at its own first argument.
    """
    if eval_point == "merged":
        fwd = kl_vmf_taylor(p, q, eval_point="merged", mu_term=mu_term)
        rev = kl_vmf_taylor(q, p, eval_point="first", mu_term=mu_term)
    else:
        fwd = kl_vmf_taylor(p, q, eval_point="first", mu_term=mu_term)
        rev = kl_vmf_taylor(q, p, eval_point="first", mu_term=mu_term)
    return 0.5 * (fwd + rev)


def link_weight(
    cf_a: CFVector,
    cf_b: CFVector,
    eval_point: str = "merged",
    mu_term: str = "full",
) -> float:
    """Edge weight in (0, 1] from the symmetrized divergence to the merged fit.

    weight = exp(-(JS(a, ab) + JS(b, ab)) / 2); identical clusters give 1.
    Degenerate fits fall back to (1 + cos) / 2 on the mean directions.
    """
    dist, _ = pair_divergence(cf_a, cf_b, eval_point=eval_point, mu_term=mu_term)
    return math.exp(-dist)


def pair_divergence(
    cf_a: CFVector,
    cf_b: CFVector,
    eval_point: str = "merged",
    mu_term: str = "full",
) -> tuple:
    """(divergence distance, used_fallback) for one cluster pair."""
    dist, fallback = pair_divergence_arrays(
        np.array([cf_a.count], dtype=np.float64),
        cf_a.linear_sum[None, :],
        np.array([cf_b.count], dtype=np.float64),
        cf_b.linear_sum[None, :],
        eval_point=eval_point,
        mu_term=mu_term,
    )
    return float(dist[0]), bool(fallback[0])


def pair_divergence_arrays(
    counts_a: np.ndarray,
    ls_a: np.ndarray,
    counts_b: np.ndarray,
    ls_b: np.ndarray,
    eval_point: str = "merged",
    mu_term: str = "full",
    kappa_max: float = KAPPA_MAX,
):
    """Vectorized divergence distance for M cluster pairs.

    Returns (distance (M,), used_fallback (M,) bool).  distance is
    (JS(a, m) + JS(b, m)) / 2 against the merged fit m; the link weight is
    exp(-distance).  Pairs with any degenerate fit use the cosine fallback
    -log((1 + cos) / 2) on mean directions (cos taken as 0 when undefined).
    """
    d = ls_a.shape[1]
    counts_m = counts_a + counts_b
    ls_m = ls_a + ls_b
    mu_a, k_a, deg_a = vmf_fit_arrays(counts_a, ls_a, kappa_max)
    mu_b, k_b, deg_b = vmf_fit_arrays(counts_b, ls_b, kappa_max)
    mu_m, k_m, deg_m = vmf_fit_arrays(counts_m, ls_m, kappa_max)
    fallback = deg_a | deg_b | deg_m

    dist = np.zeros(ls_a.shape[0], dtype=np.float64)
    ok = ~fallback
    if np.any(ok):
        if eval_point == "merged":
            ke, me = k_m[ok], mu_m[ok]
            a_e = np.atleast_1d(mean_resultant(d, ke))
            da_e = np.atleast_1d(mean_resultant_deriv(d, ke, a_e))
            js_a = _taylor_quad_arrays(
                d, k_m[ok] - k_a[ok], mu_m[ok] - mu_a[ok], me, ke, a_e, da_e, mu_term
            )
            js_b = _taylor_quad_arrays(
                d, k_m[ok] - k_b[ok], mu_m[ok] - mu_b[ok], me, ke, a_e, da_e, mu_term
            )
        elif eval_point == "first":
            # metric at each KL's first argument, averaged per JS pair
            def one_side(mu_c, k_c):
                a_c = np.atleast_1d(mean_resultant(d, k_c))
                da_c = np.atleast_1d(mean_resultant_deriv(d, k_c, a_c))
                fwd = _taylor_quad_arrays(
                    d, k_m[ok] - k_c, mu_m[ok] - mu_c, mu_c, k_c, a_c, da_c, mu_term
                )
                a_m = np.atleast_1d(mean_resultant(d, k_m[ok]))
                da_m = np.atleast_1d(mean_resultant_deriv(d, k_m[ok], a_m))
                rev = _taylor_quad_arrays(
                    d, k_c - k_m[ok], mu_c - mu_m[ok], mu_m[ok], k_m[ok], a_m, da_m, mu_term
                )
                return 0.5 * (fwd + rev)

            js_a = one_side(mu_a[ok], k_a[ok])
            js_b = one_side(mu_b[ok], k_b[ok])
        else:
            raise ValueError(f"unknown eval_point mode: {eval_point!r}")
        dist[ok] = 0.5 * (js_a + js_b)

    if np.any(fallback):
        norms_a = np.linalg.norm(ls_a[fallback], axis=1)
        norms_b = np.linalg.norm(ls_b[fallback], axis=1)
        both = (norms_a > 0) & (norms_b > 0)
        cos = np.zeros(int(fallback.sum()))
        if np.any(both):
            na = ls_a[fallback][both] / norms_a[both][:, None]
            nb = ls_b[fallback][both] / norms_b[both][:, None]
            cos[both] = np.einsum("ij,ij->i", na, nb)
        w = np.maximum((1.0 + cos) / 2.0, 1e-12)
        dist[fallback] = -np.log(w)
    return dist, fallback


# ---------------------------------------------------------------------------
# Sampling (tangent-normal decomposition with rejection on the cosine)
# ---------------------------------------------------------------------------


def vmf_sample(mu: np.ndarray, kappa: float, n: int, rng=None) -> np.ndarray:
    """Draw n unit vectors from vMF(mu, kappa); deterministic given a seeded rng."""
    rng = np.random.default_rng(rng)
    mu = np.asarray(mu, dtype=np.float64)
    d = mu.shape[0]
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if kappa < 0:
        raise ValueError("concentration must be non-negative")
    norm = np.linalg.norm(mu)
    if norm == 0:
        raise ValueError("mean direction must be non-zero")
    mu = mu / norm

    if kappa == 0.0:
        g = rng.standard_normal((n, d))
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    b = (d - 1.0) / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + (d - 1.0) ** 2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (d - 1.0) * math.log(1.0 - x0 * x0)

    w = np.empty(n)
    filled = 0
    while filled < n:
        m = max(n - filled, 64)
        z = rng.beta((d - 1.0) / 2.0, (d - 1.0) / 2.0, size=m)
        wc = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(m)
        accept = kappa * wc + (d - 1.0) * np.log1p(-x0 * wc) - c >= np.log(u)
        good = wc[accept]
        take = min(len(good), n - filled)
        w[filled : filled + take] = good[:take]
        filled += take

    g = rng.standard_normal((n, d))
    g = g - np.outer(g @ mu, mu)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    # regenerate the rare exactly-parallel draws deterministically
    bad = gn[:, 0] < 1e-12
    while np.any(bad):
        rep = rng.standard_normal((int(bad.sum()), d))
        rep = rep - np.outer(rep @ mu, mu)
        g[bad] = rep
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        bad = gn[:, 0] < 1e-12
    v = g / gn
    return np.sqrt(np.maximum(1.0 - w * w, 0.0))[:, None] * v + w[:, None] * mu


def monte_carlo_kl(p: VmfParams, q: VmfParams, n: int = 1_000_000, rng=None) -> float:
    """Estimate KL(p || q) by sampling p; validation oracle, not a production path."""
    rng = np.random.default_rng(rng)
    x = vmf_sample(p.mu, p.kappa, n, rng)
    return float(np.mean(vmf_log_density(x, p) - vmf_log_density(x, q)))
