"""Independent reference implementations used as test oracles.

Everything here works subject by subject with plain Python loops over
SubjectRecord lists, re-deriving consistency and propensities from the
regime triples and each record's stored probability vectors.  Nothing is
shared with the vectorized package code beyond the record type.
"""
from __future__ import annotations

import math

import numpy as np

TRIPLES = [(0, 0, 1), (0, 0, 2), (0, 1, 2), (0, 1, 1),
           (1, 3, 4), (1, 3, 2), (1, 4, 2), (1, 4, 4)]
FEASIBLE = {(0, 1): (0, 1), (0, 0): (1, 2), (1, 1): (3, 4), (1, 0): (2, 4)}


def regime_choice(triple, response):
    return triple[1] if response == 1 else triple[2]


def cbar1(rec, triple):
    return 1 if rec.a1 == triple[0] else 0


def consistent(rec, triple):
    if rec.kappa < 2:
        return 0
    return 1 if rec.a1 == triple[0] and rec.a2 == regime_choice(triple, rec.response) else 0


def propensities(rec, j, mode, triples=TRIPLES, feasible=FEASIBLE):
    """(pi1, pi2) of following regime j, from the record's own probability vectors."""
    t = triples[j]
    if mode == "upfront":
        pi1 = 0.0
        for k, tk in enumerate(triples):
            if tk[0] == t[0]:
                pi1 += rec.p1[k]
        if rec.kappa < 2:
            return pi1, math.nan
        num = 0.0
        for k, tk in enumerate(triples):
            if tk[0] == t[0] and regime_choice(tk, rec.response) == regime_choice(t, rec.response):
                num += rec.p1[k]
        return pi1, num / pi1
    pi1 = rec.p1[t[0]]
    if rec.kappa < 2:
        return pi1, math.nan
    opts = feasible[(rec.a1, rec.response)]
    choice = regime_choice(t, rec.response)
    return pi1, (rec.p2[opts.index(choice)] if choice in opts else 0.0)


def ipw(records, j, mode, weights=None):
    """Ratio-form weighted IPW over completers."""
    num = den = 0.0
    for i, rec in enumerate(records):
        if rec.delta != 1 or not consistent(rec, TRIPLES[j]):
            continue
        w = 1.0 if weights is None else weights[i]
        pi1, pi2 = propensities(rec, j, mode)
        num += w * rec.y / (pi1 * pi2)
        den += w / (pi1 * pi2)
    return num / den


def q2_value(beta2, x1, a1, x21, a2):
    f = [1.0, x1, 1.0 if a1 == 1 else 0.0, x21] + [1.0 if a2 == k else 0.0 for k in (1, 2, 3, 4)]
    return sum(b * v for b, v in zip(beta2, f))


def l_values(rec, j, beta1, beta2):
    """(L1, L2) for subject and regime from explicit coefficient vectors."""
    t = TRIPLES[j]
    l1 = beta1[j][0] + beta1[j][1] * rec.x1
    if rec.kappa < 2:
        return l1, math.nan
    return l1, q2_value(beta2, rec.x1, t[0], rec.x21, regime_choice(t, rec.response))


def aipw(records, j, mode, l_fn, weights=None):
    """Weighted AIPW normalized by the weighted completer count.

    ``l_fn(i, rec, j)`` returns (L1, L2) for subject i.
    """
    num = den = 0.0
    for i, rec in enumerate(records):
        if rec.delta != 1:
            continue
        w = 1.0 if weights is None else weights[i]
        t = TRIPLES[j]
        pi1, pi2 = propensities(rec, j, mode)
        c1 = cbar1(rec, t)
        c = consistent(rec, t)
        l1, l2 = l_fn(i, rec, j)
        ipw_term = (rec.y - l2) / (pi1 * pi2) if c else 0.0
        psi = ipw_term + (1 - c1 / pi1) * l1 + c1 / pi1 * l2
        num += w * psi
        den += w
    return num / den


def iaipw(records, j, mode, l_fn):
    """Interim AIPW over all enrolled subjects with completion/stage fractions."""
    n = len(records)
    nu_d = sum(r.delta for r in records) / n
    nu2 = sum(1 for r in records if r.kappa >= 2) / n
    total = 0.0
    for i, rec in enumerate(records):
        t = TRIPLES[j]
        pi1, pi2 = propensities(rec, j, mode)
        c1 = cbar1(rec, t)
        l1, l2 = l_fn(i, rec, j)
        total += (1 - c1 * (1 if rec.kappa >= 2 else 0) / (pi1 * nu2)) * l1
        if rec.kappa >= 2:
            total += c1 / (pi1 * nu2) * l2
        if rec.delta == 1:
            if consistent(rec, t):
                total += (rec.y - l2) / (pi1 * pi2 * nu_d)
    return total / n


def ols_qr(X, y):
    """Least squares through a Householder QR (numpy's LAPACK path), not normal equations."""
    q, r = np.linalg.qr(np.asarray(X, float))
    return np.linalg.solve(r, q.T @ np.asarray(y, float))


def ols_normal_gauss(X, y):
    """Normal equations solved by hand-written Gaussian elimination with partial pivoting."""
    X = [list(map(float, row)) for row in X]
    p = len(X[0])
    a = [[sum(X[i][r] * X[i][c] for i in range(len(X))) for c in range(p)] for r in range(p)]
    b = [sum(X[i][r] * y[i] for i in range(len(X))) for r in range(p)]
    for col in range(p):
        piv = max(range(col, p), key=lambda r: abs(a[r][col]))
        a[col], a[piv] = a[piv], a[col]
        b[col], b[piv] = b[piv], b[col]
        for r in range(col + 1, p):
            f = a[r][col] / a[col][col]
            for c in range(col, p):
                a[r][c] -= f * a[col][c]
            b[r] -= f * b[col]
    x = [0.0] * p
    for r in reversed(range(p)):
        x[r] = (b[r] - sum(a[r][c] * x[c] for c in range(r + 1, p))) / a[r][r]
    return np.array(x)


def stratum_moments(records, j, mode, theta):
    """(mu0, mu1) by direct summation, normalized by the completer count."""
    n = sum(r.delta for r in records)
    mu = [0.0, 0.0]
    for rec in records:
        if rec.delta != 1 or not consistent(rec, TRIPLES[j]):
            continue
        pi1, pi2 = propensities(rec, j, mode)
        mu[rec.response] += (rec.y - theta) ** 2 / (pi1 * pi2)
    return mu[0] / n, mu[1] / n


def nu_moments(records, j, mode, theta, l_fn):
    """(nu, nu1, nu2_0, nu2_1) by direct summation over completers."""
    n = sum(r.delta for r in records)
    out = [0.0, 0.0, 0.0, 0.0]
    for i, rec in enumerate(records):
        if rec.delta != 1 or not consistent(rec, TRIPLES[j]):
            continue
        pi1, pi2 = propensities(rec, j, mode)
        l1, l2 = l_fn(i, rec, j)
        out[0] += (rec.y - theta) ** 2 / (pi1 * pi2)
        out[1] += (rec.y - l1) ** 2 / (pi1 * pi2)
        out[2 + rec.response] += (rec.y - l2) ** 2 / (pi1 * pi2)
    return tuple(v / n for v in out)
