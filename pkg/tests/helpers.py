"""Independent oracles used by the test suite.

Everything here recomputes expected values from first principles (exact
rational transport, linear programming, dense grids) and never calls the
code paths under test.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.optimize import linprog


def ot_cost_greedy(xs, ys) -> Fraction:
    """Exact 1-D optimal transport cost between uniform empirical measures.

    Quantile coupling (optimal for convex ground costs) in Fraction
    arithmetic; inputs are converted exactly from their binary float values.
    """
    xs = sorted(Fraction(float(v)) for v in xs)
    ys = sorted(Fraction(float(v)) for v in ys)
    mx, my = Fraction(1, len(xs)), Fraction(1, len(ys))
    cost = Fraction(0)
    i = j = 0
    rem_x, rem_y = mx, my
    while i < len(xs) and j < len(ys):
        move = min(rem_x, rem_y)
        cost += move * abs(xs[i] - ys[j])
        rem_x -= move
        rem_y -= move
        if rem_x == 0:
            i += 1
            rem_x = mx
        if rem_y == 0:
            j += 1
            rem_y = my
    return cost


def ot_cost_linprog(xs, ys) -> float:
    """Transport LP between uniform empirical measures (scipy highs)."""
    xs = np.sort(np.asarray(xs, dtype=float))
    ys = np.sort(np.asarray(ys, dtype=float))
    m, n = xs.size, ys.size
    cost = np.abs(xs[:, None] - ys[None, :]).ravel()
    a_eq = []
    b_eq = []
    for i in range(m):
        row = np.zeros(m * n)
        row[i * n:(i + 1) * n] = 1.0
        a_eq.append(row)
        b_eq.append(1.0 / m)
    for j in range(n):
        row = np.zeros(m * n)
        row[j::n] = 1.0
        a_eq.append(row)
        b_eq.append(1.0 / n)
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq),
                  bounds=(0, None), method="highs")
    assert res.success, res.message
    return float(res.fun)


def worst_case_lp(values_on_grid, grid, atoms, radius) -> float:
    """Discretized worst-case expectation over the W1 ball (primal LP).

    Minimizes sum_jk pi_jk * V(g_k) over transport plans moving each atom's
    1/n mass onto the grid, subject to total cost <= radius. Exact for the
    continuous problem whenever V and |z - z_j| are affine between adjacent
    grid points (piecewise-linear V with kinks and atoms on the grid).
    """
    grid = np.asarray(grid, dtype=float)
    vals = np.asarray(values_on_grid, dtype=float)
    atoms = np.sort(np.asarray(atoms, dtype=float))
    n, k = atoms.size, grid.size
    c = np.tile(vals, n)
    a_eq = np.zeros((n, n * k))
    for j in range(n):
        a_eq[j, j * k:(j + 1) * k] = 1.0
    b_eq = np.full(n, 1.0 / n)
    a_ub = np.abs(atoms[:, None] - grid[None, :]).reshape(1, -1)
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, A_ub=a_ub, b_ub=[radius],
                  bounds=(0, None), method="highs")
    assert res.success, res.message
    return float(res.fun)


def dense_grid_argmin(f, lo, hi, n=100_001):
    zs = np.linspace(lo, hi, n)
    vals = np.array([f(z) for z in zs])
    i = int(np.argmin(vals))
    return float(zs[i]), float(vals[i])


def piecewise_linear(knot_x, knot_y):
    """Callable piecewise-linear interpolant with flat extrapolation."""
    kx = np.asarray(knot_x, dtype=float)
    ky = np.asarray(knot_y, dtype=float)

    def f(z):
        return float(np.interp(z, kx, ky))

    f.knots = kx
    return f


def random_pl_instance(rng, lo=-0.5, hi=0.7, n_kinks=(3, 7), slope=8.0):
    """Random piecewise-linear value function on [lo, hi]."""
    k = int(rng.integers(*n_kinks))
    kx = np.sort(rng.uniform(lo, hi, size=k))
    kx = np.unique(np.concatenate([[lo], kx, [hi]]))
    ky = np.cumsum(rng.uniform(-slope, slope, size=kx.size) * np.diff(
        np.concatenate([[lo - 0.05], kx])))
    return piecewise_linear(kx, ky)
