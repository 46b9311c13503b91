"""Probing metric-like properties of the regularized distance.

1. The triangle inequality for the entropy-adjusted distance at q = 1 holds
   on random triples for beta in {1, 2}; beta = 0 is shown for contrast.
2. Gluing two plans always yields a feasible plan, but the entropy
   inequality behind the triangle argument only holds at q = 1. An exact
   rational counterexample at q = 2 is printed.

    python3 demos/metric_properties.py
"""

from fractions import Fraction

import numpy as np

from trot import divergence_lab as lab


def main():
    M = lab.random_metric_matrix(4, np.random.default_rng(3))
    reports = lab.triangle_sweep(M, [0.0, 1.0, 2.0], lam=2.0, trials=200, seed=3)
    print("triangle inequality, q = 1, lambda = 2, 200 random triples")
    for beta, rep in zip((0.0, 1.0, 2.0), reports):
        print(f"  beta = {beta}: {rep.violations} violations "
              f"(largest excess {rep.max_violation:+.2e})")

    print("\ngluing sweep, 1000 trials")
    for q in (1.0, 1.5, 2.0, 4.0):
        res = lab.gluing_sweep(q, 1000, seed=4)
        print(f"  q = {q}: infeasible {res['feasibility'].violations}, "
              f"entropy inequality broken {res['monotonicity'].violations} times "
              f"(worst drop {res['monotonicity'].max_violation:.3f})")

    F = Fraction
    P = [[F(5, 11), F(1, 11)], [F(5, 11), F(0)]]
    Q = [[F(50, 99), F(40, 99)], [F(0), F(1, 11)]]
    y = [sum(col) for col in zip(*P)]
    S = [[sum(P[i][j] * Q[j][k] / y[j] for j in range(2)) for k in range(2)]
         for i in range(2)]
    h2 = lambda cells: 1 - sum(c * c for c in cells)
    flat = lambda A: [a for row in A for a in row]
    x = [sum(row) for row in P]
    z = [sum(col) for col in zip(*Q)]
    gap = (h2(flat(S)) - h2(x) - h2(z)) - (h2(flat(P)) - h2(x) - h2(y))
    print(f"\nexact q = 2 counterexample: entropy gap = {gap} = {float(gap):.4f} < 0")


if __name__ == "__main__":
    main()
