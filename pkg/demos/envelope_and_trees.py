"""Why only the convex envelope of the loss matters, shown on an exact binary tree.

A loss with a jump at 0.3 is not convex.  Before maturity the hedger can
randomize between the two sides of the jump, so the value curve follows the
convex envelope instead of the loss itself.
"""
import numpy as np

from weakbsde import Driver, LossMap, ProblemSpec, convex_envelope, envelope_loss, generate_paths, value_curve
from weakbsde.gexpect import BinomialLattice
from weakbsde.oracle import TreeInstance, tree_primal_bruteforce, tree_primal_exact

loss = LossMap.from_phi([0.0, 0.3, 0.3, 1.0], [0.0, 0.1, 0.5, 1.0])
env = convex_envelope(loss)
grid = np.linspace(0, 1, 11)

spec = ProblemSpec(loss, Driver.zero())
ens = generate_paths(spec, 20_000, 16, seed=1)
curve = value_curve(spec, grid, ens, method="profile")

print(f"{'m':>5} {'phi':>7} {'envelope':>9} {'curve':>9}")
for m, y in zip(grid, curve.values):
    print(f"{m:5.2f} {float(loss.phi(m)):7.3f} {float(env(m)):9.4f} {y:9.4f}")

# On a finite tree the same problem is a fractional knapsack, solved exactly.
lattice = BinomialLattice(3, 1.0, recombining=False)
print("\ndiscounted tree, g = -0.05 y - 0.2 z, depth 3")
print("(the grid search accepts means within 1/50 of m, so it may undercut the exact value)")
print(f"{'m':>5} {'exact':>9} {'grid search':>12}")
for m in (0.2, 0.5, 0.8):
    tree = TreeInstance.from_lattice(lattice, -0.05, -0.2, envelope_loss(loss), m)
    exact, M = tree_primal_exact(tree)
    brute, _ = tree_primal_bruteforce(tree)
    print(f"{m:5.2f} {exact:9.5f} {brute:12.5f}   leaves {np.round(M, 3)}")
