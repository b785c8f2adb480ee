"""
Shapley values on a hand-made game
==================================

Exact enumeration, permutation sampling and the all-orderings average agree
on a small game.  The last part groups players the way the descriptor heads
are grouped.
"""

import numpy as np

from mtbirads import explain as E

# a three-player game: value grows with the square of the coalition size,
# plus a bonus when players 0 and 2 are together
def value(c):
    return float(c.sum()) ** 2 + 2.0 * (c[0] and c[2])

game = E.SetGame(value, 3, names=["a", "b", "c"])
exact = E.shapley_exact(game)
print("exact      ", np.round(exact.phi, 4))
print("orderings  ", np.round(E.brute_force_permutations(game), 4))

# sampling converges to the exact answer; efficiency holds for any sample count
for n in (10, 100, 2000):
    est = E.shapley_sampled(game, n, seed=0)
    print(f"{n:5d} perms", np.round(est.phi, 4), "gap", f"{est.efficiency_gap():.1e}")

###############################################################################
# Mean-imputation value functions
# -------------------------------
# Absent players take their baseline value.  For a linear model the
# attribution of feature i is w_i (x_i - b_i).

rng = np.random.default_rng(0)
w = rng.normal(size=5)
x, b = rng.uniform(size=5), np.full(5, 0.5)
v = E.ValueFunction(lambda z: z @ w, x, b)
print(np.round(E.shapley_exact(v).phi, 6))
print(np.round(w * (x - b), 6))

###############################################################################
# Grouped players
# ---------------
# Groups are switched on and off as a whole; the text chart shows signed
# contributions, largest magnitude first.

rep = E.shapley_grouped(v, groups=[[0, 1], [2], [3, 4]], names=["first", "middle", "last"])
print(E.render_text_bars(rep, width=20))
