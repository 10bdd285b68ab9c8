"""
Directions, dropout and MPC emulation
=====================================

Four ternary channels drive a planar integrator. Every step the plant can
move along one of 25 directions; an N-step MPC picks the direction sequence
that best follows a damped oscillator.
"""

import numpy as np

from quantemu.lti import ContinuousLti, discretize
from quantemu.mpc import MpcConfig, mpc_rollout
from quantemu.plot import render_svg
from quantemu.quantization import DropoutMask, DropoutPolicy, build_alphabet

h = 0.05
B = np.array([[1.0, 0.0, -1.0, 0.0],
              [0.0, 1.0, 0.0, 1.0]])
disc = discretize(np.zeros((2, 2)), B, h)
ref = ContinuousLti([[0.0, 1.0], [-1.0, -2.0]])

# 3^4 = 81 activation patterns collapse to 25 distinct moves
alphabet = build_alphabet(disc.B_d)
print("directions:", len(alphabet))
print(np.round(alphabet.directions / h).astype(int).T)

# dropping channels shrinks the set of reachable moves
for dropped in [(0,), (1,), (0, 1), (0, 2)]:
    mask = DropoutMask(dropped, 4)
    print(f"drop {dropped}: {int(alphabet.available(mask).sum())} directions left")

###############################################################################
# Receding-horizon MPC from (1, 0)

cfg = MpcConfig(P=5 * np.eye(2), Q=5 * np.eye(2), R=0.05 * np.eye(4), N=2)
ro = mpc_rollout(np.array([1.0, 0.0]), 200, disc, ref, cfg, alphabet=alphabet)
print("terminal |x|:", ro.terminal_error())
print("worst tracking error:", ro.tracking_errors().max())

# the same controller with one random channel dropped per step
ro_drop = mpc_rollout(np.array([1.0, 0.0]), 200, disc, ref, cfg,
                      DropoutPolicy("random", m=4, k=1, seed=0), alphabet)
print("with dropout, terminal |x|:", ro_drop.terminal_error())

with open("mpc_emulation.svg", "w") as fh:
    fh.write(render_svg(ro.quantized.states, ro.reference.states))
