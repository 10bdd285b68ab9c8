"""
Learning the emulator with a DQN
================================

The Q-network sees the tracking error and the reference state and scores
all 25 directions. Training uses replay, a target network and the max of
the DQN and mean-squared Bellman errors as its loss.
"""

import numpy as np

from quantemu.dqn import DqnAgent, DqnConfig, EmulationEnv, greedy_rollout, train, unit_circle_starts
from quantemu.lti import ContinuousLti, discretize
from quantemu.plot import render_svg
from quantemu.quantization import DropoutPolicy

B = np.array([[1.0, 0.0, -1.0, 0.0],
              [0.0, 1.0, 0.0, 1.0]])
disc = discretize(np.zeros((2, 2)), B, 0.05)
env = EmulationEnv(disc, ContinuousLti([[0.0, 1.0], [-1.0, -2.0]]))

agent = DqnAgent(env, DqnConfig(), seed=0)
agent, log = train(agent, episodes=100, T=200, seed=0)
print("target syncs:", len(log.sync_checks))
# right after a sync the two loss terms coincide exactly
print("all sync checks exact:", all(c[1] == c[2] for c in log.sync_checks))

for x0 in unit_circle_starts(8):
    ro = greedy_rollout(agent, x0, 200)
    print(np.round(x0, 2), "terminal |x|: %.4f" % ro.terminal_error())

###############################################################################
# Channel dropout at run time. The argmax only ranges over directions the
# surviving channels can still produce.

ro = greedy_rollout(agent, np.array([1.0, 0.0]), 200, DropoutPolicy("random", m=4, k=1, seed=1))
print("one channel dropped per step, terminal |x|: %.4f" % ro.terminal_error())
with open("dqn_dropout.svg", "w") as fh:
    fh.write(render_svg(ro.quantized.states, ro.reference.states))
