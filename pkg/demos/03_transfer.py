"""
Reusing a trained policy on a similar system
============================================

If the new flow is ``O H O^-1`` the old policy can be reused: pull the
state back with ``O^-1``, act, push the direction forward with ``O``. A
rotation by 90 degrees maps the direction grid onto itself; a shear does
not, so its directions are snapped to the nearest available one.
"""

import numpy as np

from quantemu.dqn import DqnAgent, DqnConfig, EmulationEnv, train, unit_circle_starts
from quantemu.lti import ContinuousLti, discretize
from quantemu.transfer import (TransferMap, TransferredPolicy, conjugate_system, dqn_base_policy,
                               is_alphabet_invariant, transfer_rollout, verify_theorem1,
                               warm_start_train)

B = np.array([[1.0, 0.0, -1.0, 0.0],
              [0.0, 1.0, 0.0, 1.0]])
H = np.array([[0.0, 1.0], [-1.0, -2.0]])
disc = discretize(np.zeros((2, 2)), B, 0.05)
env = EmulationEnv(disc, ContinuousLti(H))
agent, _ = train(DqnAgent(env, DqnConfig(), seed=0), episodes=100, T=200, seed=0)

rot = TransferMap([[0.0, 1.0], [-1.0, 0.0]])
print("rotated system:\n", conjugate_system(H, rot))
print("grid invariant under rotation:", is_alphabet_invariant(rot, env.alphabet))

# absorbing O^-1 into the first layer gives the same greedy choices
S = np.random.default_rng(0).normal(size=(1000, 4))
print("agreement:", verify_theorem1(agent, rot, S).agreement)

tp = TransferredPolicy(dqn_base_policy(agent), rot, env.alphabet)
ro = transfer_rollout(tp, np.array([0.0, -1.0]), 200, disc, ContinuousLti(conjugate_system(H, rot)))
print("rotation transfer, terminal |x|: %.4f" % ro.terminal_error())

###############################################################################
# Shear: the mapped directions fall between grid points

shear = TransferMap([[1.0, 0.5], [-0.5, 1.0]])
print("grid invariant under shear:", is_alphabet_invariant(shear, env.alphabet))
target = ContinuousLti([[-0.5, 0.0], [-1.0, -2.5]])
tp = TransferredPolicy(dqn_base_policy(agent), shear, env.alphabet)
ro = transfer_rollout(tp, np.array([1.0, 0.0]), 200, disc, target)
print("shear transfer, terminal |x|: %.4f, mean snap distance %.4f" % (ro.terminal_error(), np.mean(ro.costs)))

# fine-tuning from the old weights vs. from scratch, 20 episodes each
res = warm_start_train(agent, EmulationEnv(disc, target, env.alphabet), 20, 200,
                       seeds=[0, 1, 2], eval_starts=unit_circle_starts(8))
for r in res:
    print("seed %d: warm %.4f  cold %.4f" % (r.seed, r.warm_error, r.cold_error))
