"""Offline-to-online reinforcement learning with state-adaptive balance coefficients.

Modules:

* :mod:`famo2o.numkit`: dense networks, Adam, policy heads, coefficient encoding, checkpoints
* :mod:`famo2o.envs`: grid maze, point-mass task and finite MDPs
* :mod:`famo2o.datastore`: transitions, JSONL datasets and the replay buffer
* :mod:`famo2o.core`: universal model, balance model and their updates
* :mod:`famo2o.base_algos`: IQL, AWAC and CQL value updates and coefficient baselines
* :mod:`famo2o.oracle`: exact tabular certification of the constrained-improvement results
* :mod:`famo2o.analysis`: imitation weights, action distances and coefficient statistics
* :mod:`famo2o.trainer` / :mod:`famo2o.cli`: experiment driver and command line
"""

__version__ = "0.1.0"
