"""
Sample efficiency on the Tree MDPs
==================================

Here we compare the number of environment samples Constrained Q-learning and the reward-shaped
baseline need until their greedy policy is the constrained optimum of a Tree MDP.

A Tree MDP with ``B`` branches has ``B`` tempting unsafe branches before the safe one, each
followed by a long tail of states. Constrained Q-learning explores inside the safe set only,
while reward shaping has to walk into every unsafe branch to learn its penalty.
"""

# %%
# Firstly, let us import relevant modules:

from time import perf_counter

import matplotlib.pyplot as plt

from cqlearn.harness.config import ExperimentConfig, apply_overrides
from cqlearn.harness.experiments import run_tree_sweep
from cqlearn.visualization import plot_tree_sweep

# %%
# The sweep runs every (B, algorithm, seed) triple; results are written as CSV into ``output_dir``.

config = apply_overrides(
    ExperimentConfig(),
    {
        "experiment": "tree-sweep",
        "output_dir": "benchmark_results",
        "tabular.branches": [1, 2, 4, 6, 8],
        "tabular.seeds": 5,
        "workers": 2,
    },
)

start = perf_counter()
runs, summary = run_tree_sweep(config)
print(f"{len(runs)} runs in {perf_counter() - start:.1f} s")
print(summary[["branches", "algorithm", "mean_samples", "n_converged"]].to_string(index=False))

# %%
# Mean samples to convergence (with the standard deviation over seeds) per number of branches:

ax = plot_tree_sweep(summary)
ax.set_yscale("log")
plt.tight_layout()
plt.show()

# %%
# The ratio below one means Constrained Q-learning converges with fewer samples.

print(summary.drop_duplicates("branches")[["branches", "ratio"]].to_string(index=False))
