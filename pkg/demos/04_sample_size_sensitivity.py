"""
How many draws per step
=======================

Each update averages gradients and Hessians over S theta-draws, and each
theta-draw integrates the random effect with S_alpha importance draws.
Refitting the same data with different seeds shows how the Monte Carlo
noise in the final means shrinks as both counts grow.
"""

import numpy as np

from rvgal import (
    RvgalConfig,
    default_prior,
    run_sample_size_study,
    simulate_logistic,
)

dataset = simulate_logistic(n_groups=50, n_per_group=10, seed=0)
prior = default_prior(dataset.model, dataset.n_fixed)
cfg = RvgalConfig(n_temp=10, k_steps=4, seed=0)

# modest cells keep the demo quick; the acceptance tests push to (1000, 1000)
result = run_sample_size_study(
    dataset, prior, cfg, cells=[(25, 25), (100, 100), (300, 300)], repeats=4
)

print(f"{'(S, S_alpha)':>14}  variance of final means across 4 repeats")
for cell in result.cells:
    var = cell.variance()
    print(f"  ({cell.s_theta:4d},{cell.s_alpha:5d})  " +
          " ".join(f"{v:9.2e}" for v in var))

small = result.cell(25, 25).variance()
big = result.cell(300, 300).variance()
print("\nvariance ratio (25,25) / (300,300) per parameter:")
print("  " + " ".join(f"{r:6.1f}" for r in small / big))
