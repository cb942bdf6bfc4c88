import os
import sys

import numpy as np
import pandas as pd

sys.path.append(os.path.join(os.path.dirname(__file__), 'backend'))

from deep_wishart.kernel import KernelConfig
from deep_wishart.model import dwp_prior_sample
from deep_wishart.numerics import RngStream

# Regression data drawn from a two-layer deep Wishart prior
n_points, input_dim, seed = 120, 2, 0
rng = RngStream(seed)
x = rng.split(0).uniform((n_points, input_dim)) * 4.0 - 2.0

kernels = [KernelConfig(lengthscale=1.0) for _ in range(3)]
sample = dwp_prior_sample(x, [input_dim, input_dim], kernels, rng.split(1))

# Observation noise with standard deviation 0.1
y = sample.outputs[:, 0] + 0.1 * rng.split(2).normal(n_points)

frame = pd.DataFrame(np.column_stack([x, y]), columns=['x1', 'x2', 'y'])
frame.to_csv("test_dataset.csv", index=False, float_format="%.10g")
print(f"Test dataset 'test_dataset.csv' created with {n_points} rows and a header (use --skip-header).")
