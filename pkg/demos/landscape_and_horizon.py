"""Loss landscape around the truth and long-time prediction error.

For a two-qubit XYZ chain with thermal noise we scan the NLL on a
random plane of the Hamiltonian block, then compare a slightly wrong
generator with the true one far beyond the measured window.
"""
import numpy as np

from lindbladfit import (
    ExperimentConfig, GeneratorParams, ProtocolConfig, TrueParams, generate_dataset, infidelity_curve,
    landscape_scan, sample_true_params,
)
from lindbladfit.evaluation import random_orthogonal_plane, truth_flat
from lindbladfit.training import dataset_batches, nll_loss

model, truth = sample_true_params(ExperimentConfig("xyz", "thermal", 2, ratio=1.0), np.random.default_rng(3))
ds = generate_dataset(model, truth, ProtocolConfig(L=5, K=30, M=5, seed=3))
batches = list(dataset_batches(ds).values())

center = truth_flat(truth)
v1, v2 = random_orthogonal_plane(("H",), (model.n_h, model.n_l, 0), np.random.default_rng(4))
template = GeneratorParams(truth.theta_h, truth.theta_l)


def loss(flat):
    # mean batch NLL over the whole dataset; a single batch is too noisy to locate the truth
    p = template.with_flat(flat)
    return float(np.mean([nll_loss(p, model, False, b, ds.initial_rho(b.state_id), ds.times) for b in batches]))


scan = landscape_scan(center, v1, v2, radius=1.0, grid_n=9, loss=loss)
i, j = np.unravel_index(np.nanargmin(scan.losses), scan.losses.shape)
print(f"loss at truth {scan.losses[4, 4]:.2f}, grid minimum {scan.losses[i, j]:.2f} "
      f"at alpha={scan.alphas[i]:+.2f} beta={scan.betas[j]:+.2f}")

# 5% error on every coefficient, evaluated out to 100x the training window
est = TrueParams(truth.theta_h * 1.05, truth.gamma * 0.95)
curve = infidelity_curve(truth, est, model, [ds.initial_rho(l) for l in range(5)], horizon_factor=100,
                         ratio=1.0)
for t in (1.0, 10.0, 100.0):
    k = np.searchsorted(curve.times, t - 1e-9)
    print(f"t = {curve.times[k]:6.1f}  mean infidelity {curve.mean_infidelity[k]:.2e}")
