"""Recover a single-qubit generator from simulated Pauli shots.

A qubit precesses about Z while dephasing. We sample shots from the true
generator, fit the vanilla model and compare the learned coefficients.
Runs in well under a minute.
"""
import numpy as np

from lindbladfit import (
    GeneratorParams, ModelSpec, ProtocolConfig, TrainerConfig, TrueParams, generate_dataset, parameter_errors,
)
from lindbladfit.generators import raw_from_rates
from lindbladfit.training import run_vanilla_curriculum

model = ModelSpec.create("superconducting", "phase", 1)
truth = TrueParams(theta_h=np.array([0.8]), gamma=np.array([0.3]))

# 5 preparations, 10 times, 20 random bases, 40 shots per basis
ds = generate_dataset(model, truth, ProtocolConfig(L=5, K=20, M=40, seed=1))
print(f"{len(ds)} shot records")

# start well away from the truth
init = GeneratorParams(np.array([0.2]), raw_from_rates([0.9]))
cfg = TrainerConfig(warmup_epochs=30, finetune_epochs=(5, 5), fine_tune="always", seed=1)
run = run_vanilla_curriculum(ds, model, init, cfg)

for k in (0, 10, 20, 30, len(run.epochs)):
    s = run.snapshots[k]
    print(f"epoch {k:2d}  theta_H {s.theta_h[0]:+.4f}  gamma {s.gamma[0]:.4f}")
print(f"truth     theta_H {truth.theta_h[0]:+.4f}  gamma {truth.gamma[0]:.4f}")

eps_h, eps_l = parameter_errors(truth, run.final)
print(f"eps_H {eps_h:.3f}  eps_L {eps_l:.3f}")
