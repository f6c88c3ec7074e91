"""Simulate a two-state panel, fit it, and look at the estimates.

Run from the repository root:  python tutorials/basic_fit.py
"""
import numpy as np

from latentmarkov import (
    MeasurementSpec,
    ModelParams,
    ModelSpec,
    TransitionSpec,
    fit,
    infer,
    simulate_panel,
)
from latentmarkov.decode import decode_fit

T, items = 5, 3
phi = np.tile([[0.85, 0.15], [0.2, 0.8]], (T, 1, 1))
truth = ModelParams(
    k=2, T=T, levels=(2,) * items, blocks=tuple((j,) for j in range(items)),
    pi=np.array([0.7, 0.3]),
    Pi=np.tile([[0.9, 0.1], [0.05, 0.95]], (T - 1, 1, 1)),
    phi=[phi] * items,
)
data = simulate_panel(truth, 600, seed=1)
print(f"{data.n} subjects, {data.T} occasions, {len(data.levels)} binary items")

# Time-invariant measurement and a homogeneous chain: 1 + 2 + 2 * 3 parameters.
spec = ModelSpec(2, measurement=MeasurementSpec("time_invariant"), transition=TransitionSpec("homogeneous"))
res = fit(data, spec, starts=3, seed=0)
print(f"log-likelihood {res.loglik:.3f} after {res.iterations} iterations (converged: {res.converged})")
print("initial probabilities", np.round(res.params.pi, 3))
print("transition matrix\n", np.round(res.params.Pi[0], 3))
print("P(item 1 = 1 | state)", np.round(res.params.phi[0][0, :, 1], 3))

rep = infer(res)
print(f"AIC {rep.aic:.1f}  BIC {rep.bic:.1f}  identifiable {rep.identifiable}")
for label, value, se in zip(rep.value_labels, rep.values, rep.value_se):
    print(f"  {label:28s} {value:7.3f}  ({se:.3f})")

# Most likely latent path of each subject, next to the observed responses.
decoded = decode_fit(res.model, res.params)
for i in range(4):
    print(f"  subject {i}: items endorsed {data.responses[i].sum(axis=1).tolist()} -> states {decoded.path[i].tolist()}")
