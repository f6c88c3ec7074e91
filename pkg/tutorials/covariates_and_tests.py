"""Covariates on the latent chain, a boundary likelihood-ratio test, and choosing k.

Run from the repository root:  python tutorials/covariates_and_tests.py
"""
import numpy as np

from latentmarkov import (
    InitialSpec,
    MeasurementSpec,
    ModelParams,
    ModelSpec,
    TransitionSpec,
    fit,
    information_criteria,
    lr_test,
    simulate_panel,
)

rng = np.random.default_rng(3)
T, n = 4, 500
phi = np.tile([[0.8, 0.2], [0.2, 0.8]], (T, 1, 1))
truth = ModelParams(2, T, (2, 2), ((0,), (1,)), np.array([0.6, 0.4]),
                    np.tile([[0.85, 0.15], [0.1, 0.9]], (T - 1, 1, 1)), [phi, phi.copy()])

# Covariates enter the initial and transition logits. Simulate with a
# positive effect of x on moving into state 1.
age = rng.normal(size=(n, T, 1))
spec = ModelSpec(2, measurement=MeasurementSpec("time_invariant"), initial=InitialSpec("covariate"),
                 transition=TransitionSpec("covariate"), covariates=("age",))
true_cov = truth.copy()
true_cov.coef = {
    "initial": np.array([np.log(0.4 / 0.6), 0.0]),
    "transition": np.array([np.log(0.15 / 0.85), np.log(0.1 / 0.9), 1.0, 0.0]),
}
data = simulate_panel(true_cov, n, seed=4, spec=spec, covariates=age, covariate_names=("age",))

res = fit(data, spec, starts=2)
print("transition logits (reference: staying put); truth has slope 1 on age for leaving state 0")
for label, value in zip(res.model.coord_labels(), res.model.coords(res.states)):
    if "transition" in label:
        print(f"  {label:28s} {value:7.3f}")

# Measurement invariance across occasions against free measurement.
plain = simulate_panel(truth, n, seed=5)
free = fit(plain, ModelSpec(2), starts=1)
invariant = fit(plain, ModelSpec(2, measurement=MeasurementSpec("time_invariant")), starts=1)
df = free.n_free - invariant.n_free
test = lr_test(free.loglik, invariant.loglik, "chi2", df=df)
print(f"time-invariant measurement: D = {test.statistic:.2f} on {df} df, p = {test.p_value:.3f}")

# No transitions at all (identity chain) sits on the boundary of the
# equal-off-diagonal model, so the reference law is a 50:50 chi-bar-squared.
stay = fit(plain, ModelSpec(2, transition=TransitionSpec("linear", structure="identity")), starts=0)
moves = fit(plain, ModelSpec(2, transition=TransitionSpec("linear", structure="equal_off_diagonal")), starts=1)
test = lr_test(max(moves.loglik, stay.loglik), stay.loglik, "chibar", weights=(0.5, 0.5))
print(f"no transitions: D = {test.statistic:.2f}, p = {test.p_value:.2g}")

# Pick the number of states by BIC.
for k in (1, 2, 3):
    r = fit(plain, ModelSpec(k, measurement=MeasurementSpec("time_invariant"),
                             transition=TransitionSpec("homogeneous")), starts=2)
    aic, bic = information_criteria(r.loglik, r.n_free, r.model.bic_n)
    print(f"k={k}: loglik {r.loglik:9.2f}  parameters {r.n_free:2d}  BIC {bic:8.1f}")
