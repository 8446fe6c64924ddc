"""
Where the loss puts its weight
==============================

Prints the KL weight profiles next to the per-step size of the variational
bound for a noise predictor. With eps-prediction the KL at step t is
  coef_t * ||eps - eps_hat||^2,  coef_t = beta_t^2 / (2 btilde_t alpha_t (1 - abar_t)).

The coefficients peak over the first few steps, which is also where the noise
is hardest to predict, so weights that favour small t spend the gradient on
the final polishing steps rather than on the coarse layout decided at high t.
"""

from kldiff.schedules import KLWeightConfig, kl_weights, make_schedule

sched = make_schedule("linear", 100)
T = sched.T
coef = sched.betas ** 2 / (2 * sched.posterior_vars * sched.alphas * (1 - sched.alpha_bars))

profiles = {
    "uniform": KLWeightConfig("uniform"),
    "exp-decay g=1": KLWeightConfig("exp-decay", 1.0),
    "linear-ramp g=2": KLWeightConfig("linear-ramp", 2.0),
    "exp-decay g=7 rev": KLWeightConfig("exp-decay", 7.0, reverse=True),
}
probe = [1, 2, 5, 10, 25, 50, 75, 100]
print("t:".ljust(20) + "".join(f"{t:>9d}" for t in probe))
print("bound coef".ljust(20) + "".join(f"{coef[t - 1]:9.4f}" for t in probe))
for name, wcfg in profiles.items():
    w = kl_weights(wcfg, T)
    eff = w * coef
    print(name.ljust(20) + "".join(f"{w[t - 1]:9.3f}" for t in probe)
          + f"   t<=5 share: {eff[:5].sum() / eff.sum():.1%}")
