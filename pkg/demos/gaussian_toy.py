"""
Learning the optimal noise predictor for Gaussian data
======================================================

For x0 ~ N(0, s2 I) the best noise prediction at step t is linear in x_t,
eps_hat = c_t x_t with c_t = sqrt(1 - abar_t) / (abar_t s2 + 1 - abar_t).
Here a per-timestep coefficient is fitted by Adam on the weighted KL loss and
compared with that value. The weights change how hard each c_t is pushed,
not where it ends up.
"""
import numpy as np

from kldiff.autodiff import Tensor, take_rows
from kldiff.core import assemble_loss, make_batch
from kldiff.schedules import KLWeightConfig, kl_weights, make_schedule
from kldiff.trainer import EmaParams, OptimizerState, adam_step, ema_update

s2 = 0.25
sched = make_schedule("linear", 100)
rng = np.random.default_rng(0)

for wcfg in (KLWeightConfig("uniform"), KLWeightConfig("exp-decay", 4.0, reverse=True)):
    weights = kl_weights(wcfg, sched.T)
    params = {"c": np.zeros((sched.T, 1))}
    opt, ema = OptimizerState("adam", lr=0.01), EmaParams.of(params, 0.99)
    for step in range(1500):
        x0 = np.sqrt(s2) * rng.standard_normal((1024, 4))
        batch = make_batch(x0, np.zeros((1024, 1), int), np.ones(1024, bool), 0.0, sched, rng)
        c = Tensor(params["c"], requires_grad=True)
        total, _ = assemble_loss(lambda xt, t, b: take_rows(c, t - 1) * xt, batch, sched,
                                 weights)
        total.backward()
        adam_step(params, {"c": c.grad}, opt)
        ema_update(ema, params)

    ab = sched.alpha_bars
    best = np.sqrt(1 - ab) / (ab * s2 + 1 - ab)
    print(f"\nweights: {wcfg.kind}{' (reversed)' if wcfg.reverse else ''}")
    print("   t   learned   optimal")
    for t in (5, 10, 25, 50, 75, 100):
        print(f"{t:4d}  {ema.shadow['c'][t - 1, 0]:8.4f}  {best[t - 1]:8.4f}")
