"""Two forward diffusion steps and the closed-form posterior used during training.

Run: python3 demos/01_diffusion_posterior.py
"""

import torch

from oneshotpure.diffusion import VarianceSchedule, posterior_sample, two_step_forward

torch.manual_seed(0)
sched = VarianceSchedule((0.0167, 0.0331))

# q(x_t | x_0) marginals after each step
for t in (1, 2):
    a, s = sched.marginal_coefficients(t)
    print(f"t={t}: x_t = {a:.6f} * x_0 + {s:.6f} * eps")

# q(x_1 | x_2, x_0): mean = c0 * x_0 + c2 * x_2, fixed variance
c0, c2, var = sched.posterior_coefficients(2)
print(f"posterior: mean = {c0:.7f} * x0 + {c2:.7f} * x2, var = {var:.7f}")

# Monte Carlo check on a constant image: sample x1, x2 jointly, condition on x2 by regression
n = 200_000
x0 = torch.full((n, 1, 1, 1), 0.3, dtype=torch.float64)
x1, x2 = two_step_forward(x0, sched)
x1, x2 = x1.flatten(), x2.flatten()
slope = torch.cov(torch.stack([x1, x2]))[0, 1] / x2.var()
resid = x1 - (x1.mean() + slope * (x2 - x2.mean()))
print(f"empirical slope on x2 = {slope:.4f} (closed form {c2:.4f}), "
      f"residual var = {resid.var():.5f} (closed form {var:.5f})")

# posterior_sample draws x1 given x2 and a predicted x0
draws = posterior_sample(x2[:5].view(5, 1, 1, 1), x0[:5], sched, 2)
print("posterior draws:", [round(v, 4) for v in draws.flatten().tolist()])
