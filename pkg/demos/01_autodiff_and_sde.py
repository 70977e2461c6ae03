# %% [markdown]
# # Autodiff tape and the VP-SDE
# A tour of the two numerical foundations: reverse-mode gradients on numpy
# arrays, and the variance-preserving noise process with its sampler.

# %%
import numpy as np

from lorasde import tensor as T
from lorasde.diffusion import NoiseSchedule, forward_sample, sample
from lorasde.tensor import Tensor

# %% [markdown]
# ## Gradients
# Every op records its parents and a local rule; `backward` replays them in
# reverse topological order.

# %%
x = Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
w = Tensor(np.array([[0.3, 0.1, -0.4], [0.2, -0.5, 0.6]]), requires_grad=True)
y = T.tsum(T.tanh(T.linear(x, w)))
y.backward()
print("dy/dw =\n", w.grad)

# central differences agree
eps = 1e-6
num = np.zeros_like(w.data)
for i in np.ndindex(w.shape):
    wp, wm = w.data.copy(), w.data.copy()
    wp[i] += eps
    wm[i] -= eps
    num[i] = (np.tanh(x.data @ wp.T).sum() - np.tanh(x.data @ wm.T).sum()) / (2 * eps)
print("max |analytic - numeric| =", np.abs(num - w.grad).max())

# %% [markdown]
# ## The forward process
# `X_t = m(t) X_0 + s(t) eps` with `m^2 + s^2 = 1`.

# %%
sched = NoiseSchedule()
for t in (0.1, 0.5, 0.9):
    m, s = sched.mean_coeff(t), sched.noise_coeff(t)
    print(f"t={t}: mean coeff {m:.4f}, noise coeff {s:.4f}, m^2+s^2 = {m * m + s * s:.6f}")

rng = np.random.default_rng(0)
x0 = 1.5 + 0.5 * rng.standard_normal(10_000)
xt = forward_sample(sched, x0, 0.5, rng.standard_normal(10_000))
m = sched.mean_coeff(0.5)
print("empirical mean/var:", xt.mean().round(4), xt.var().round(4))
print("closed form      :", round(m * 1.5, 4), round(m * m * 0.25 + 1 - m * m, 4))

# %% [markdown]
# ## Reverse sampling with a known score
# For data `N(mu, v)` the marginal score is `-(x - m mu) / (m^2 v + s^2)`;
# Euler-Maruyama integration should recover the data distribution.

# %%
mu, v = 2.0, 0.25


def exact_score(x, t):
    m, s = sched.mean_coeff(t), sched.noise_coeff(t)
    return -(x - m * mu) / (m * m * v + s * s)


for dt in (0.02, 0.001):
    xs = sample(exact_score, sched, (10_000,), dt, np.random.default_rng(1), dtype=np.float64)
    print(f"dt={dt}: mean {xs.mean():.3f} (target {mu}), var {xs.var():.3f} (target {v})")
