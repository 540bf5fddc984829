# %% [markdown]
# # Tape autodiff and finite differences
#
# Every layer the networks use is a numpy primitive on a small tape.  Here we
# build a conv -> pool -> GAP stack by hand, backpropagate, and compare one
# weight gradient against central differences in double precision.

# %%
import numpy as np

from soundmtl.gradsuite import run_suite
from soundmtl.tensorcore import Tensor, conv2d, global_average_pool, maxpool2x2, relu, softmax_cross_entropy

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 8, 8, 1)))
k = Tensor(rng.normal(size=(3, 3, 1, 4)), requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
target = np.eye(4)[[1, 3]]


def loss():
    h = global_average_pool(maxpool2x2(relu(conv2d(x, k, b))))
    return softmax_cross_entropy(h, target)[0]


L = loss()
L.backward()
print("loss", float(L.data))

# %%
# central difference on one kernel entry
h = 1e-6
idx = (1, 2, 0, 3)
orig = k.data[idx]
k.data[idx] = orig + h
up = float(loss().data)
k.data[idx] = orig - h
down = float(loss().data)
k.data[idx] = orig
print("analytic", k.grad[idx], "numeric", (up - down) / (2 * h))

# %% [markdown]
# The packaged suite repeats this for every primitive and for whole toy
# models (baseline, MTL, inter-connected MTL, fused).  `soundmtl gradcheck`
# runs the same thing from the shell.

# %%
results, seconds = run_suite("toy", seed=0, max_entries=4)
for r in results:
    print(r.line())
print(f"{seconds:.1f} s")
