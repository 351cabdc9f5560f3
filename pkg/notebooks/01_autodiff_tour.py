# %% [markdown]
# A short tour of the tape-based autodiff core: record a computation,
# run it backwards and compare against central differences.

# %%
import numpy as np

from causal_sar import autodiff as ad
from causal_sar.autodiff import Tape, Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((2, 1, 6, 6)), tracked=True)
w = Tensor(rng.standard_normal((3, 1, 3, 3)), tracked=True)
b = Tensor(np.zeros(3), tracked=True)

# %%
# only ops executed inside a Tape context are recorded
with Tape() as tape:
    h = ad.relu(ad.maxpool2d(ad.conv2d(x, w, b, stride=1, pad=1), 2))
    loss = ad.mean(ad.mul(h, h))
tape.backward(loss)
print("loss", float(loss.values), "grad shapes", x.grad.shape, w.grad.shape)

# %%
# grad_check evaluates in float64 and reports the worst relative error
def conv_loss(kernel):
    out = ad.conv2d(Tensor(x.values), kernel, Tensor(b.values), 1, 1)
    return ad.sum(ad.mul(out, out))


print("conv kernel grad error:", ad.grad_check(conv_loss, w))

# %%
# log_softmax is shift invariant and normalised
z = Tensor(rng.standard_normal((4, 5)) * 50)
logp = ad.log_softmax(z).values
print("row sums of exp:", np.exp(logp).sum(axis=1))
