"""
Tensors, gradients and attention
================================

Everything in the package runs on a small reverse-mode autodiff core. This
walk-through builds a two-head attention block, differentiates through it, and
checks the result against central differences.
"""

# %%
import numpy as np

from mldecoder import Parameter, Tape, Tensor, finite_diff_check
from mldecoder import tensor as T
from mldecoder.attention import MultiHeadAttnParams, attention_weights, multi_head_attention

rng = np.random.default_rng(0)

# %%
# Operations record onto a tape only while one is active. Outside a tape the
# same calls are plain numpy.
w = Parameter(rng.normal(size=(3, 2)), "w")
x = Tensor(rng.normal(size=(4, 3)))
with Tape() as tape:
    loss = T.sum_all(T.relu(T.matmul(x, w)))
    tape.backward(loss)
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# %%
# Scaled dot-product attention: each query gets a distribution over the keys.
queries = Tensor(rng.normal(size=(2, 4)))
keys = Tensor(rng.normal(size=(5, 4)))
weights = attention_weights(queries, keys).data
print("attention rows sum to", weights.sum(axis=1))

# %%
# Multi-head attention splits D=4 into two heads of width 2.
params = MultiHeadAttnParams.init(4, 2, rng)
out = multi_head_attention(params, queries, keys, keys)
print("output shape", out.shape)

# %%
# Gradient check through the whole block, with respect to every weight.
probe = Tensor(rng.normal(size=out.shape))
report = finite_diff_check(
    lambda: T.sum_all(T.mul(multi_head_attention(params, queries, keys, keys), probe)),
    params.parameters())
print(f"max relative error {report.max_rel_error:.1e} (passes: {report.passed})")
