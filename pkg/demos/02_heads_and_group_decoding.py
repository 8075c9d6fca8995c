"""
Three classification heads
==========================

GAP, a transformer decoder with one query per class, and ML-Decoder. The last
part shows the two structural facts ML-Decoder relies on: self-attention over
fixed queries can be folded away, and K < N queries can still produce N
logits through the group fully-connected layer.
"""

# %%
import numpy as np

from mldecoder import (GapHead, HeadConfig, MLDecoderHead, Tensor, TransformerDecoderHead,
                       count_macs, make_group_assignment, strip_self_attention)
from mldecoder.heads import GroupFcParams, group_fc_batched, group_fc_loop

rng = np.random.default_rng(1)
tokens = Tensor(rng.normal(size=(2, 49, 32)))  # two images, a 7x7 grid of 32-d tokens

# %%
N = 80
heads = {
    "gap": GapHead(N, 32, seed=0),
    "transformer": TransformerDecoderHead(HeadConfig(num_classes=N, model_dim=32), seed=0),
    "ml-decoder K=20": MLDecoderHead(HeadConfig(num_classes=N, model_dim=32, num_queries=20),
                                     seed=0),
}
for name, head in heads.items():
    with count_macs() as c:
        logits = head(tokens)
    print(f"{name:16s} logits {logits.shape}  MACs/image {c.macs // 2:>10,d}")

# %%
# The transformer decoder's queries are fixed at inference, so its
# self-attention output is a constant. Feeding that constant to ML-Decoder as
# its queries, with the remaining weights copied, gives the same logits.
td = TransformerDecoderHead(HeadConfig(num_classes=6, model_dim=8, num_heads=2), seed=3)
ml = strip_self_attention(td)
small = Tensor(rng.normal(size=(3, 10, 8)))
print("max |difference|:", np.abs(ml(small).data - td(small).data).max())

# %%
# Group decoding: 7 classes over 3 queries means groups of ceil(7/3) = 3 with
# a short last group. Classes are scattered over groups by a seeded shuffle.
a = make_group_assignment(7, 3, seed=13)
print(a.to_text())
params = GroupFcParams.init(3, a.group_size, 5, rng)
G = rng.normal(size=(3, 5))
print("loop == batched:", np.array_equal(group_fc_loop(G, params, a),
                                         group_fc_batched(G, params, a)))
