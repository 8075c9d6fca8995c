"""
Cost as the number of classes grows
===================================

Multiply-accumulates per image from the closed-form ledger, checked against
a counting forward pass, plus measured forward time.
"""

# %%
from mldecoder.bench import HeadCostModel, head_flops, rows_to_markdown, run_scalability_sweep

ledger = head_flops(HeadCostModel("mldecoder", 5000, 100))
for term, macs in ledger.terms.items():
    print(f"{term:18s} {macs:>12,d}")

# %%
# The transformer decoder's self-attention is quadratic in N; ML-Decoder with
# K fixed only pays N*D more in its group fully-connected layer.
rows = run_scalability_sweep(repeats=3, budget_s=3.0)
print(rows_to_markdown(rows))
