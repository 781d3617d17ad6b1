"""Where the FLOPs go: linear-in-M hierarchical attention vs quadratic concatenation.

Run: python demos/cost_walkthrough.py
"""

from flexattn.cost import (VARIANTS, CostConfig, attention_core_total, concat_layer_flops,
                           counted_attention_core, flex_layer_flops, llava_scale_reports, reconcile)

print("attention-core FLOPs at N=32, D=32 (analytic | counted by running the kernel)")
for m in (0, 8, 16, 24, 32):
    c = CostConfig(n_i=16, n_t=16, m=m, n_hr=64, d_model=32)
    fa, ca = attention_core_total(flex_layer_flops(c)), attention_core_total(concat_layer_flops(c))
    fc, cc = counted_attention_core(32, m, 32, 1, "flex"), counted_attention_core(32, m, 32, 1, "concat")
    print(f"  M={m:>2}  flex {fa:>8} | {fc:>8}   concat {ca:>8} | {cc:>8}")

# the analytic model must agree with an instrumented run to the last multiply-add
c = CostConfig(n_i=8, n_t=4, m=6, n_hr=16, d_model=16, heads=2, n_sa=1, n_fa=2, vocab=20)
for v in VARIANTS:
    print(f"reconcile {v:<10} {reconcile(c, v).summary()}")

print("\nLLaVA-scale TFLOPs (encoder included), 16 of 32 layers vanilla")
for out_len in (1, 8, 32):
    reps = llava_scale_reports(16, out_len)
    row = "  ".join(f"{v} {reps[v].tflops(True):6.2f}" for v in VARIANTS)
    print(f"  output_len={out_len:<3} {row}")
print("\nassumptions:")
for a in llava_scale_reports(16, 1)["flex"].assumptions:
    print(" -", a)
