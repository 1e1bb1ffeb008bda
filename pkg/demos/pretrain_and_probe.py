"""Pre-train on a synthetic graph, then compare a linear probe against raw features.

Run with ``python3 demos/pretrain_and_probe.py [iterations]`` (default 300,
about twenty seconds on one core).
"""

import sys
import time

import numpy as np

from exgrg import config, evaluation, graph, nn, trainer

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300

# Noisy features make the graph structure worth using.
g = graph.generate_sbm(4, 100, 0.1, 0.01, 32, seed=0, noise=2.0)
cfg = config.preset(
    "cora", dim_h=64, dim_z=128, enc_hidden=128, exp_hidden=128, batch_size=256,
    iterations=iterations, lappe_freq=16, signnet_freq=8, num_prototypes=16, rwse_kernel=16, seed=1,
)

t0 = time.perf_counter()
res = trainer.pretrain(g, cfg)
print(f"{iterations} iterations in {time.perf_counter() - t0:.1f} s")
for t in range(0, iterations, max(1, iterations // 5)):
    r = res.reports[t]
    print(f"  iter {t:4d}  total {r.total:12.2f}  L_V {r.L_V:7.3f}  std(Z) {res.std_z[t]:.4f}")

h = trainer.embed(res.params, cfg, g)
spec = trainer.ModelSpec.from_config(cfg, g.num_features)
z = nn.expander_forward(nn.dense_layers("expander", spec.expander, nn.lift(res.params, None)), h).value

probe = evaluation.ProbeConfig(trials=5)
acc_h = evaluation.linear_probe(h, g.labels, probe)
acc_x = evaluation.linear_probe(g.features, g.labels, probe)
print(f"\nprobe on H:        {100 * acc_h.mean():.1f} +- {100 * acc_h.std():.1f}")
print(f"probe on features: {100 * acc_x.mean():.1f} +- {100 * acc_x.std():.1f}")

print("\ncollapse metrics")
for k, v in evaluation.metrics_report(h, z).items():
    print(f"  {k:<7} {v:.4g}" if isinstance(v, float) else f"  {k:<7} {v}")
np.set_printoptions(precision=3)
print(f"final relation-graph weights: {np.array(res.reports[-1].lambdas)}")
