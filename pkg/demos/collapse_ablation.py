"""Train with and without the relation-graph regularizer and compare ranks.

Run with ``python3 demos/collapse_ablation.py [iterations]`` (default 500).
The acceptance suite runs the same comparison at 1500 iterations.
"""

import sys

from exgrg import config, evaluation, graph, nn, trainer

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 500
g = graph.generate_sbm(4, 100, 0.1, 0.01, 32, seed=0)

for alpha2 in (0.5, 0.0):
    cfg = config.preset(
        "cora", dim_h=64, dim_z=128, enc_hidden=128, exp_hidden=128, batch_size=256,
        iterations=iterations, lappe_freq=16, signnet_freq=8, num_prototypes=16, rwse_kernel=16,
        seed=1, alpha2=alpha2,
    )
    res = trainer.pretrain(g, cfg)
    h = trainer.embed(res.params, cfg, g)
    spec = trainer.ModelSpec.from_config(cfg, g.num_features)
    z = nn.expander_forward(nn.dense_layers("expander", spec.expander, nn.lift(res.params, None)), h).value
    print(f"alpha2={alpha2}: rank(H)={evaluation.metric_rank(h)}/64  rank(Z)={evaluation.metric_rank(z)}/128  "
          f"std(Z)={evaluation.metric_std(z):.4f}  L_R={res.reports[-1].L_R:.1f}")
