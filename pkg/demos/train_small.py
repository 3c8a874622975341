"""Train a reduced network for a few hundred steps and compare it with RANSAC
on held-out scenes. Takes about half a minute on one core.

Classification catches up with RANSAC within a few hundred steps; pose
accuracy needs the full desk-scale run (``corrlab train``).

    python demos/train_small.py [iterations]
"""

import sys

from corrlab import cli
from corrlab.evaluation import aggregate

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = cli.load_run_config(None, [
    "scene.n_correspondences=256", "network.d=16", "network.oa_clusters=16",
    f"iterations={iterations}", "eval_interval=100",
    "n_train=100", "n_val=8", "n_test=20",
], seed=0)

splits = cli.generate_splits(cfg)
net, best_f = cli.train_model(cfg, splits["train"], splits["val"],
                              log=lambda line: line.startswith("eval") and print(line))
print(f"best validation F {best_f:.3f}")

for method, results in cli.evaluate_against_ransac(cfg, net, splits["test"]).items():
    a = aggregate(results)
    print(f"{method:<8} F={a['f_score']:.3f}  mAP@5={a['map5']:.2f}  mAP@20={a['map20']:.2f}  "
          f"AUC@20={a['auc20']:.2f}")
