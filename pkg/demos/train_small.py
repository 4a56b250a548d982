"""Train a small network for a few epochs and look inside its predictions.

This is a quick tour of the library API, not a converged model; the CLI
walkthrough in ``pipeline.sh`` covers the full-size workflow.
Run with ``python3 demos/train_small.py`` (about a minute on one core).
"""
import numpy as np

from posegen import data, metrics, training
from posegen.model import ModelConfig, PoseNet, select_final

settings = data.GenerationSettings(shapes=("l_block", "cube"), samples_per_object=300)
train_set = data.generate_dataset(settings, seed=1)
test_set = data.generate_dataset(data.GenerationSettings(samples_per_object=25), seed=2)

cfg = ModelConfig(d_emb=32, n_points=64, grid_size=128, head_widths=(128, 64),
                  global_width=128, fold_width=64)
net = PoseNet(cfg)
history = training.train(net, train_set, training.TrainConfig(epochs=30),
                         on_epoch=lambda r: print(
                             f"epoch {r.epoch}: L_P {r.pose:.4f}  L_CD_cano {r.cd_cano:.4f}  "
                             f"L_CD_gt {r.cd_posed:.4f}  ({r.seconds:.1f} s)"))

# Every sampled point votes for a pose and a confidence; the final estimate
# is the most confident vote.
preds = training.predict_dataset(net, test_set)
p = preds[0]
print(f"\nsample 0: {len(p)} per-point hypotheses, confidence max {p.conf.max():.3f}, "
      f"min {p.conf.min():.4f}")
gt = test_set.samples[0].pose_gt
model_pts = test_set.objects[test_set.samples[0].object_id].cloud_cano
per_point = [metrics.add_distance(gt, p.pose(i), model_pts) for i in range(len(p))]
print(f"ADD of the chosen hypothesis {metrics.add_distance(gt, select_final(p), model_pts):.4f} m, "
      f"median over all hypotheses {np.median(per_point):.4f} m")

results = training.evaluate(net, test_set)
for row in metrics.per_object_report([r.record for r in results]):
    print(f"{row.object:>8s}  AUC {row.auc:.3f}  ADD-S<2cm {row.acc_2cm:.3f}  ADD {row.acc_add:.3f}")

gen = training.generation_errors(net, test_set)
print(f"median generation Chamfer: canonical {np.median(gen[:, 0]):.4f} m, "
      f"posed {np.median(gen[:, 1]):.4f} m")
