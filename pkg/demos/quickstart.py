"""Train a small multi-task attention-MIL model on a synthetic cohort and inspect it.

Run with ``python demos/quickstart.py``; it finishes in well under a minute.
"""

import numpy as np

from mtmil.analysis import attention_annotation_auc, extract_embeddings, high_attention_fractions, logistic_probe
from mtmil.mil_net import TrainConfig
from mtmil.splitter import make_splits
from mtmil.stats import metrics_report
from mtmil.synthgen import SynthConfig, generate_cohort
from mtmil.trainer import predict, predict_cv, train_many

# A cohort of 400 slides with 16-dimensional tile features.  Each slide carries
# eight binary targets driven by latent programs; rare targets reuse the
# programs of common ones, which is what multi-task training can exploit.
bags, manifest = generate_cohort(SynthConfig(seed=0, n_bags=400, dim=16, tiles_min=20, tiles_max=60))
data = {b.bag_id: b for b in bags}

# External-stain slides and the latest 20% of the rest are held out; the
# remaining development slides get five stratified folds.
splits = make_splits(manifest, k=5, seed=0)
print({s: len(splits.bags_in(s)) for s in ("dev", "temporal", "external")})

config = TrainConfig(hidden=32, attention_dim=16, learning_rate=5e-3, batch_size=8, max_epochs=20, patience=4, train_bag_size=50, infer_bag_size=200)
targets = list(manifest.targets)
models = train_many(data, manifest, splits, targets, config, ["multitask", "singletask:T0"])

# Out-of-fold scores on development slides, fold ensemble on the holdouts.
dev = splits.bags_in("dev")
oof = predict_cv(models["multitask"], data, splits)
report = metrics_report(oof.prob_matrix(dev), manifest.label_matrix(dev, targets), targets, B=500)
print("dev CV AUC per target:", {t: round(m.auc, 3) if m.defined else "undefined" for t, m in report.targets.items()})

temporal = splits.bags_in("temporal")
held = predict(models["multitask"], data, temporal)
print("temporal mean AUC:", round(metrics_report(held.prob_matrix(temporal), manifest.label_matrix(temporal, targets), targets, B=200).mean, 3))

# Where does the model look?  Compare tumor share in the top 10% of attention
# with the share over all tiles, and score attention against planted tumor labels.
attn = high_attention_fractions(oof, data, 0.10)
top, every = attn.tumor_pairs()
auc, ci, _ = attention_annotation_auc(oof, data, B=500)
print(f"tumor share top={top.mean():.2f} all={every.mean():.2f} wilcoxon p={attn.wilcoxon.p_value:.2g}")
print(f"attention vs tumor AUC={auc:.3f} CI=({ci[0]:.3f}, {ci[1]:.3f})")

# A linear probe on the pooled slide embeddings recovers grade, which no
# training target mentions.
E = extract_embeddings(models["multitask"], data, dev)
grade = np.array([manifest.row(b).grade == "high" for b in dev], dtype=int)
print("grade probe AUC:", round(logistic_probe(E, grade, "grade", B=200).auc, 3))
