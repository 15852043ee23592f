"""
Train a small writer-identification embedding
=============================================

Generates a synthetic handwriting corpus, trains a tiny residual embedding
network with the triplet objective, and reports mean average precision on
held-out pages. Short schedule so the demo finishes in under a minute; see
README for the full desk-scale recipe.
"""

from graphoscope import corpus, training

pages = corpus.synth_generate(writers=6, pages_per_writer=3, page_size=256,
                              global_seed=5)

# hold out each writer's last page: unseen documents of known writers
test = [p for p in pages if p.page_id.endswith("p02")]
train = [p for p in pages if not p.page_id.endswith("p02")]
split = training.CorpusSplit(train_pages=train, test_pages=test)

config = training.TrainConfig(task="WI", epochs=3, steps_per_epoch=10,
                              batch_size=12, folds=2, snippets_per_page=6,
                              val_snippets_per_page=8, seed=1)
results = training.run_training(split, config)

for r in results:
    print(f"fold {r.fold}: val mAP {r.val_metric:.3f}  "
          f"test mAP {r.test_metric:.3f}  (best epoch {r.best_epoch})")
best = max(results, key=lambda r: r.test_metric)
print(f"best fold: {best.fold}, test mAP {best.test_metric:.3f}")
