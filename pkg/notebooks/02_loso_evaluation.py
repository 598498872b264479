"""
Leave-one-subject-out evaluation
================================

Each participant is held out in turn: normalisation, contrastive
pretraining and fine-tuning only ever see the other participants. The
held-out user's prediction is the mean of their daily probabilities.
A small network and two repetitions keep this quick.
"""

from phenotrace.contrastive import TrainConfig
from phenotrace.evaluation.experiment import evaluate
from phenotrace.evaluation.report import summary_text
from phenotrace.features import build_dataset
from phenotrace.synthetic import GeneratorConfig, generate

cohort, _ = generate(GeneratorConfig(n_users=24, seed=0))
ds = build_dataset(cohort)

small = TrainConfig(embed_hidden=32, embed_dim=16, head_hidden=16, head_dim=8, clf_hidden=8,
                    pretrain_epochs=3, triplets_per_epoch=128, finetune_epochs=10)

# two conditions share seeds, so the comparison between them is paired
report = evaluate(ds, outcomes=["sdq", "eating"], conditions=("combined", "passive"),
                  config=small, repetitions=2)
print(summary_text(report.to_dict()))

# per-repetition balanced accuracy, the unit of the Wilcoxon comparison
for outcome, conds in report.results.items():
    for cond, res in conds.items():
        print(outcome, cond, res.balanced_accuracies().round(3))
