"""FGSM, PGD and APGD on a small classifier, with and without a purifier in front.

Run: python3 demos/03_attacks.py
"""

import torch

from oneshotpure.attacks import AttackBudget, build_threat_model, fgsm
from oneshotpure.data_io import make_synthetic
from oneshotpure.evaluation import AttackConfig, clean_accuracy, robust_accuracy, robust_accuracy_pipelines
from oneshotpure.metrics import linf_dist_per_image
from oneshotpure.purifier import Pipeline, classifier_from_checkpoint
from oneshotpure.training import TrainConfig, train_classifier, train_lightpure

torch.set_num_threads(1)
train = make_synthetic(1000, 2, 32, rng=0, separability=0.0)  # hard setting: attacks bite
test = make_synthetic(100, 2, 32, rng=1, separability=0.0, split="test")
clf_ckpt = train_classifier(train, TrainConfig(steps=300, batch_size=32))
und = Pipeline(classifier_from_checkpoint(clf_ckpt))

eps = 8 / 255
x, y = test.images[:16], test.labels[:16]
x_adv = fgsm(und, x, y, epsilon=eps)
print(f"FGSM max perturbation {linf_dist_per_image(x_adv, x).max():.6f} <= {eps:.6f}")

budget = AttackBudget(epsilon=eps, iterations=10, alpha=2 / 255)
print(f"undefended clean {clean_accuracy(und, test):.1f}%")
for kind in ("pgd", "apgd-ce"):
    acc = robust_accuracy_pipelines(und, und, AttackConfig(kind, budget), test)
    print(f"undefended {kind}: {acc:.1f}%")

# a briefly trained purifier; the threat model decides which pipeline supplies gradients
registry = {"classifier": clf_ckpt, "purifier": train_lightpure(train, TrainConfig(steps=100))}
for threat in ("grayA", "white"):
    src, tgt = build_threat_model(threat, registry)
    print(f"{threat}: gradients from {src.name!r}, scored on {tgt.name!r}")
    acc = robust_accuracy(threat, AttackConfig("pgd", AttackBudget(epsilon=eps, iterations=5, eot_samples=2)),
                          registry, test)
    print(f"  defended pgd robust accuracy: {acc:.1f}%")
