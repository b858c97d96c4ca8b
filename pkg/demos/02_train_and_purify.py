"""Train a small two-step purifier on synthetic data and purify a few test images.

Takes a couple of minutes on one CPU core.
Run: python3 demos/02_train_and_purify.py
"""

import torch

from oneshotpure.data_io import make_synthetic
from oneshotpure.metrics import psnr, ssim
from oneshotpure.networks import parameter_count
from oneshotpure.purifier import Pipeline, Purifier, classifier_from_checkpoint
from oneshotpure.evaluation import clean_accuracy
from oneshotpure.training import TrainConfig, train_classifier, train_lightpure

torch.set_num_threads(1)
train = make_synthetic(1000, 2, 32, rng=0)
test = make_synthetic(200, 2, 32, rng=1, split="test")

clf = classifier_from_checkpoint(train_classifier(train, TrainConfig(steps=200, batch_size=32)))
print(f"classifier clean accuracy: {clean_accuracy(Pipeline(clf), test):.1f}%")


def log(rec):
    if rec.step % 50 == 0:
        print(f"  step {rec.step:4d}  d={rec.d_loss:.3f}  g_adv={rec.g_adv:.3f}  ssim_term={rec.ssim_term:.3f}")


ckpt = train_lightpure(train, TrainConfig(steps=300, batch_size=16), on_log=log)
pur = Purifier(ckpt)
print(f"generator parameters: {parameter_count(pur.generator)}")

x = test.images[:8]
with torch.no_grad():
    y = pur(x, torch.Generator().manual_seed(0))
print(f"one-shot purify: {pur.generator_invocations} generator call, "
      f"SSIM to input {ssim(y, x).item():.3f}, PSNR {psnr(y, x):.1f} dB")
print(f"purifier + classifier clean accuracy: {clean_accuracy(Pipeline(clf, pur), test):.1f}%")
