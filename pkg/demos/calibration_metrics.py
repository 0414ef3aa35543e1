"""Reliability curves for a calibrated and an overconfident regression
predictor, and for a classifier whose confidence is inflated."""

import numpy as np

from simpa.calibration import classification_reliability, ece_mce, gaussian_reliability, regression_reliability

rng = np.random.default_rng(0)
n = 5000
mu = rng.uniform(-2, 2, n)
y = mu + rng.standard_normal(n)

calibrated = mu + rng.standard_normal((200, n))
print("calibrated samples     ECE %.4f  MCE %.4f" % ece_mce(regression_reliability(calibrated, y)))
print("overconfident (sd 0.3) ECE %.4f  MCE %.4f" % ece_mce(gaussian_reliability(mu, 0.3, y)))

logits = rng.normal(size=(n, 5))
labels = np.array([rng.choice(5, p=np.exp(l) / np.exp(l).sum()) for l in logits])
for temp in (1.0, 0.3):
    p = np.exp(logits / temp)
    p /= p.sum(1, keepdims=True)
    print(f"classifier, temperature {temp}: ECE %.4f  MCE %.4f" % ece_mce(classification_reliability(p, labels)))
