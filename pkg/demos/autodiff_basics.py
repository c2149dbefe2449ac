"""Record a small computation on a tape, backpropagate, compare with finite differences."""

import numpy as np

from graphnorm import autodiff as ad
from graphnorm.gradcheck import gradcheck_suite

rng = np.random.default_rng(0)
W = ad.parameter(rng.normal(size=(3, 2)))
x = ad.constant(rng.normal(size=(4, 3)))


def loss_of(w):
    return ad.total_mean(ad.square(ad.relu(ad.matmul(x, w))))


with ad.Tape() as tape:
    loss = loss_of(W)
    tape.backward(loss)

estimate = ad.finite_diff_gradient(loss_of, W)
print("loss", loss.item())
print("tape gradient\n", W.grad)
print("max |tape - finite difference|", np.max(np.abs(W.grad - estimate.grad.values)))

report = gradcheck_suite("op:", trials=1)
print(f"{len(report.results)} primitive checks, all passed: {report.passed}")
