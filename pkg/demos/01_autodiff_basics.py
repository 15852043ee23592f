"""
Reverse-mode gradients on the built-in tensor engine
====================================================

Builds a tiny expression graph, pulls gradients back through it, and
cross-checks them against central finite differences.
"""

import numpy as np

from graphoscope import autodiff as ad

# a small quadratic: f(x) = sum((relu(x) - 0.5)^2)
x = ad.Tensor(np.linspace(-1, 1, 9).reshape(3, 3), requires_grad=True)
y = ad.tsum(ad.square(ad.relu(x) - 0.5))
grads = ad.backward(y, leaves=[x])

print("f(x) =", y.item())
print("df/dx =")
print(grads[x])

# the finite-difference harness re-runs the same function in float64
err, checked = ad.finite_difference_check(
    lambda t: ad.tsum(ad.square(ad.relu(t) - 0.5)),
    np.linspace(-0.9, 1.1, 9).reshape(3, 3), h=1e-5, sample=9)
print(f"max relative error vs central differences: {err:.2e} (checked={checked})")

# cosine similarity is differentiable too; zero-norm inputs raise
a = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
b = ad.Tensor(np.array([3.0, 2.0, 1.0]))
s = ad.cosine_similarity(a, b)
print("cos(a, b) =", s.item(), " grad wrt a:", ad.backward(s, leaves=[a])[a])
