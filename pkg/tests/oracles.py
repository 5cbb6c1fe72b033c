"""Independent numerical oracles for the trainer tests."""
import numpy as np

from shufbench.trainer import Batch, LinearModel, objective


def finite_difference_gradient(model: LinearModel, batch: Batch, loss, lam, h=1e-5):
    """Central differences of the batch objective over every weight and the bias."""
    theta = np.concatenate([model.weights, [model.bias]])

    def f(t):
        return objective(LinearModel(t[:-1], t[-1]), batch, loss, lam)

    grad = np.empty_like(theta)
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        grad[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return grad[:-1], grad[-1]


def max_relative_error(a, b, floor=1e-6):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_case(rng, sparse=False):
    k, f = int(rng.integers(1, 20)), int(rng.integers(1, 12))
    y = rng.choice([-1.0, 1.0], size=k)
    model = LinearModel(rng.normal(0, 0.5, f), float(rng.normal()))
    if not sparse:
        return model, Batch(y, rng.normal(size=(k, f)), f)
    nnz = rng.integers(0, f + 1, size=k)
    indptr = np.concatenate([[0], np.cumsum(nnz)])
    indices = np.concatenate([np.sort(rng.choice(f, m, replace=False)) for m in nnz]).astype(np.int64)
    return model, Batch(y, (indptr, indices, rng.normal(size=indptr[-1])), f)


def lbfgs_minimum(X, y, loss, lam):
    """Objective minimum from scipy's L-BFGS with hand-written gradients (dense X only)."""
    from scipy.optimize import minimize
    from scipy.special import expit

    n, f = X.shape

    def fun(t):
        w, b = t[:-1], t[-1]
        z = X @ w + b
        if loss == "logistic":
            li = np.logaddexp(0, -y * z)
            dz = -y * expit(-y * z)
        else:
            m = np.maximum(0, 1 - y * z)
            li, dz = m * m, -2 * y * m
        val = li.mean() + lam * w @ w
        return val, np.concatenate([X.T @ dz / n + 2 * lam * w, [dz.mean()]])

    res = minimize(fun, np.zeros(f + 1), jac=True, method="L-BFGS-B",
                   options={"maxiter": 10_000, "ftol": 1e-15, "gtol": 1e-12})
    return float(res.fun)
