"""Independent reference computations used by the tests.

Nothing here calls the library's backward pass, solvers or quantile code;
gradients come from central differences on plain forward evaluations.
"""

import numpy as np

from gasforecast.tensor import GradTape, Tensor

FD_STEP = 1e-5


def rel_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numeric_grad(f, x, h=FD_STEP, coords=None):
    """Central differences of scalar ``f`` at array ``x`` (optionally a subset of flat coords)."""
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = f(x.copy())
        flat[i] = old - h
        fm = f(x.copy())
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def gradcheck(module, forward, inputs, seed=0, max_coords=None):
    """Worst relative error between tape gradients and central differences.

    The scalar checked is ``sum(forward(module, *inputs) * R)`` with a fixed
    random ``R``. Both parameters and inputs are checked; ``max_coords``
    samples that many coordinates per tensor.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(x, dtype=float) for x in inputs]
    probe = forward(module, *[Tensor(x) for x in inputs]).numpy()
    R = rng.normal(size=probe.shape)

    tape = GradTape()
    live, leaves = module.attach(tape) if module is not None else (None, {})
    in_leaves = [tape.watch(x) for x in inputs]
    loss = (forward(live, *in_leaves) * R).sum()
    names = list(leaves)
    grads = tape.gradient(loss, [leaves[n] for n in names] + in_leaves)

    def coords_for(size):
        if max_coords is None or size <= max_coords:
            return None
        return rng.choice(size, size=max_coords, replace=False)

    worst = 0.0
    params = {n: p.numpy() for n, p in module.parameters().items()} if module is not None else {}
    for name, g in zip(names, grads[:len(names)]):
        coords = coords_for(g.size)

        def f(arr, name=name):
            mod = module.with_parameters({name: arr})
            return float(np.sum(forward(mod, *[Tensor(x) for x in inputs]).numpy() * R))

        num = numeric_grad(f, params[name], coords=coords)
        if coords is not None:
            worst = max(worst, rel_error(g.ravel()[coords], num.ravel()[coords]))
        else:
            worst = max(worst, rel_error(g, num))
    for k, g in enumerate(grads[len(names):]):
        coords = coords_for(g.size)

        def f(arr, k=k):
            xs = [Tensor(x) for x in inputs]
            xs[k] = Tensor(arr)
            return float(np.sum(forward(module, *xs).numpy() * R))

        num = numeric_grad(f, inputs[k], coords=coords)
        if coords is not None:
            worst = max(worst, rel_error(g.ravel()[coords], num.ravel()[coords]))
        else:
            worst = max(worst, rel_error(g, num))
    return worst


def softmax_ref(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_ref(Q, K, V):
    scores = Q @ K.T / np.sqrt(Q.shape[-1])
    return softmax_ref(scores) @ V


def gauss_solve(A, b):
    """Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    n = len(b)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(A[col:, col])))
        A[[col, piv]] = A[[piv, col]]
        b[[col, piv]] = b[[piv, col]]
        for row in range(col + 1, n):
            m = A[row, col] / A[col, col]
            A[row, col:] -= m * A[col, col:]
            b[row] -= m * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - A[row, row + 1:] @ x[row + 1:]) / A[row, row]
    return x


def ols_ref(X, y):
    """Least squares with intercept via elimination on the normal equations."""
    A = np.hstack([np.asarray(X, float), np.ones((len(y), 1))])
    beta = gauss_solve(A.T @ A, A.T @ np.asarray(y, float))
    return beta[:-1], beta[-1]


def r7_quantile(values, q):
    """Hyndman-Fan type 7: h = (n - 1) q, interpolate between floor and ceil."""
    v = sorted(float(x) for x in values)
    h = (len(v) - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_step_ref(x, h, c, W, U, b):
    """Gate dicts keyed by 'i', 'f', 'o', 'g'; plain numpy."""
    pre = {k: x @ W[k] + h @ U[k] + b[k] for k in "ifog"}
    i, f, o = sigmoid(pre["i"]), sigmoid(pre["f"]), sigmoid(pre["o"])
    g = np.tanh(pre["g"])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def layer_norm_ref(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)
