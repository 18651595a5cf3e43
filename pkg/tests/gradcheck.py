"""Central finite differences for the layer and network gradient tests."""

import numpy as np

STEP = 1e-4


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f, arr, idx, step=STEP):
    """d f / d arr at flat indices ``idx`` (``arr`` is perturbed in place and restored)."""
    flat = arr.reshape(-1)
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * step)
    return out


def pick(rng, size, n):
    return np.arange(size) if size <= n else np.sort(rng.choice(size, n, replace=False))


def check_layer(layer, x, rng, n_probe=40):
    """Worst relative error over the input and every parameter of ``layer`` for
    the scalar loss sum(layer(x) * R)."""
    y = layer.forward(x)
    r = rng.normal(size=y.shape)

    def loss():
        return float(np.sum(layer.forward(x) * r))

    layer.forward(x)
    layer.zero_grad()
    dx = layer.backward(r)
    errs = []
    idx = pick(rng, x.size, n_probe)
    errs.append(rel_error(dx.reshape(-1)[idx], numeric_grad(loss, x, idx)))
    for name, p in layer.params.items():
        g = layer.grads[name].copy()
        idx = pick(rng, p.size, n_probe)
        errs.append(rel_error(g.reshape(-1)[idx], numeric_grad(loss, p, idx)))
    return max(errs)
