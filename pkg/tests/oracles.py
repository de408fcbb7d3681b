"""Independent reference computations used to freeze expected values."""

import numpy as np


def triple_loop_matmul(a, b):
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            s = 0.0
            for k in range(q):
                s += float(a[i, k]) * float(b[k, j])
            out[i, j] = s
    return out


def central_diff(f, arr, h=1e-5):
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def grad_mismatch(analytic, numeric, rel=1e-5, atol=1e-7):
    """Elementwise check: relative error <= rel, or absolute error <= atol near zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    bad = (diff > atol) & (diff > rel * scale)
    rel_err = np.where(scale > 1e-6, diff / np.maximum(scale, 1e-300), 0.0)
    return int(bad.sum()), float(rel_err.max(initial=0.0))


def ndcg_from_rank(rank, k=10):
    return 1.0 / np.log2(rank + 1) if rank <= k else 0.0


def toy_model(seed, num_items=7, n=6, d=8, blocks=2, **kw):
    from sasrec.model import ModelConfig, SASRec

    cfg = ModelConfig(num_items=num_items, d=d, n=n, blocks=blocks, **kw)
    return SASRec(cfg, rng=np.random.default_rng(seed))


def full_model_gradcheck(model, seed, batch=2):
    """Analytic vs central-difference gradients of the training loss for every parameter.

    Dropout masks are redrawn from the same seed on every evaluation, so the
    loss is a fixed deterministic function of the parameters. Returns
    (mismatches, worst relative error, number of checked entries).
    """
    from sasrec import tensor as T

    rng = np.random.default_rng(seed)
    cfg = model.config
    inputs = rng.integers(1, cfg.num_items + 1, size=(batch, cfg.n))
    inputs[0, : cfg.n // 2] = 0  # left padding in one row
    targets = rng.integers(1, cfg.num_items + 1, size=(batch, cfg.n))
    targets[inputs == 0] = 0
    negatives = np.where(targets != 0, rng.integers(1, cfg.num_items + 1, size=targets.shape), 0)

    def loss():
        return model.loss(inputs, targets, negatives, rng=np.random.default_rng(seed + 99))

    T.backward(loss())
    bad, worst, count = 0, 0.0, 0

    def f():
        with T.no_grad():
            return float(loss().data)

    for p in model.params.values():
        b, w = grad_mismatch(p.grad, central_diff(f, p.data))
        bad += b
        worst = max(worst, w)
        count += p.data.size
    return bad, worst, count
