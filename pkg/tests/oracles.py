"""Independent reference computations used by the tests.

These are deliberately naive: explicit loops over Python integers, no shared
code with the package beyond the final float normalization formula.
"""

from math import exp, factorial


def brute_g3(d1, d2, d3, tau_max):
    """Triple loop over delays and time, overlap-window average, full-record means."""
    d1, d2, d3 = ([int(v) for v in d] for d in (d1, d2, d3))
    n = len(d1)
    s1, s2, s3 = sum(d1), sum(d2), sum(d3)
    size = 2 * tau_max + 1
    out = [[0.0] * size for _ in range(size)]
    if 0 in (s1, s2, s3):
        return out, False
    den = (s1 * s2 * s3) / n**3
    for r, t13 in enumerate(range(-tau_max, tau_max + 1)):
        for c, t12 in enumerate(range(-tau_max, tau_max + 1)):
            lo = max(0, -t12, -t13)
            hi = n - 1 - max(0, t12, t13)
            total = 0
            for t in range(lo, hi + 1):
                total += d1[t] * d2[t + t12] * d3[t + t13]
            out[r][c] = (total / (hi - lo + 1)) / den
    return out, True


def brute_g2(di, dj, tau_max):
    di, dj = [int(v) for v in di], [int(v) for v in dj]
    n = len(di)
    den = (sum(di) * sum(dj)) / n**2
    out = []
    for tau in range(-tau_max, tau_max + 1):
        ts = [t for t in range(n) if 0 <= t + tau < n]
        total = sum(di[t] * dj[t + tau] for t in ts)
        out.append((total / len(ts)) / den)
    return out


def mixture_pmf(fock_n, qlp, kmax=60):
    """Photon-number distribution of the Fock/coherent mixture, by direct summation."""
    pmf = [(1 - qlp) * exp(-fock_n) * fock_n**k / factorial(k) for k in range(kmax)]
    pmf[fock_n] += qlp
    return pmf


def central_moment(pmf, order):
    mean = sum(k * p for k, p in enumerate(pmf))
    return sum((k - mean) ** order * p for k, p in enumerate(pmf))


def count_conv_params(channels, kernel, depth, hidden, classes):
    """Count trainable weights layer by layer, independent of the model's shape table."""
    total = 0
    cin = 1
    for _ in range(depth):
        total += kernel * kernel * cin * channels + channels  # kernel + bias
        total += 2 * channels  # batch-norm scale and shift
        cin = channels
    total += channels * hidden + hidden
    total += hidden * classes + classes
    return total


def _loss_and_pattern(params, x, labels):
    """Mean cross-entropy plus every ReLU mask and max-pool selection of a
    fixed-statistics forward pass."""
    import numpy as np

    from fockml import cnn

    cache = {}
    logits = cnn._forward(params, x, batch_stats=False, cache=cache)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    parts = [cache[name][4] > 0 for name in params.config.conv_names]
    parts += [v[0] for k, v in cache.items() if k.startswith("pool")]
    parts.append(cache["head"][2] > 0)
    return loss, np.concatenate([p.reshape(-1).astype(np.int64) for p in parts])


def gradient_check(params, features, labels, per_tensor, seed=0, step=1e-4):
    """Central differences on a sample of scalars from every trainable tensor.

    ``params`` should be float64; batch norm runs in fixed-statistics mode.
    Scalars whose +-step stencil flips a ReLU or max-pool decision sit on a
    kink where finite differences are meaningless; those are redrawn.
    Returns a list of (name, index, analytic, numeric, relative error).
    """
    import numpy as np

    from fockml import cnn

    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    x = np.asarray(features, dtype=np.float64)[..., None]
    _, grads, _ = cnn.loss_and_grads(params, features, labels, batch_stats=False)
    _, base = _loss_and_pattern(params, x, labels)
    rows = []
    for name in params.trainable:
        flat = params.tensors[name].reshape(-1)
        taken = 0
        for i in rng.permutation(flat.size):
            if taken == per_tensor:
                break
            orig = flat[i]
            flat[i] = orig + step
            up, pat_up = _loss_and_pattern(params, x, labels)
            flat[i] = orig - step
            down, pat_down = _loss_and_pattern(params, x, labels)
            flat[i] = orig
            if not (np.array_equal(pat_up, base) and np.array_equal(pat_down, base)):
                continue
            numeric = (up - down) / (2 * step)
            analytic = float(grads[name].reshape(-1)[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7)
            rows.append((name, int(i), analytic, numeric, rel))
            taken += 1
    return rows


def perturbed_params(seed=0):
    """Float64 parameters with non-trivial biases and batch-norm state."""
    import numpy as np

    from fockml import cnn

    params = cnn.init(seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed + 100)
    for name, t in params.tensors.items():
        if name.endswith("bias") or name.endswith("beta") or name.endswith("moving_mean"):
            t += rng.normal(0, 0.1, t.shape)
        elif name.endswith("gamma"):
            t += rng.normal(0, 0.2, t.shape)
        elif name.endswith("moving_var"):
            t *= rng.uniform(0.5, 2.0, t.shape)
    return params
