import math

import numpy as np


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


def rel_err(a, b, atol=1e-8):
    """Elementwise relative error; coordinates within ``atol`` count as exact."""
    a, b = np.asarray(a), np.asarray(b)
    diff = np.abs(a - b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    return np.where(diff <= atol, 0.0, diff / scale)


def mlp_ce_and_grads(layers, x, y):
    """Reference CE loss and weight gradients of a ReLU MLP, written out longhand."""
    acts, zs = [x], []
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        zs.append(z)
        acts.append(np.maximum(z, 0.0) if i < len(layers) - 1 else z)
    logits = zs[-1]
    m = logits.max(axis=1, keepdims=True)
    p = np.exp(logits - m)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(np.mean([-np.log(p[r, y[r]]) for r in range(n)]))
    d = p.copy()
    for r in range(n):
        d[r, y[r]] -= 1.0
    d /= n
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        grads.append((acts[i].T @ d, d.sum(axis=0)))
        if i:
            d = (d @ layers[i][0].T) * (zs[i - 1] > 0)
    return loss, grads[::-1]


def sgd_layers(layers, x, y, lrs):
    _, g = mlp_ce_and_grads(layers, x, y)
    return [(w - lr * gw, b - lr * gb) for (w, b), (gw, gb), lr in zip(layers, g, lrs)], g


class RefAdam:
    def __init__(self, n, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [0.0] * n
        self.v = [0.0] * n
        self.t = 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def step(self, params, grads, lr):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append(p - lr * mh / (np.sqrt(vh) + self.eps))
        return out


def no_pap_reference(phi, batches, gamma, lam, eta):
    """Longhand C-MAML without prolonged adaptation (first order, one inner
    step) on plain arrays. Returns per-step (incurred loss, detected) and the
    final slow weights and log step sizes."""
    layers = [(w.data.copy(), b.data.copy()) for w, b in phi.layers]
    log_lr = [float(t.data) for t in phi.log_inner_lr]
    adam = RefAdam(2 * len(layers) + len(log_lr))
    theta_prev, prev = layers, None
    out = []
    for x, y in batches:
        lrs = np.exp(log_lr)
        incurred, _ = mlp_ce_and_grads(theta_prev, x, y)
        theta, _ = sgd_layers(layers, x, y, lrs)
        virtual, _ = mlp_ce_and_grads(theta, x, y)
        detected = incurred - virtual >= gamma
        if not detected:
            factor = 1 / (1 + math.exp(-(incurred - lam)))
            if prev is None:
                _, g = mlp_ce_and_grads(layers, x, y)
                g_lr = [0.0] * len(log_lr)
            else:
                fast, g_in = sgd_layers(layers, prev[0], prev[1], lrs)
                _, g = mlp_ce_and_grads(fast, x, y)
                g_lr = [
                    -lrs[i] * (np.sum(g[i][0] * g_in[i][0]) + np.sum(g[i][1] * g_in[i][1]))
                    for i in range(len(layers))
                ]
            flat_p = [a for wb in layers for a in wb] + [np.array(v) for v in log_lr]
            flat_g = [a for wb in g for a in wb] + [np.array(v) for v in g_lr]
            new = adam.step(flat_p, flat_g, eta * factor)
            layers = [(new[2 * i], new[2 * i + 1]) for i in range(len(layers))]
            log_lr = [float(v) for v in new[2 * len(layers):]]
        out.append((incurred, detected))
        theta_prev, prev = theta, (x, y)
    return out, layers, log_lr


def bgd_loop_oracle(mu, sigma, beta, grad_fn, eps):
    """The printed update rules, one coordinate at a time."""
    k, n = eps.shape
    grads = [grad_fn([mu[i] + sigma[i] * eps[s, i] for i in range(n)]) for s in range(k)]
    new_mu, new_sigma = [], []
    for i in range(n):
        e_g = sum(grads[s][i] for s in range(k)) / k
        e_ge = sum(grads[s][i] * eps[s, i] for s in range(k)) / k
        new_mu.append(mu[i] - beta * sigma[i] ** 2 * e_g)
        s_new = sigma[i] * math.sqrt(1 + 0.5 * sigma[i] * e_ge) - 0.5 * sigma[i] * e_ge
        new_sigma.append(max(s_new, 1e-10))
    return np.array(new_mu), np.array(new_sigma)
