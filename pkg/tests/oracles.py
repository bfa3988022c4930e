"""Loop-based reference implementations used as test oracles.

Everything here is plain Python/numpy scalar arithmetic written from the
defining formulas, independent of the package's vectorised code paths.
"""

import math

import numpy as np


def bilinear_sample_1d(n_in, n_out, o, start=0.0, length=None):
    """Weights ``{index: weight}`` for output cell ``o`` (half-pixel centres, clamped)."""
    if length is None:
        length = n_in
    s = start + (o + 0.5) * length / n_out - 0.5
    s = min(max(s, 0.0), n_in - 1.0)
    i0 = int(math.floor(s))
    i1 = min(i0 + 1, n_in - 1)
    t = s - i0
    weights = {}
    weights[i0] = weights.get(i0, 0.0) + (1.0 - t)
    weights[i1] = weights.get(i1, 0.0) + t
    return weights


def resize_window(img, out_h, out_w, y0=0.0, dh=None, x0=0.0, dw=None):
    """Brute-force bilinear resize of an ``H×W×C`` window, one output pixel at a time."""
    H, W, C = img.shape
    out = np.zeros((out_h, out_w, C))
    for oy in range(out_h):
        wy = bilinear_sample_1d(H, out_h, oy, y0, dh)
        for ox in range(out_w):
            wx = bilinear_sample_1d(W, out_w, ox, x0, dw)
            for iy, a in wy.items():
                for ix, b in wx.items():
                    out[oy, ox, :] += a * b * img[iy, ix, :]
    return out


def patch_features(f, patches, grid):
    """Upsample ``f`` to ``grid×grid`` then crop-resize each patch back to ``h×w``."""
    h, w, _ = f.shape
    up = resize_window(f, grid, grid)
    return np.stack([resize_window(up, h, w, p.y, p.dh, p.x, p.dw) for p in patches])


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def _softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def channel_attention(P, p, include_self=True):
    """Pairwise gates, softmax over j, weighted patch sums, GAP, softmax over i.

    ``P`` is ``n×h×w×c``; ``p`` maps parameter names to arrays. Returns
    ``(f_ca, delta, phi)``.
    """
    n, h, w, c = P.shape
    ca = P.shape[3]
    k = p["W_psi"].shape[1]
    theta = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for y in range(h):
                for x in range(w):
                    psi = []
                    for q in range(k):
                        z = p["b_psi"][q]
                        for ch in range(ca):
                            z += P[i, y, x, ch] * p["W_psi"][ch, q] + P[j, y, x, ch] * p["W_psi_prime"][ch, q]
                        psi.append(math.tanh(z))
                    g = p["b_theta"][0] + sum(psi[q] * p["W_theta"][q, 0] for q in range(k))
                    acc += _sigmoid(g)
            theta[i, j] = acc / (h * w)
    delta = np.zeros((n, n))
    for i in range(n):
        scores = [p["W_delta"][0, 0] * theta[i, j] + p["b_delta"][0] for j in range(n)]
        cols = [j for j in range(n) if include_self or j != i or n == 1]
        probs = _softmax([scores[j] for j in cols])
        for j, v in zip(cols, probs):
            delta[i, j] = v
    f_tilde = np.zeros((n, c))
    for i in range(n):
        # Weighted sum of whole patch maps first, then spatial average.
        fhat = np.zeros((h, w, c))
        for j in range(n):
            fhat += delta[i, j] * P[j]
        for ch in range(c):
            f_tilde[i, ch] = sum(fhat[y, x, ch] for y in range(h) for x in range(w)) / (h * w)
    logits = [p["b_phi"][0] + sum(f_tilde[i, ch] * p["W_phi"][ch, 0] for ch in range(c)) for i in range(n)]
    phi = np.array(_softmax(logits))
    f_ca = sum(phi[i] * f_tilde[i] for i in range(n))
    return f_ca, delta, phi


def batch_norm_eval(v, gamma, beta, mean, var, eps):
    return np.array([(v[q] - mean[q]) / math.sqrt(var[q] + eps) * gamma[q] + beta[q] for q in range(len(v))])


def spatial_attention(P, p, activation="softmax", eps=1e-5):
    """Channel GAP and GMP per location, flatten (n, y, x, [avg, max]), dense, activation, BN."""
    n, h, w, c = P.shape
    flat = []
    for i in range(n):
        for y in range(h):
            for x in range(w):
                vals = list(P[i, y, x, :])
                flat.append(sum(vals) / len(vals))
                flat.append(max(vals))
    z = [p["sa_b"][q] + sum(flat[r] * p["sa_W"][r, q] for r in range(len(flat))) for q in range(c)]
    if activation == "softmax":
        a = _softmax(z)
    else:
        a = [_sigmoid(v) for v in z]
    return batch_norm_eval(a, p["sa_gamma"], p["sa_beta"], p["sa_mean"], p["sa_var"], eps)


def pba_forward(F, P, p, eps=1e-5, use_sa=True):
    """Full eval-mode head for one image: ``F`` is ``h×w×c``, ``P`` the ``n×h×w×c`` patches."""
    h, w, c = F.shape
    f_ca, delta, phi = channel_attention(P, p)
    if use_sa:
        f_sa = spatial_attention(P, p, eps=eps)
        f_pba = f_ca * f_sa + f_ca
    else:
        f_sa = None
        f_pba = f_ca
    gap = np.array([sum(F[y, x, ch] for y in range(h) for x in range(w)) / (h * w) for ch in range(c)])
    f_final = f_pba + gap
    z = batch_norm_eval(f_final, p["h_gamma"], p["h_beta"], p["h_mean"], p["h_var"], eps)
    L = p["h_W"].shape[1]
    logits = [p["h_b"][l] + sum(z[q] * p["h_W"][q, l] for q in range(c)) for l in range(L)]
    return {"y": np.array(_softmax(logits)), "f_ca": f_ca, "f_sa": f_sa, "f_pba": f_pba, "delta": delta, "phi": phi}


def head_params(state):
    """Map a ``PbAHead`` state dict (prefix ``head.``) to the oracle's parameter names."""
    g = lambda k: np.asarray(state[k], dtype=np.float64)
    p = {k: g("head.ca." + k) for k in ("W_psi", "W_psi_prime", "b_psi", "W_theta", "b_theta",
                                          "W_delta", "b_delta", "W_phi", "b_phi")}
    if "head.sa.dense.weight" in state:
        p.update(sa_W=g("head.sa.dense.weight"), sa_b=g("head.sa.dense.bias"), sa_gamma=g("head.sa.bn.gamma"),
                 sa_beta=g("head.sa.bn.beta"), sa_mean=g("head.sa.bn.running_mean"), sa_var=g("head.sa.bn.running_var"))
    p.update(h_W=g("head.head.dense.weight"), h_b=g("head.head.dense.bias"), h_gamma=g("head.head.bn.gamma"),
             h_beta=g("head.head.bn.beta"), h_mean=g("head.head.bn.running_mean"), h_var=g("head.head.bn.running_var"))
    return p


def topk_bruteforce(probs, labels, k):
    """Top-k hit rate by explicit ranking with lower-index tie-breaks."""
    hits = 0
    for row, y in zip(probs, labels):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += y in order[:k]
    return 100.0 * hits / len(labels)
