"""Random networks and independent loop-based oracles shared by the test modules.

Nothing here calls into the backward passes of ``pixrel``; the oracles use
explicit Python loops so that they exercise a different code path.
"""

import math

import numpy as np

from pixrel import network as nn

ACCEPTANCE_RESULTS = []


def report(criterion, ok, detail):
    ACCEPTANCE_RESULTS.append((criterion, bool(ok), detail))
    return ok


# --- random networks -------------------------------------------------------------


def random_mlp(rng, n_in=6, hidden=(8,), n_out=3, bias_scale=0.1):
    layers, prev = [nn.Flatten()], n_in
    for h in hidden:
        layers += [nn.Dense(rng.standard_normal((h, prev)) / math.sqrt(prev),
                            bias_scale * rng.standard_normal(h)), nn.ReLU()]
        prev = h
    layers.append(nn.Dense(rng.standard_normal((n_out, prev)) / math.sqrt(prev),
                           bias_scale * rng.standard_normal(n_out)))
    return nn.NetworkModel((1, 1, n_in), layers, [f"c{i}" for i in range(n_out)])


def random_convnet(rng, in_ch=2, size=6, out_ch=3, k=3, padding=0, stride=1, pool=(2, 2),
                   pool_stride=(2, 2), hidden=8, n_out=3, bias_scale=0.1):
    conv = nn.Conv2D(rng.standard_normal((out_ch, in_ch, k, k)) / math.sqrt(in_ch * k * k),
                     bias_scale * rng.standard_normal(out_ch), stride, padding)
    layers = [conv, nn.ReLU()]
    shape = nn.layer_output_shape(conv, (in_ch, size, size), 0)
    if pool is not None:
        mp = nn.MaxPool2D(pool, pool_stride)
        layers.append(mp)
        shape = nn.layer_output_shape(mp, shape, 2)
    layers.append(nn.Flatten())
    flat = int(np.prod(shape))
    if hidden:
        layers += [nn.Dense(rng.standard_normal((hidden, flat)) / math.sqrt(flat),
                            bias_scale * rng.standard_normal(hidden)), nn.ReLU()]
        flat = hidden
    layers.append(nn.Dense(rng.standard_normal((n_out, flat)) / math.sqrt(flat),
                           bias_scale * rng.standard_normal(n_out)))
    return nn.NetworkModel((in_ch, size, size), layers, [f"c{i}" for i in range(n_out)])


def random_net(seed):
    """One of several small architectures (at most 4 weight layers, at most 32 units per layer)."""
    rng = np.random.default_rng(seed)
    kind = seed % 4
    if kind == 0:
        depth = int(rng.integers(1, 4))
        model = random_mlp(rng, n_in=int(rng.integers(3, 12)),
                           hidden=tuple(int(rng.integers(4, 33)) for _ in range(depth - 1)),
                           n_out=int(rng.integers(1, 5)))
    elif kind == 1:
        model = random_convnet(rng, in_ch=int(rng.integers(1, 4)), size=int(rng.integers(5, 9)),
                               out_ch=int(rng.integers(2, 5)), k=int(rng.integers(2, 4)))
    elif kind == 2:
        model = random_convnet(rng, in_ch=2, size=7, out_ch=3, k=3, padding=1, stride=2,
                               pool=(2, 2), pool_stride=(1, 1), hidden=0)
    else:
        model = random_convnet(rng, in_ch=3, size=6, out_ch=4, k=2, padding=0, stride=1,
                               pool=(3, 3), pool_stride=(2, 2), hidden=int(rng.integers(4, 17)))
    x = rng.standard_normal(model.input_shape)
    return model, x


def random_linear(rng, shape=(3, 2, 2), bias=0.0):
    n = int(np.prod(shape))
    w = rng.standard_normal(n)
    model = nn.NetworkModel(shape, [nn.Flatten(), nn.Dense(w[None, :], [bias])], ["out"])
    return model, w.reshape(shape)


# --- loop oracles -----------------------------------------------------------------


def loop_conv(x, layer):
    f, b = layer.filters, layer.bias
    (sh, sw), (ph, pw) = layer.stride, layer.padding
    out_ch, in_ch, kh, kw = f.shape
    _, h, w = x.shape
    oh, ow = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
    y = np.zeros((out_ch, oh, ow))
    for o in range(out_ch):
        for r in range(oh):
            for c in range(ow):
                acc = b[o]
                for ci in range(in_ch):
                    for i in range(kh):
                        for j in range(kw):
                            rr, cc = r * sh - ph + i, c * sw - pw + j
                            if 0 <= rr < h and 0 <= cc < w:
                                acc += x[ci, rr, cc] * f[o, ci, i, j]
                y[o, r, c] = acc
    return y


def loop_pool(x, layer):
    """Returns pooled values and winner coordinates (first maximum in row-major order)."""
    (kh, kw), (sh, sw) = layer.window, layer.stride
    ch, h, w = x.shape
    oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
    y = np.zeros((ch, oh, ow))
    win = {}
    for c in range(ch):
        for r in range(oh):
            for q in range(ow):
                best, where = -math.inf, None
                for i in range(kh):
                    for j in range(kw):
                        v = x[c, r * sh + i, q * sw + j]
                        if v > best:
                            best, where = v, (r * sh + i, q * sw + j)
                y[c, r, q] = best
                win[(c, r, q)] = where
    return y, win


def loop_forward(model, x):
    """Per-layer inputs and pool winners computed with explicit loops."""
    h = np.array(x, dtype=float)
    inputs, winners = [], {}
    for li, layer in enumerate(model.layers):
        inputs.append(h)
        if isinstance(layer, nn.Dense):
            w, b = layer.weights, layer.bias
            h = np.array([b[j] + sum(w[j, i] * h[i] for i in range(w.shape[1]))
                          for j in range(w.shape[0])])
        elif isinstance(layer, nn.Conv2D):
            h = loop_conv(h, layer)
        elif isinstance(layer, nn.MaxPool2D):
            h, winners[li] = loop_pool(h, layer)
        elif isinstance(layer, nn.ReLU):
            h = np.where(h > 0, h, 0.0)
        else:
            h = h.reshape(-1)
    return h, inputs, winners


def loop_conv_transpose(g, layer, input_shape):
    """Explicit transposed-filter backward of a conv layer."""
    f = layer.filters
    (sh, sw), (ph, pw) = layer.stride, layer.padding
    out_ch, in_ch, kh, kw = f.shape
    _, h, w = input_shape
    gx = np.zeros(input_shape)
    for o in range(out_ch):
        for r in range(g.shape[1]):
            for c in range(g.shape[2]):
                for ci in range(in_ch):
                    for i in range(kh):
                        for j in range(kw):
                            rr, cc = r * sh - ph + i, c * sw - pw + j
                            if 0 <= rr < h and 0 <= cc < w:
                                gx[ci, rr, cc] += g[o, r, c] * f[o, ci, i, j]
    return gx


def central_differences(model, x, class_index, h=1e-5):
    g = np.zeros(x.size)
    flat = x.ravel()
    for i in range(x.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (nn.predict(model, up.reshape(x.shape))[class_index]
                - nn.predict(model, dn.reshape(x.shape))[class_index]) / (2 * h)
    return g.reshape(x.shape)


def kink_margin(model, x):
    """Smallest |ReLU pre-activation| and smallest max-pool top-2 gap along the forward pass."""
    _, trace = nn.forward(model, x)
    margin = math.inf
    for i, layer in enumerate(model.layers):
        a = trace.inputs[i]
        if isinstance(layer, nn.ReLU):
            margin = min(margin, float(np.min(np.abs(a))))
        elif isinstance(layer, nn.MaxPool2D):
            (kh, kw), (sh, sw) = layer.window, layer.stride
            win = np.lib.stride_tricks.sliding_window_view(a, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
            flat = np.sort(win.reshape(*win.shape[:3], -1), axis=-1)
            gaps = (flat[..., -1] - flat[..., -2])[flat[..., -1] != 0]  # all-dead windows tie harmlessly
            if flat.shape[-1] > 1 and gaps.size:
                margin = min(margin, float(np.min(gaps)))
    return margin


def _z_terms_dense(layer, x):
    w = layer.weights
    return [[x[i] * w[j, i] for i in range(w.shape[1])] for j in range(w.shape[0])]


def loop_zplus(model, x, class_index):
    """Independent z+ rule: R_i = sum_j z_ij^+ / sum_i' z_i'j^+ * R_j, winner-take-all pooling."""
    scores, inputs, winners = loop_forward(model, x)
    r = np.zeros(len(scores))
    r[class_index] = scores[class_index]
    for li in reversed(range(len(model.layers))):
        layer, a = model.layers[li], inputs[li]
        if isinstance(layer, nn.Dense):
            w = layer.weights
            ri = np.zeros(w.shape[1])
            for j in range(w.shape[0]):
                zp = [max(a[i] * w[j, i], 0.0) for i in range(w.shape[1])]
                den = sum(zp)
                if den != 0:
                    for i in range(w.shape[1]):
                        ri[i] += zp[i] / den * r[j]
            r = ri
        elif isinstance(layer, nn.Conv2D):
            f = layer.filters
            (sh, sw), (ph, pw) = layer.stride, layer.padding
            out_ch, in_ch, kh, kw = f.shape
            _, h, w = a.shape
            ri = np.zeros(a.shape)
            for o in range(out_ch):
                for rr in range(r.shape[1]):
                    for cc in range(r.shape[2]):
                        terms = []
                        for ci in range(in_ch):
                            for i in range(kh):
                                for j in range(kw):
                                    y, xx = rr * sh - ph + i, cc * sw - pw + j
                                    if 0 <= y < h and 0 <= xx < w:
                                        terms.append(((ci, y, xx), max(a[ci, y, xx] * f[o, ci, i, j], 0.0)))
                        den = sum(t for _, t in terms)
                        if den != 0:
                            for idx, t in terms:
                                ri[idx] += t / den * r[o, rr, cc]
            r = ri
        elif isinstance(layer, nn.MaxPool2D):
            ri = np.zeros(a.shape)
            for (c, rr, cc), (y, xx) in winners[li].items():
                ri[c, y, xx] += r[c, rr, cc]
            r = ri
        elif isinstance(layer, nn.Flatten):
            r = r.reshape(a.shape)
    return r


def lrp_denominators(model, x):
    """Per upper neuron: (sum z, sum z+, sum z-) over every dense/conv layer, bias excluded."""
    _, trace = nn.forward(model, x)
    out = []
    for li, layer in enumerate(model.layers):
        a = trace.inputs[li]
        if isinstance(layer, nn.Dense):
            z = layer.weights * a[None, :]
            out.append(z.reshape(z.shape[0], -1))
        elif isinstance(layer, nn.Conv2D):
            win = nn.conv_windows(a, layer)
            z = layer.filters[:, :, None, None] * win[None]
            out.append(z.transpose(0, 2, 3, 1, 4, 5).reshape(-1, int(np.prod(layer.filters.shape[1:]))))
    return [(z.sum(1), np.maximum(z, 0).sum(1), np.minimum(z, 0).sum(1)) for z in out]


def nondegenerate(model, x, rule="eps", tol=1e-6):
    """True when every denominator the rule divides by is bounded away from 0.

    ``eps``: |sum z| > tol; ``zplus``: sum z+ > tol; ``ab``: additionally sum z- < -tol.
    """
    for tot, pos, neg in lrp_denominators(model, x):
        if rule == "eps" and np.any(np.abs(tot) <= tol):
            return False
        if rule in ("zplus", "ab") and np.any(pos <= tol):
            return False
        if rule == "ab" and np.any(neg >= -tol):
            return False
    return True


def nondegenerate_nets(count, rule, start=0):
    """First ``count`` seeded random nets passing :func:`nondegenerate` for ``rule``."""
    out, seed = [], start
    while len(out) < count:
        model, x = random_net(seed)
        if nondegenerate(model, x, rule):
            out.append((seed, model, x))
        seed += 1
    return out


def brute_match_counts(pred, gt, radius):
    p = list(zip(*np.nonzero(pred)))
    g = list(zip(*np.nonzero(gt)))
    r2 = radius * radius

    def near(a, pts):
        return any((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 <= r2 for b in pts)

    tp = sum(1 for a in p if near(a, g))
    fn = sum(1 for b in g if not near(b, p))
    return tp, len(p) - tp, fn


def brute_curve(scores, gt, radius, thresholds):
    """Per-threshold (tp, fp, fn, P, R, F) recomputed from scratch."""
    n_gt = int(np.count_nonzero(gt))
    rows = []
    for t in thresholds:
        tp, fp, fn = brute_match_counts(scores >= t, gt, radius)
        p = tp / (tp + fp) if tp + fp else 1.0
        r = (n_gt - fn) / n_gt if n_gt else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        rows.append((tp, fp, fn, p, r, f))
    return rows


def brute_ap(rows):
    terms = []
    for k, row in enumerate(rows):
        r_next = rows[k + 1][4] if k + 1 < len(rows) else 0.0
        terms.append(row[3] * (row[4] - r_next))
    return math.fsum(terms)
