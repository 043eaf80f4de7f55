"""Recurrent and convolutional building blocks.

Input tiling, gated recurrent cells, four-direction multi-dimensional LSTM
scans, strided non-overlapping convolution, bidirectional LSTM, and the
composed image encoder.

Feature maps are (H, W, D) arrays: row j, column i, depth D. A scan direction
names the direction of travel; "se" starts at the top-left corner and its
predecessors are the cells above and to the left. The other three directions
are realized by flipping the input so the same canonical kernel runs, then
flipping the result back, which makes the flip symmetry between opposite
directions exact.

The 2-D scans and the 1-D sequence LSTM are single graph nodes with
hand-written backward passes: the per-cell recurrence would otherwise
dominate the graph with thousands of tiny nodes. Both are covered by finite
difference checks in the test suite.

Gate layout (packed along the last weight axis, each slot `units` wide):
  1-D LSTM:  [input, forget, output, candidate]
  2-D MDLSTM: [input, forget-horizontal, forget-vertical, output, candidate]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor, make_node

DIRECTIONS = ("se", "sw", "ne", "nw")

# direction -> (flip vertical axis, flip horizontal axis)
_FLIPS = {
    "se": (False, False),
    "sw": (False, True),
    "ne": (True, False),
    "nw": (True, True),
}


@dataclass
class EncoderConfig:
    """Architecture constants of the image encoder.

    conv_kernel is (width, height); stride always equals the kernel, so
    windows never overlap. final_dim is the per-position output size of the
    top linear layer, normally the label count including the blank.
    """

    tile: tuple = (2, 2)
    mdlstm_units: tuple = (4, 20, 100)
    conv_filters: tuple = (12, 32)
    conv_kernel: tuple = (2, 4)
    final_dim: int = 12

    def validate(self):
        if len(self.conv_filters) != len(self.mdlstm_units) - 1:
            raise ValueError(
                "need exactly one conv stage between consecutive MDLSTM layers: "
                "%d filters for %d MDLSTM layers"
                % (len(self.conv_filters), len(self.mdlstm_units))
            )
        if any(u < 1 for u in self.mdlstm_units) or any(f < 1 for f in self.conv_filters):
            raise ValueError("unit and filter counts must be positive")
        if min(self.tile) < 1 or min(self.conv_kernel) < 1:
            raise ValueError("tile and kernel extents must be positive")
        if self.final_dim < 1:
            raise ValueError("final_dim must be positive")

    def output_extents(self, height, width):
        """Spatial extents of the encoder output for a given input size."""
        h = -(-height // self.tile[0])
        w = -(-width // self.tile[1])
        kw, kh = self.conv_kernel
        for _ in self.conv_filters:
            h = -(-h // kh)
            w = -(-w // kw)
        return h, w


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_affine_params(rng, prefix, in_dim, out_dim):
    return {
        prefix + ".w": Parameter(prefix + ".w", _uniform(rng, (in_dim, out_dim), in_dim)),
        prefix + ".b": Parameter(prefix + ".b", np.zeros(out_dim)),
    }


def init_lstm_params(rng, prefix, in_dim, units):
    return {
        prefix + ".wx": Parameter(prefix + ".wx", _uniform(rng, (in_dim, 4 * units), in_dim)),
        prefix + ".wh": Parameter(prefix + ".wh", _uniform(rng, (units, 4 * units), units)),
        prefix + ".b": Parameter(prefix + ".b", np.zeros(4 * units)),
    }


def init_mdlstm_params(rng, prefix, in_dim, units):
    return {
        prefix + ".wx": Parameter(prefix + ".wx", _uniform(rng, (in_dim, 5 * units), in_dim)),
        prefix + ".wh": Parameter(prefix + ".wh", _uniform(rng, (units, 5 * units), units)),
        prefix + ".wv": Parameter(prefix + ".wv", _uniform(rng, (units, 5 * units), units)),
        prefix + ".b": Parameter(prefix + ".b", np.zeros(5 * units)),
    }


def init_mdlstm_block_params(rng, prefix, in_dim, units):
    params = {}
    for d in DIRECTIONS:
        params.update(init_mdlstm_params(rng, "%s.%s" % (prefix, d), in_dim, units))
    return params


def init_conv_params(rng, prefix, in_depth, kernel, filters):
    kw, kh = kernel
    fan_in = kh * kw * in_depth
    params = {}
    for d in DIRECTIONS:
        name = "%s.%s.w" % (prefix, d)
        params[name] = Parameter(name, _uniform(rng, (fan_in, filters), fan_in))
    bname = prefix + ".b"
    params[bname] = Parameter(bname, np.zeros(filters))
    return params


def init_blstm_params(rng, prefix, in_dim, units):
    params = {}
    params.update(init_lstm_params(rng, prefix + ".fw", in_dim, units))
    params.update(init_lstm_params(rng, prefix + ".bw", in_dim, units))
    return params


def init_encoder_params(rng, cfg, in_channels=1):
    """Parameters for encode(); draw order is fixed for reproducibility."""
    cfg.validate()
    params = {}
    depth = cfg.tile[0] * cfg.tile[1] * in_channels
    for li, units in enumerate(cfg.mdlstm_units):
        params.update(init_mdlstm_block_params(rng, "enc.l%d" % li, depth, units))
        if li < len(cfg.conv_filters):
            params.update(
                init_conv_params(rng, "enc.c%d" % li, units, cfg.conv_kernel, cfg.conv_filters[li])
            )
            depth = cfg.conv_filters[li]
        else:
            depth = units
    params.update(init_affine_params(rng, "enc.out", depth, cfg.final_dim))
    return params


def subtensors(params, prefix):
    """Project a flat name->Parameter map onto local keys under `prefix.`."""
    skip = len(prefix) + 1
    return {name[skip:]: p.tensor for name, p in params.items() if name.startswith(prefix + ".")}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tile(image, th=2, tw=2):
    """Stack th x tw pixel blocks into channels; pads bottom/right with zeros.

    Zero is the background of a mean-normalized image, so padding does not
    introduce artificial edges. Each output vector is the block in row-major
    order with the channel axis innermost.
    """
    img = image if isinstance(image, Tensor) else T.tensor(image)
    if img.ndim == 2:
        img = T.reshape(img, img.shape + (1,))
    if img.ndim != 3:
        raise ShapeError("tile expects (H, W) or (H, W, C), got %s" % (img.shape,))
    h, w, c = img.shape
    if h < 1 or w < 1:
        raise ShapeError("cannot tile an empty image of shape %s" % (img.shape,))
    ph = (-h) % th
    pw = (-w) % tw
    if ph or pw:
        img = T.zero_pad(img, (ph, pw, 0))
    h2, w2 = (h + ph) // th, (w + pw) // tw
    x = T.reshape(img, (h2, th, w2, tw, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (h2, w2, th * tw * c))


def lstm_step(x, h_prev, c_prev, p):
    """One gated update: c = f*c_prev + i*g, h = o*tanh(c).

    Composed from primitive ops; the sequence kernels below implement the
    same arithmetic with a fused backward pass.
    """
    wx, wh, b = p["wx"], p["wh"], p["b"]
    in_dim = wx.shape[0]
    units = wh.shape[0]
    xr = T.reshape(x, (1, in_dim))
    hr = T.reshape(h_prev, (1, units))
    pre = T.add(T.matmul(xr, wx), T.affine(hr, wh, b))
    gi = T.sigmoid(T.narrow(pre, 1, 0, units))
    gf = T.sigmoid(T.narrow(pre, 1, units, units))
    go = T.sigmoid(T.narrow(pre, 1, 2 * units, units))
    gg = T.tanh(T.narrow(pre, 1, 3 * units, units))
    c = T.add(T.mul(gf, T.reshape(c_prev, (1, units))), T.mul(gi, gg))
    h = T.mul(go, T.tanh(c))
    return T.reshape(h, (units,)), T.reshape(c, (units,))


def _lstm_seq_forward(x, wx, wh, b):
    length, _ = x.shape
    units = wh.shape[0]
    pre = x @ wx + b
    gates = np.empty((length, 4 * units))
    cs = np.empty((length, units))
    tanh_c = np.empty((length, units))
    hs = np.empty((length, units))
    h = np.zeros(units)
    c = np.zeros(units)
    u = units
    for t in range(length):
        a = pre[t] + h @ wh
        gi = _sigmoid(a[:u])
        gf = _sigmoid(a[u : 2 * u])
        go = _sigmoid(a[2 * u : 3 * u])
        gg = np.tanh(a[3 * u :])
        c = gf * c + gi * gg
        tc = np.tanh(c)
        h = go * tc
        gates[t, :u] = gi
        gates[t, u : 2 * u] = gf
        gates[t, 2 * u : 3 * u] = go
        gates[t, 3 * u :] = gg
        cs[t] = c
        tanh_c[t] = tc
        hs[t] = h
    return hs, (gates, cs, tanh_c)


def _lstm_seq_backward(gout, x, wx, wh, cache):
    gates, cs, tanh_c = cache
    length, _ = x.shape
    units = wh.shape[0]
    u = units
    dpre = np.empty((length, 4 * units))
    dh_next = np.zeros(units)
    dc_next = np.zeros(units)
    f_next = np.zeros(units)
    for t in range(length - 1, -1, -1):
        gi = gates[t, :u]
        gf = gates[t, u : 2 * u]
        go = gates[t, 2 * u : 3 * u]
        gg = gates[t, 3 * u :]
        tc = tanh_c[t]
        dh = gout[t] + dh_next
        dc = dc_next * f_next + dh * go * (1.0 - tc * tc)
        c_prev = cs[t - 1] if t > 0 else np.zeros(units)
        dpre[t, :u] = dc * gg * gi * (1.0 - gi)
        dpre[t, u : 2 * u] = dc * c_prev * gf * (1.0 - gf)
        dpre[t, 2 * u : 3 * u] = dh * tc * go * (1.0 - go)
        dpre[t, 3 * u :] = dc * gi * (1.0 - gg * gg)
        dh_next = dpre[t] @ wh.T
        dc_next = dc
        f_next = gf
    dx = dpre @ wx.T
    dwx = x.T @ dpre
    h_prev = np.vstack([np.zeros(units), (gates[:-1, 2 * u : 3 * u] * tanh_c[:-1])])
    dwh = h_prev.T @ dpre
    db = dpre.sum(axis=0)
    return dx, dwx, dwh, db


def lstm_seq(seq, p, reverse=False):
    """Run a 1-D LSTM over a (L, I) sequence; one graph node."""
    wx_t, wh_t, b_t = p["wx"], p["wh"], p["b"]
    x = seq.data if isinstance(seq, Tensor) else np.asarray(seq, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != wx_t.shape[0]:
        raise ShapeError("lstm_seq input %s does not match wx %s" % (x.shape, wx_t.shape))
    seq_t = seq if isinstance(seq, Tensor) else T.tensor(seq)
    xs = x[::-1].copy() if reverse else x
    hs, cache = _lstm_seq_forward(xs, wx_t.data, wh_t.data, b_t.data)
    out = hs[::-1].copy() if reverse else hs

    def backward(g):
        g2 = g[::-1].copy() if reverse else g
        dx, dwx, dwh, db = _lstm_seq_backward(g2, xs, wx_t.data, wh_t.data, cache)
        if reverse:
            dx = dx[::-1].copy()
        return ((seq_t, dx), (wx_t, dwx), (wh_t, dwh), (b_t, db))

    return make_node(out, (seq_t, wx_t, wh_t, b_t), "lstm-seq", backward)


def blstm(seq, p):
    """Bidirectional LSTM: forward and backward passes concatenated per step."""
    fw = lstm_seq(seq, {k[3:]: v for k, v in p.items() if k.startswith("fw.")})
    bw = lstm_seq(seq, {k[3:]: v for k, v in p.items() if k.startswith("bw.")}, reverse=True)
    return T.concat([fw, bw], axis=1)


def _diagonals(height, width):
    for d in range(height + width - 1):
        j0 = max(0, d - width + 1)
        j1 = min(height - 1, d)
        js = np.arange(j0, j1 + 1)
        yield js, d - js


def _mdlstm_forward(x, wx, wh, wv, b):
    """Canonical top-left scan; returns h and the cache for the backward pass."""
    height, width, in_dim = x.shape
    u = wh.shape[0]
    pre = (x.reshape(-1, in_dim) @ wx + b).reshape(height, width, 5 * u)
    gates = np.empty((height, width, 5 * u))
    cs = np.zeros((height, width, u))
    tanh_c = np.empty((height, width, u))
    hs = np.zeros((height, width, u))
    for js, is_ in _diagonals(height, width):
        a = pre[js, is_]
        mh = is_ > 0
        mv = js > 0
        if mh.any():
            a[mh] += hs[js[mh], is_[mh] - 1] @ wh
        if mv.any():
            a[mv] += hs[js[mv] - 1, is_[mv]] @ wv
        gi = _sigmoid(a[:, :u])
        gfh = _sigmoid(a[:, u : 2 * u])
        gfv = _sigmoid(a[:, 2 * u : 3 * u])
        go = _sigmoid(a[:, 3 * u : 4 * u])
        gg = np.tanh(a[:, 4 * u :])
        c = gi * gg
        if mh.any():
            c[mh] += gfh[mh] * cs[js[mh], is_[mh] - 1]
        if mv.any():
            c[mv] += gfv[mv] * cs[js[mv] - 1, is_[mv]]
        tc = np.tanh(c)
        cs[js, is_] = c
        tanh_c[js, is_] = tc
        hs[js, is_] = go * tc
        gates[js, is_, : 4 * u] = np.concatenate([gi, gfh, gfv, go], axis=1)
        gates[js, is_, 4 * u :] = gg
    return hs, (gates, cs, tanh_c, hs)


def _mdlstm_backward(gout, x, wx, wh, wv, cache):
    gates, cs, tanh_c, hs = cache
    height, width, in_dim = x.shape
    u = wh.shape[0]
    dh = gout.copy()
    dc = np.zeros((height, width, u))
    dpre = np.empty((height, width, 5 * u))
    diags = list(_diagonals(height, width))
    for js, is_ in reversed(diags):
        g_all = gates[js, is_]
        gi = g_all[:, :u]
        gfh = g_all[:, u : 2 * u]
        gfv = g_all[:, 2 * u : 3 * u]
        go = g_all[:, 3 * u : 4 * u]
        gg = g_all[:, 4 * u :]
        tc = tanh_c[js, is_]
        dh_cell = dh[js, is_]
        dc_cell = dc[js, is_] + dh_cell * go * (1.0 - tc * tc)
        mh = is_ > 0
        mv = js > 0
        c_left = np.zeros_like(tc)
        c_up = np.zeros_like(tc)
        if mh.any():
            c_left[mh] = cs[js[mh], is_[mh] - 1]
        if mv.any():
            c_up[mv] = cs[js[mv] - 1, is_[mv]]
        dp = np.concatenate(
            [
                dc_cell * gg * gi * (1.0 - gi),
                dc_cell * c_left * gfh * (1.0 - gfh),
                dc_cell * c_up * gfv * (1.0 - gfv),
                dh_cell * tc * go * (1.0 - go),
                dc_cell * gi * (1.0 - gg * gg),
            ],
            axis=1,
        )
        dpre[js, is_] = dp
        if mh.any():
            dh[js[mh], is_[mh] - 1] += dp[mh] @ wh.T
            dc[js[mh], is_[mh] - 1] += dc_cell[mh] * gfh[mh]
        if mv.any():
            dh[js[mv] - 1, is_[mv]] += dp[mv] @ wv.T
            dc[js[mv] - 1, is_[mv]] += dc_cell[mv] * gfv[mv]
    flat = dpre.reshape(-1, 5 * u)
    dx = (flat @ wx.T).reshape(height, width, in_dim)
    dwx = x.reshape(-1, in_dim).T @ flat
    h_left = np.zeros_like(hs)
    h_left[:, 1:] = hs[:, :-1]
    h_up = np.zeros_like(hs)
    h_up[1:, :] = hs[:-1, :]
    dwh = h_left.reshape(-1, u).T @ flat
    dwv = h_up.reshape(-1, u).T @ flat
    db = flat.sum(axis=0)
    return dx, dwx, dwh, dwv, db


def _flip(arr, flip_v, flip_h):
    if flip_v:
        arr = arr[::-1]
    if flip_h:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(arr)


def mdlstm_scan(fmap, direction, p):
    """Scan a (H, W, D) map in one direction; LSTM update with two
    predecessors and a separate forget gate per predecessor axis.

    Out-of-image predecessors contribute zero state. One graph node.
    """
    if direction not in _FLIPS:
        raise ValueError("unknown scan direction %r" % (direction,))
    wx_t, wh_t, wv_t, b_t = p["wx"], p["wh"], p["wv"], p["b"]
    inp = fmap if isinstance(fmap, Tensor) else T.tensor(fmap)
    if inp.ndim != 3 or inp.shape[2] != wx_t.shape[0]:
        raise ShapeError("mdlstm input %s does not match wx %s" % (inp.shape, wx_t.shape))
    flip_v, flip_h = _FLIPS[direction]
    x = _flip(inp.data, flip_v, flip_h)
    hs, cache = _mdlstm_forward(x, wx_t.data, wh_t.data, wv_t.data, b_t.data)
    out = _flip(hs, flip_v, flip_h)

    def backward(g):
        g2 = _flip(g, flip_v, flip_h)
        dx, dwx, dwh, dwv, db = _mdlstm_backward(g2, x, wx_t.data, wh_t.data, wv_t.data, cache)
        return (
            (inp, _flip(dx, flip_v, flip_h)),
            (wx_t, dwx),
            (wh_t, dwh),
            (wv_t, dwv),
            (b_t, db),
        )

    return make_node(out, (inp, wx_t, wh_t, wv_t, b_t), "mdlstm-" + direction, backward)


def mdlstm_block(fmap, p):
    """One scan per direction; outputs stay separate for the next conv."""
    return [mdlstm_scan(fmap, d, {k[3:]: v for k, v in p.items() if k.startswith(d + ".")}) for d in DIRECTIONS]


def conv_nonoverlap(inputs, kernel, p):
    """Direction-specific non-overlapping convolutions, summed, then tanh.

    Stride equals the kernel; inputs are zero-padded bottom/right to
    divisibility. Kernel weights are laid out (kh, kw, depth) row-major along
    the first weight axis.
    """
    kw, kh = kernel
    if len(inputs) != len(DIRECTIONS):
        raise ShapeError("expected %d direction maps, got %d" % (len(DIRECTIONS), len(inputs)))
    h, w, depth = inputs[0].shape
    if h < 1 or w < 1:
        raise ShapeError("cannot convolve an empty map of shape %s" % (inputs[0].shape,))
    ph = (-h) % kh
    pw = (-w) % kw
    h2, w2 = (h + ph) // kh, (w + pw) // kw
    acc = None
    for d, fmap in zip(DIRECTIONS, inputs):
        if fmap.shape != (h, w, depth):
            raise ShapeError(
                "direction maps disagree: %s vs %s" % (fmap.shape, (h, w, depth))
            )
        x = fmap
        if ph or pw:
            x = T.zero_pad(x, (ph, pw, 0))
        x = T.reshape(x, (h2, kh, w2, kw, depth))
        x = T.transpose(x, (0, 2, 1, 3, 4))
        x = T.reshape(x, (h2 * w2, kh * kw * depth))
        term = T.matmul(x, p[d + ".w"])
        acc = term if acc is None else T.add(acc, term)
    filters = p["b"].shape[0]
    acc = T.tanh(T.add(acc, p["b"]))
    return T.reshape(acc, (h2, w2, filters))


def encode(image, cfg, params, prefix="enc"):
    """Compose tiling, MDLSTM blocks, convolutions, and the top linear layer.

    Returns the (H', W', final_dim) feature map that the collapse reads.
    """
    cfg.validate()
    x = tile(image, *cfg.tile)
    n_layers = len(cfg.mdlstm_units)
    for li in range(n_layers):
        block = mdlstm_block(x, subtensors(params, "%s.l%d" % (prefix, li)))
        if li < n_layers - 1:
            x = conv_nonoverlap(block, cfg.conv_kernel, subtensors(params, "%s.c%d" % (prefix, li)))
        else:
            x = T.add(T.add(block[0], block[1]), T.add(block[2], block[3]))
    h, w, depth = x.shape
    out = subtensors(params, prefix + ".out")
    flat = T.affine(T.reshape(x, (h * w, depth)), out["w"], out["b"])
    return T.reshape(flat, (h, w, cfg.final_dim))
