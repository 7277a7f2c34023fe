"""Layer set with hand-written forward/backward passes.

Tensors are plain numpy arrays. Spatial layers use channels-last layout
``(batch, time, freq, channels)``; sequence layers use ``(batch, time, features)``.
Each layer caches what its backward pass needs during a training forward.
"""

from __future__ import annotations

import math

import numpy as np


class NdiffError(Exception):
    pass


class ShapeError(NdiffError, ValueError):
    pass


class StateError(NdiffError, RuntimeError):
    pass


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def hparams(self) -> dict:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind, **self.hparams()}

    def check_input(self, x):
        pass

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a preceding training forward")
        cache, self._cache = self._cache, None
        return cache

    def _accumulate(self, name, value):
        if name in self.grads:
            self.grads[name] = self.grads[name] + value
        else:
            self.grads[name] = value


def _same_padding(size, kernel, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


class Conv2d(Layer):
    """2-D convolution with 'same' padding; weights are (kh, kw, in, out)."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=(3, 3), stride=(1, 1), dtype=np.float32, rng=None):
        super().__init__()
        if min(stride) < 1 or min(kernel) < 1 or in_ch < 1 or out_ch < 1:
            raise ValueError("conv2d sizes and strides must be >= 1")
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel = tuple(int(k) for k in kernel)
        self.stride = tuple(int(s) for s in stride)
        kh, kw = self.kernel
        fan_in = in_ch * kh * kw
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = (rng.standard_normal((kh, kw, in_ch, out_ch))
                                 * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def hparams(self):
        return {"in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": list(self.kernel), "stride": list(self.stride)}

    def check_input(self, x):
        if x.ndim != 4 or x.shape[-1] != self.in_ch:
            raise ShapeError(f"conv2d expects (N, T, F, {self.in_ch}), got {x.shape}")

    def _geometry(self, shape):
        _, t, f, _ = shape
        (kh, kw), (st, sf) = self.kernel, self.stride
        to, pt0, pt1 = _same_padding(t, kh, st)
        fo, pf0, pf1 = _same_padding(f, kw, sf)
        return to, fo, ((0, 0), (pt0, pt1), (pf0, pf1), (0, 0))

    def _columns(self, xp, n, to, fo):
        """Patch matrix (n*to*fo, kh*kw*in) ordered (kernel row, kernel col, channel)."""
        (kh, kw), (st, sf) = self.kernel, self.stride
        cin = self.in_ch
        if cin == 1:
            taps = np.empty((kh * kw, n, to, fo), dtype=xp.dtype)
            k = 0
            for i in range(kh):
                for j in range(kw):
                    taps[k] = xp[:, i:i + st * to:st, j:j + sf * fo:sf, 0]
                    k += 1
            return taps.reshape(kh * kw, -1).T.copy()
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, :st * to:st, :sf * fo:sf].transpose(0, 1, 2, 4, 5, 3)
        return np.ascontiguousarray(win).reshape(n * to * fo, kh * kw * cin)

    def forward(self, x, train=False, rng=None):
        n = x.shape[0]
        to, fo, pads = self._geometry(x.shape)
        xp = np.pad(x, pads)
        cols = self._columns(xp, n, to, fo)
        y = cols @ self.params["weight"].reshape(-1, self.out_ch)
        y += self.params["bias"]
        if train:
            self._cache = (cols, x.shape, xp.shape, pads)
        return y.reshape(n, to, fo, self.out_ch)

    def backward(self, g, need_input_grad=True):
        cols, xshape, xpshape, pads = self._take_cache()
        (kh, kw), (st, sf) = self.kernel, self.stride
        n, to, fo, _ = g.shape
        cin = self.in_ch
        g2 = g.reshape(-1, self.out_ch)
        self._accumulate("weight", (cols.T @ g2).reshape(self.params["weight"].shape))
        self._accumulate("bias", g2.sum(axis=0))
        del cols
        if not need_input_grad:
            return None
        w_t = self.params["weight"].reshape(kh * kw, cin, self.out_ch).transpose(0, 2, 1)
        dxp = np.zeros(xpshape, dtype=g.dtype)
        k = 0
        for i in range(kh):
            for j in range(kw):
                dtap = (g2 @ w_t[k]).reshape(n, to, fo, cin)
                dxp[:, i:i + st * to:st, j:j + sf * fo:sf, :] += dtap
                k += 1
        (_, _), (pt0, _), (pf0, _), _ = pads
        return dxp[:, pt0:pt0 + xshape[1], pf0:pf0 + xshape[2], :]


_SUM_BLOCK = 1024


def channel_sum(x2):
    """Column sums of an (M, C) array, accumulated across blocks in float64."""
    if x2.dtype == np.float64 or x2.shape[0] < _SUM_BLOCK:
        return x2.sum(axis=0, dtype=np.float64)
    full = x2.shape[0] // _SUM_BLOCK * _SUM_BLOCK
    ones = np.ones(_SUM_BLOCK, dtype=x2.dtype)
    parts = np.matmul(ones, x2[:full].reshape(-1, _SUM_BLOCK, x2.shape[1]))
    return parts.sum(axis=0, dtype=np.float64) + x2[full:].sum(axis=0, dtype=np.float64)


class BatchNorm(Layer):
    """Per-channel normalization over every axis but the last."""

    kind = "batch_norm"

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32, rng=None):
        super().__init__()
        self.channels = int(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def hparams(self):
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def check_input(self, x):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batch_norm expects {self.channels} channels, got {x.shape}")

    def forward(self, x, train=False, rng=None):
        x2 = x.reshape(-1, self.channels)
        if train:
            m = x2.shape[0]
            mean = channel_sum(x2) / m
            xc = x2 - mean.astype(x.dtype)
            var = channel_sum(xc * xc) / m
            del xc
            mom = self.momentum
            unbiased = var * m / max(m - 1, 1)
            self.buffers["running_mean"] = ((1 - mom) * self.buffers["running_mean"]
                                            + mom * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - mom) * self.buffers["running_var"]
                                           + mom * unbiased).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"].astype(np.float64)
            var = self.buffers["running_var"].astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        scale = self.params["gamma"] * inv_std
        shift = self.params["beta"] - mean * scale
        if train:
            self._cache = (x, mean, inv_std)
        return x * scale.astype(x.dtype) + shift.astype(x.dtype)

    def backward(self, g):
        x, mean, inv_std = self._take_cache()
        m = g.size // self.channels
        g2 = g.reshape(-1, self.channels)
        x2 = x.reshape(-1, self.channels)
        sum_g = channel_sum(g2)
        # sum(g * xhat) = inv_std * (sum(g * x) - mean * sum(g))
        sum_gx = inv_std * (channel_sum(g2 * x2) - mean * sum_g)
        self._accumulate("gamma", sum_gx.astype(g.dtype))
        self._accumulate("beta", sum_g.astype(g.dtype))
        k = self.params["gamma"] * inv_std
        coef_x = -k * inv_std * sum_gx / m
        const = -coef_x * mean - k * sum_g / m
        dx = g * k.astype(g.dtype)
        dx += x * coef_x.astype(g.dtype)
        dx += const.astype(g.dtype)
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, g):
        # subgradient 0 at exactly 0
        return np.where(self._take_cache(), g, 0).astype(g.dtype, copy=False)


class MaxPool2d(Layer):
    """Non-overlapping 2x2 max pooling over (time, freq); odd edges are dropped.

    Gradient goes to the first maximal element of each window in row-major order.
    """

    kind = "max_pool2d"

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
            raise ShapeError(f"max_pool2d needs (N, T>=2, F>=2, C), got {x.shape}")

    def forward(self, x, train=False, rng=None):
        shape = x.shape
        to, fo = shape[1] // 2, shape[2] // 2
        x = x[:, :2 * to, :2 * fo]
        # pairs along freq, then along time; strict '>' keeps the first maximum
        right = x[:, :, 1::2] > x[:, :, 0::2]
        cols = np.where(right, x[:, :, 1::2], x[:, :, 0::2])
        lower = cols[:, 1::2] > cols[:, 0::2]
        y = np.where(lower, cols[:, 1::2], cols[:, 0::2])
        if train:
            self._cache = (right, lower, shape)
        return y

    def backward(self, g):
        right, lower, shape = self._take_cache()
        n, to, fo, c = g.shape
        gcols = np.zeros((n, 2 * to, fo, c), dtype=g.dtype)
        np.copyto(gcols[:, 1::2], g, where=lower)
        np.copyto(gcols[:, 0::2], g, where=~lower)
        dx = np.zeros(shape, dtype=g.dtype)
        np.copyto(dx[:, :2 * to, 1:2 * fo:2], gcols, where=right)
        np.copyto(dx[:, :2 * to, 0:2 * fo:2], gcols, where=~right)
        return dx


class Dropout(Layer):
    """Inverted dropout: scaled by 1/(1-rate) at train time, identity in eval."""

    kind = "dropout"

    def __init__(self, rate=0.3, dtype=None, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = float(rate)

    def hparams(self):
        return {"rate": self.rate}

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            if train:
                self._cache = False
            return x
        if rng is None:
            raise StateError("dropout in train mode needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape, dtype=np.float32) < keep).astype(x.dtype) / x.dtype.type(keep)
        self._cache = mask
        return x * mask

    def backward(self, g):
        mask = self._take_cache()
        return g if mask is False else g * mask


class GlobalChannelMax(Layer):
    """Per-channel maximum over all time-frequency positions: (N, T, F, C) -> (N, C)."""

    kind = "global_channel_max"

    def check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"global_channel_max expects (N, T, F, C), got {x.shape}")

    def forward(self, x, train=False, rng=None):
        n, t, f, c = x.shape
        flat = x.reshape(n, t * f, c)
        idx = flat.argmax(axis=1)
        y = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
        if train:
            self._cache = (idx, x.shape)
        return y

    def backward(self, g):
        idx, shape = self._take_cache()
        n, t, f, c = shape
        dx = np.zeros((n, t * f, c), dtype=g.dtype)
        np.put_along_axis(dx, idx[:, None, :], g[:, None, :], axis=1)
        return dx.reshape(shape)


class Dense(Layer):
    """Affine map over the last axis; weight is (in, out)."""

    kind = "dense"

    def __init__(self, in_features, out_features, dtype=np.float32, rng=None):
        super().__init__()
        self.in_features, self.out_features = int(in_features), int(out_features)
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = (rng.standard_normal((in_features, out_features))
                                 * math.sqrt(2.0 / in_features)).astype(dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def hparams(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def check_input(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"dense expects last dim {self.in_features}, got {x.shape}")

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, g):
        x = self._take_cache()
        x2 = x.reshape(-1, self.in_features)
        g2 = g.reshape(-1, self.out_features)
        self._accumulate("weight", x2.T @ g2)
        self._accumulate("bias", g2.sum(axis=0))
        return g @ self.params["weight"].T


class BiLSTM(Layer):
    """Bidirectional LSTM returning the full (N, T, 2*hidden) sequence.

    Gate order in the packed weights is input, forget, cell, output.
    """

    kind = "bilstm"

    def __init__(self, input_size, hidden, dtype=np.float32, rng=None):
        super().__init__()
        if hidden < 1:
            raise ValueError("bilstm hidden size must be >= 1")
        self.input_size, self.hidden = int(input_size), int(hidden)
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(hidden)
        for d in ("fwd", "bwd"):
            self.params[f"w_in_{d}"] = rng.uniform(-bound, bound, (input_size, 4 * hidden)).astype(dtype)
            self.params[f"w_rec_{d}"] = rng.uniform(-bound, bound, (hidden, 4 * hidden)).astype(dtype)
            b = np.zeros(4 * hidden, dtype=dtype)
            b[hidden:2 * hidden] = 1.0
            self.params[f"bias_{d}"] = b

    def hparams(self):
        return {"input_size": self.input_size, "hidden": self.hidden}

    def check_input(self, x):
        if x.ndim != 3 or x.shape[-1] != self.input_size:
            raise ShapeError(f"bilstm expects (N, T, {self.input_size}), got {x.shape}")

    def _run(self, x, d, train):
        n, t, _ = x.shape
        h_size = self.hidden
        w_rec = self.params[f"w_rec_{d}"]
        pre = x @ self.params[f"w_in_{d}"] + self.params[f"bias_{d}"]
        h = np.zeros((n, h_size), dtype=x.dtype)
        c = np.zeros((n, h_size), dtype=x.dtype)
        hs = np.empty((n, t, h_size), dtype=x.dtype)
        gates = np.empty((t, n, 4 * h_size), dtype=x.dtype) if train else None
        cs = np.empty((t + 1, n, h_size), dtype=x.dtype) if train else None
        if train:
            cs[0] = c
        for step in range(t):
            z = pre[:, step] + h @ w_rec
            i = _sigmoid(z[:, :h_size])
            f = _sigmoid(z[:, h_size:2 * h_size])
            gg = np.tanh(z[:, 2 * h_size:3 * h_size])
            o = _sigmoid(z[:, 3 * h_size:])
            c = f * c + i * gg
            h = o * np.tanh(c)
            hs[:, step] = h
            if train:
                gates[step] = np.concatenate([i, f, gg, o], axis=1)
                cs[step + 1] = c
        return hs, (x, hs, gates, cs)

    def _back(self, cache, dh_seq, d):
        x, hs, gates, cs = cache
        n, t, _ = x.shape
        h_size = self.hidden
        w_rec = self.params[f"w_rec_{d}"]
        dpre = np.empty((n, t, 4 * h_size), dtype=dh_seq.dtype)
        dh_next = np.zeros((n, h_size), dtype=dh_seq.dtype)
        dc_next = np.zeros((n, h_size), dtype=dh_seq.dtype)
        for step in range(t - 1, -1, -1):
            gt = gates[step]
            i, f, gg, o = (gt[:, k * h_size:(k + 1) * h_size] for k in range(4))
            c, c_prev = cs[step + 1], cs[step]
            tc = np.tanh(c)
            dh = dh_seq[:, step] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([dc * gg * i * (1.0 - i),
                                 dc * c_prev * f * (1.0 - f),
                                 dc * i * (1.0 - gg * gg),
                                 dh * tc * o * (1.0 - o)], axis=1)
            dpre[:, step] = dz
            dh_next = dz @ w_rec.T
            dc_next = dc * f
        h_prev = np.concatenate([np.zeros((n, 1, h_size), dtype=hs.dtype), hs[:, :-1]], axis=1)
        dpre2 = dpre.reshape(-1, 4 * h_size)
        self._accumulate(f"w_rec_{d}", h_prev.reshape(-1, h_size).T @ dpre2)
        self._accumulate(f"w_in_{d}", x.reshape(-1, self.input_size).T @ dpre2)
        self._accumulate(f"bias_{d}", dpre2.sum(axis=0))
        return dpre @ self.params[f"w_in_{d}"].T

    def forward(self, x, train=False, rng=None):
        hf, cf = self._run(x, "fwd", train)
        hb, cb = self._run(x[:, ::-1], "bwd", train)
        if train:
            self._cache = (cf, cb)
        return np.concatenate([hf, hb[:, ::-1]], axis=-1)

    def backward(self, g):
        cf, cb = self._take_cache()
        h = self.hidden
        dx = self._back(cf, g[..., :h], "fwd")
        dx_rev = self._back(cb, np.ascontiguousarray(g[:, ::-1, h:]), "bwd")
        return dx + dx_rev[:, ::-1]


class Softplus(Layer):
    """softplus(x) + floor, on one index of the last axis or on every element."""

    kind = "softplus"

    def __init__(self, index=None, floor=0.0, dtype=None, rng=None):
        super().__init__()
        self.index = None if index is None else int(index)
        self.floor = float(floor)

    def hparams(self):
        return {"index": self.index, "floor": self.floor}

    def forward(self, x, train=False, rng=None):
        if self.index is None:
            if train:
                self._cache = x
            return np.logaddexp(0.0, x) + x.dtype.type(self.floor)
        y = x.copy()
        col = x[..., self.index]
        y[..., self.index] = np.logaddexp(0.0, col) + x.dtype.type(self.floor)
        if train:
            self._cache = col
        return y

    def backward(self, g):
        cached = self._take_cache()
        if self.index is None:
            return g * _sigmoid(cached)
        dx = g.copy()
        dx[..., self.index] = g[..., self.index] * _sigmoid(cached)
        return dx


class FrameFlatten(Layer):
    """(N, T, F, C) -> (N, T, F*C): per-frame feature vectors."""

    kind = "frame_flatten"

    def check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"frame_flatten expects (N, T, F, C), got {x.shape}")

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], x.shape[1], -1)

    def backward(self, g):
        return g.reshape(self._take_cache())


LAYER_KINDS = {cls.kind: cls for cls in
               (Conv2d, BatchNorm, ReLU, MaxPool2d, Dropout, GlobalChannelMax, Dense,
                BiLSTM, Softplus, FrameFlatten)}


def layer_from_spec(spec: dict, dtype=np.float32, rng=None) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise NdiffError(f"unknown layer kind {kind!r}") from None
    if cls in (ReLU, MaxPool2d, GlobalChannelMax, FrameFlatten):
        return cls()
    return cls(**spec, dtype=dtype, rng=rng)
