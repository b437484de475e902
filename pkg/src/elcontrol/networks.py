"""Network building blocks for learned exactly-linearizable models.

Three specialised architectures, each available in two forms: a graph form
built from `autodiff` primitives (used inside training losses) and a plain
numpy form with hand-derived Jacobians (used at simulation rate).  Tests pin
the two forms against each other.

* `Bnn` - a bijective map y <-> x conditioned on a disturbance vector.  Each
  layer is ``asinh(c(d) + sinh(W(d) y + b(d)))`` with W(d) = L(d) U(d), L
  unit lower triangular and U upper triangular with exponential diagonal, so
  det W > 0 for every d and the layer inverts in closed form up to one
  triangular-factor solve.
* `DiagonalBnn` - the same layer shape with diagonal, strictly positive W,
  conditioned on (y, d); elementwise strictly increasing in its input, hence
  box-to-box and invertible in closed form.
* `Picnn` - a partially input-convex network, convex in (x, u) for fixed d.

All parameters live in one flat dict keyed by dotted names; components only
hold structure.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConditioningError, ShapeError

COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# numpy helpers

def softplus_np(x):
    return np.logaddexp(0.0, x)


def sigmoid_np(x):
    # stable both tails
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dasinh_np(q):
    """Derivative of asinh at q."""
    return 1.0 / np.sqrt(1.0 + np.square(q))


def matvec_np(a, x):
    return (a @ x[..., None])[..., 0]


class Scaler:
    """Frozen per-feature affine standardization."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, data):
        data = np.asarray(data, dtype=np.float64)
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        # constant features pass through unscaled
        std = np.where(std > 1e-9, std, 1.0)
        return cls(mean, std)

    @property
    def dim(self):
        return self.mean.shape[0]

    def transform_np(self, x):
        return (x - self.mean) / self.std

    def inverse_np(self, x):
        return x * self.std + self.mean

    def transform_t(self, x):
        return ad.mul(ad.sub(x, ad.constant(self.mean)), ad.constant(1.0 / self.std))

    def inverse_t(self, x):
        return ad.add(ad.mul(x, ad.constant(self.std)), ad.constant(self.mean))


# ---------------------------------------------------------------------------
# conditioning MLP

class ParamMlp:
    """Three-layer fully connected net with softplus hidden activations.

    Maps a conditioning vector to a flat parameter vector.  The output layer
    is linear so parameters can take either sign.
    """

    def __init__(self, prefix, in_dim, out_dim, hidden=32):
        self.prefix = prefix
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden

    def param_shapes(self):
        h, i, o = self.hidden, self.in_dim, self.out_dim
        return {
            f"{self.prefix}.W1": (h, i), f"{self.prefix}.b1": (h,),
            f"{self.prefix}.W2": (h, h), f"{self.prefix}.b2": (h,),
            f"{self.prefix}.W3": (o, h), f"{self.prefix}.b3": (o,),
        }

    def init(self, params, rng, scale=1.0, out_scale=None, last_bias=None):
        h, i, o = self.hidden, self.in_dim, self.out_dim
        out_scale = scale if out_scale is None else out_scale
        params[f"{self.prefix}.W1"] = rng.normal(0.0, scale / np.sqrt(i), (h, i))
        params[f"{self.prefix}.b1"] = np.zeros(h)
        params[f"{self.prefix}.W2"] = rng.normal(0.0, scale / np.sqrt(h), (h, h))
        params[f"{self.prefix}.b2"] = np.zeros(h)
        params[f"{self.prefix}.W3"] = rng.normal(0.0, out_scale / np.sqrt(h), (o, h))
        params[f"{self.prefix}.b3"] = (np.zeros(o) if last_bias is None
                                       else np.asarray(last_bias, dtype=np.float64).reshape(o).copy())

    def init_zero(self, params, last_bias=None):
        for name, shape in self.param_shapes().items():
            params[name] = np.zeros(shape)
        if last_bias is not None:
            params[f"{self.prefix}.b3"] = np.asarray(last_bias, dtype=np.float64).reshape(self.out_dim).copy()

    def _p(self, params, key):
        return params[f"{self.prefix}.{key}"]

    def forward_np(self, params, x):
        a1 = x @ self._p(params, "W1").T + self._p(params, "b1")
        h1 = softplus_np(a1)
        a2 = h1 @ self._p(params, "W2").T + self._p(params, "b2")
        h2 = softplus_np(a2)
        return h2 @ self._p(params, "W3").T + self._p(params, "b3")

    def forward_and_input_jacobian_np(self, params, x):
        """Value and d(out)/d(x), shapes (..., O) and (..., O, I)."""
        W1, W2, W3 = (self._p(params, k) for k in ("W1", "W2", "W3"))
        a1 = x @ W1.T + self._p(params, "b1")
        h1 = softplus_np(a1)
        a2 = h1 @ W2.T + self._p(params, "b2")
        h2 = softplus_np(a2)
        out = h2 @ W3.T + self._p(params, "b3")
        J = sigmoid_np(a1)[..., :, None] * W1
        J = W2 @ J if J.ndim == 2 else np.einsum("ik,...kj->...ij", W2, J)
        J = sigmoid_np(a2)[..., :, None] * J
        J = W3 @ J if J.ndim == 2 else np.einsum("ik,...kj->...ij", W3, J)
        return out, J

    def forward_t(self, params_t, x):
        g = lambda key: params_t[f"{self.prefix}.{key}"]
        h1 = ad.softplus(ad.add(ad.matmul(x, ad.transpose(g("W1"))), g("b1")))
        h2 = ad.softplus(ad.add(ad.matmul(h1, ad.transpose(g("W2"))), g("b2")))
        return ad.add(ad.matmul(h2, ad.transpose(g("W3"))), g("b3"))


# ---------------------------------------------------------------------------
# bijective conditioned network

def _tri_indices(n):
    lower = [(i, j) for i in range(n) for j in range(n) if i > j]
    upper = [(i, j) for i in range(n) for j in range(n) if i < j]
    return lower, upper


def _selection_matrix(idx_pairs, n):
    S = np.zeros((len(idx_pairs), n * n))
    for k, (i, j) in enumerate(idx_pairs):
        S[k, i * n + j] = 1.0
    return S


class BnnLayer:
    """One bijective layer: asinh(c(d) + sinh(W(d) y + b(d)))."""

    def __init__(self, prefix, n, cond_dim, hidden=32):
        self.prefix = prefix
        self.n = n
        lower, upper = _tri_indices(n)
        self.k_low = len(lower)
        self.s_low = _selection_matrix(lower, n)
        self.s_diag = _selection_matrix([(i, i) for i in range(n)], n)
        self.s_up = _selection_matrix(upper, n)
        self.wnet = ParamMlp(f"{prefix}.w", cond_dim, n * n, hidden)
        self.bnet = ParamMlp(f"{prefix}.b", cond_dim, n, hidden)
        self.cnet = ParamMlp(f"{prefix}.c", cond_dim, n, hidden)

    @property
    def nets(self):
        return (self.wnet, self.bnet, self.cnet)

    def _split_raw(self, raw):
        n, k = self.n, self.k_low
        return raw[..., :k], raw[..., k:k + n], raw[..., k + n:]

    def weight_np(self, params, dc):
        raw_low, raw_diag, raw_up = self._split_raw(self.wnet.forward_np(params, dc))
        n = self.n
        L = (raw_low @ self.s_low + np.eye(n).reshape(-1)).reshape(*raw_low.shape[:-1], n, n)
        U = (np.exp(raw_diag) @ self.s_diag + raw_up @ self.s_up).reshape(*raw_diag.shape[:-1], n, n)
        return L @ U

    def weight_and_dgrad_np(self, params, dc):
        """W(d) and dW/dd contracted over nothing: shapes (..., n, n) and (..., n, n, l)."""
        raw, raw_J = self.wnet.forward_and_input_jacobian_np(params, dc)
        n, k = self.n, self.k_low
        raw_low, raw_diag, raw_up = self._split_raw(raw)
        J_low, J_diag, J_up = raw_J[..., :k, :], raw_J[..., k:k + n, :], raw_J[..., k + n:, :]
        L = (raw_low @ self.s_low + np.eye(n).reshape(-1)).reshape(*raw.shape[:-1], n, n)
        ediag = np.exp(raw_diag)
        U = (ediag @ self.s_diag + raw_up @ self.s_up).reshape(*raw.shape[:-1], n, n)
        lshape = raw.shape[:-1] + (n, n, dc.shape[-1])
        dL = np.einsum("kf,...kl->...fl", self.s_low, J_low).reshape(lshape)
        dU = (np.einsum("kf,...kl->...fl", self.s_diag, ediag[..., None] * J_diag)
              + np.einsum("kf,...kl->...fl", self.s_up, J_up)).reshape(lshape)
        W = L @ U
        dW = np.einsum("...ikl,...kj->...ijl", dL, U) + np.einsum("...ik,...kjl->...ijl", L, dU)
        return W, dW

    def forward_np(self, params, y, dc):
        W = self.weight_np(params, dc)
        t = matvec_np(W, y) + self.bnet.forward_np(params, dc)
        q = self.cnet.forward_np(params, dc) + np.sinh(t)
        return np.arcsinh(q)

    def forward_with_jac_np(self, params, y, dc, want_dgrad=False):
        """Returns (out, J_y) or (out, J_y, J_d)."""
        if want_dgrad:
            W, dW = self.weight_and_dgrad_np(params, dc)
            b, Jb = self.bnet.forward_and_input_jacobian_np(params, dc)
            c, Jc = self.cnet.forward_and_input_jacobian_np(params, dc)
        else:
            W = self.weight_np(params, dc)
            b = self.bnet.forward_np(params, dc)
            c = self.cnet.forward_np(params, dc)
        t = matvec_np(W, y) + b
        q = c + np.sinh(t)
        out = np.arcsinh(q)
        J_y = (dasinh_np(q) * np.cosh(t))[..., :, None] * W
        if not want_dgrad:
            return out, J_y
        dWy = np.einsum("...ijl,...j->...il", dW, y)
        J_d = dasinh_np(q)[..., :, None] * (Jc + np.cosh(t)[..., :, None] * (dWy + Jb))
        return out, J_y, J_d

    def inverse_np(self, params, x, dc, cond_limit=COND_LIMIT):
        W = self.weight_np(params, dc)
        cond = np.linalg.cond(W)
        if np.any(cond > cond_limit):
            raise ConditioningError(
                f"layer {self.prefix!r}: weight condition number {np.max(cond):.3e} "
                f"exceeds limit {cond_limit:.1e}")
        t = np.arcsinh(np.sinh(x) - self.cnet.forward_np(params, dc))
        rhs = t - self.bnet.forward_np(params, dc)
        return np.linalg.solve(W, rhs[..., None])[..., 0]

    def forward_t(self, params_t, y, dc):
        raw = self.wnet.forward_t(params_t, dc)
        n, k = self.n, self.k_low
        raw_low = ad.narrow(raw, -1, 0, k)
        raw_diag = ad.narrow(raw, -1, k, n)
        raw_up = ad.narrow(raw, -1, k + n, raw.shape[-1] - k - n)
        L_flat = ad.add(ad.matmul(raw_low, ad.constant(self.s_low)),
                        ad.constant(np.eye(n).reshape(-1)))
        U_flat = ad.add(ad.matmul(ad.exp(raw_diag), ad.constant(self.s_diag)),
                        ad.matmul(raw_up, ad.constant(self.s_up)))
        batch = raw.shape[:-1]
        W = ad.matmul(ad.reshape(L_flat, batch + (n, n)), ad.reshape(U_flat, batch + (n, n)))
        t = ad.add(ad.matvec(W, y), self.bnet.forward_t(params_t, dc))
        q = ad.add(self.cnet.forward_t(params_t, dc), ad.sinh(t))
        return ad.asinh(q)


class Bnn:
    """Composition of BnnLayers; a conditioned bijection y <-> x."""

    def __init__(self, prefix, n, cond_dim, depth=3, hidden=32):
        self.prefix = prefix
        self.n = n
        self.cond_dim = cond_dim
        self.layers = [BnnLayer(f"{prefix}.l{k}", n, cond_dim, hidden) for k in range(depth)]

    @property
    def nets(self):
        return [net for layer in self.layers for net in layer.nets]

    def forward_np(self, params, y, dc):
        for layer in self.layers:
            y = layer.forward_np(params, y, dc)
        return y

    def forward_with_jac_np(self, params, y, dc, want_dgrad=False):
        """Value, d(out)/dy and optionally d(out)/dd, accumulated across layers."""
        J_y = np.broadcast_to(np.eye(self.n), y.shape[:-1] + (self.n, self.n)).copy()
        J_d = None
        if want_dgrad:
            J_d = np.zeros(y.shape[:-1] + (self.n, dc.shape[-1]))
        for layer in self.layers:
            if want_dgrad:
                y, Jl_y, Jl_d = layer.forward_with_jac_np(params, y, dc, want_dgrad=True)
                J_d = Jl_y @ J_d + Jl_d
            else:
                y, Jl_y = layer.forward_with_jac_np(params, y, dc)
            J_y = Jl_y @ J_y
        if want_dgrad:
            return y, J_y, J_d
        return y, J_y

    def inverse_np(self, params, x, dc, cond_limit=COND_LIMIT):
        for layer in reversed(self.layers):
            x = layer.inverse_np(params, x, dc, cond_limit)
        return x

    def forward_t(self, params_t, y, dc):
        for layer in self.layers:
            y = layer.forward_t(params_t, y, dc)
        return y


# ---------------------------------------------------------------------------
# diagonal monotone network

class DiagonalBnn:
    """Elementwise strictly increasing conditioned bijection u <-> v.

    Layer form matches BnnLayer with W diagonal and positive; conditioning is
    the standardized concatenation (y, d).
    """

    def __init__(self, prefix, m, cond_dim, depth=3, hidden=32):
        self.prefix = prefix
        self.m = m
        self.cond_dim = cond_dim
        self.wnets = [ParamMlp(f"{prefix}.l{k}.w", cond_dim, m, hidden) for k in range(depth)]
        self.bnets = [ParamMlp(f"{prefix}.l{k}.b", cond_dim, m, hidden) for k in range(depth)]
        self.cnets = [ParamMlp(f"{prefix}.l{k}.c", cond_dim, m, hidden) for k in range(depth)]

    @property
    def nets(self):
        return [n for group in zip(self.wnets, self.bnets, self.cnets) for n in group]

    @property
    def depth(self):
        return len(self.wnets)

    def forward_np(self, params, u, cond):
        for k in range(self.depth):
            w = np.exp(self.wnets[k].forward_np(params, cond))
            b = self.bnets[k].forward_np(params, cond)
            c = self.cnets[k].forward_np(params, cond)
            u = np.arcsinh(c + np.sinh(w * u + b))
        return u

    def inverse_np(self, params, v, cond):
        for k in reversed(range(self.depth)):
            raw = self.wnets[k].forward_np(params, cond)
            b = self.bnets[k].forward_np(params, cond)
            c = self.cnets[k].forward_np(params, cond)
            v = (np.arcsinh(np.sinh(v) - c) - b) * np.exp(-raw)
        return v

    def inverse_with_cond_jac_np(self, params, v, cond):
        """Inverse and its Jacobian w.r.t. the conditioning vector.

        Returns (u, J) with J of shape (..., m, cond_dim).
        """
        J = np.zeros(v.shape[:-1] + (self.m, cond.shape[-1]))
        for k in reversed(range(self.depth)):
            raw, Jr = self.wnets[k].forward_and_input_jacobian_np(params, cond)
            b, Jb = self.bnets[k].forward_and_input_jacobian_np(params, cond)
            c, Jc = self.cnets[k].forward_and_input_jacobian_np(params, cond)
            s = np.sinh(v)
            q = s - c
            a = np.arcsinh(q)
            einv = np.exp(-raw)
            out = (a - b) * einv
            d_v = einv * dasinh_np(q) * np.cosh(v)      # diagonal
            d_c = -einv * dasinh_np(q)
            J = (d_v[..., :, None] * J
                 + d_c[..., :, None] * Jc
                 - einv[..., :, None] * Jb
                 - out[..., :, None] * Jr)
            v = out
        return v, J

    def forward_t(self, params_t, u, cond):
        for k in range(self.depth):
            w = ad.exp(self.wnets[k].forward_t(params_t, cond))
            b = self.bnets[k].forward_t(params_t, cond)
            c = self.cnets[k].forward_t(params_t, cond)
            u = ad.asinh(ad.add(c, ad.sinh(ad.add(ad.mul(w, u), b))))
        return u

    def inverse_t(self, params_t, v, cond):
        for k in reversed(range(self.depth)):
            raw = self.wnets[k].forward_t(params_t, cond)
            b = self.bnets[k].forward_t(params_t, cond)
            c = self.cnets[k].forward_t(params_t, cond)
            v = ad.mul(ad.sub(ad.asinh(ad.sub(ad.sinh(v), c)), b), ad.exp(ad.mul(raw, -1.0)))
        return v


# ---------------------------------------------------------------------------
# partially input-convex network

class Picnn:
    """Convex in (x, u) for every fixed context d.

    The convex path mixes previous activations through nonnegativity-
    constrained weights (stored as softplus of a raw parameter) and through
    nonnegative gates, with convex nondecreasing softplus activations; the
    context path is unconstrained.  All nonlinearities are smooth so finite
    difference gradient checks are clean.
    """

    def __init__(self, prefix, xi_dim, ctx_dim, out_dim, depth=3, hidden=16, ctx_hidden=16):
        self.prefix = prefix
        self.xi_dim = xi_dim
        self.ctx_dim = ctx_dim
        self.out_dim = out_dim
        self.depth = depth
        self.hidden = hidden
        self.ctx_hidden = ctx_hidden

    def param_shapes(self):
        xd, cd, h, hs = self.xi_dim, self.ctx_dim, self.hidden, self.ctx_hidden
        shapes = {}
        s_prev = cd
        z_prev = None
        for k in range(self.depth):
            width = self.out_dim if k == self.depth - 1 else h
            p = f"{self.prefix}.l{k}"
            if z_prev is not None:
                shapes[f"{p}.Wz_raw"] = (width, z_prev)
                shapes[f"{p}.Wzs"] = (z_prev, s_prev)
                shapes[f"{p}.bz"] = (z_prev,)
            shapes[f"{p}.Wxi"] = (width, xd)
            shapes[f"{p}.Wxis"] = (xd, s_prev)
            shapes[f"{p}.bxi"] = (xd,)
            shapes[f"{p}.Ws"] = (width, s_prev)
            shapes[f"{p}.b"] = (width,)
            if k < self.depth - 1:
                shapes[f"{p}.V"] = (hs, s_prev)
                shapes[f"{p}.r"] = (hs,)
                s_prev = hs
            z_prev = width
        return shapes

    def init(self, params, rng, scale=1.0):
        for name, shape in self.param_shapes().items():
            fan = shape[-1] if len(shape) > 1 else 1
            if name.endswith(".bxi"):
                # gates start near one so the xi path carries signal
                params[name] = np.ones(shape)
            elif name.endswith((".b", ".bz", ".r")):
                params[name] = np.zeros(shape)
            elif name.endswith(".Wz_raw"):
                params[name] = rng.normal(-1.0, 0.3 * scale, shape)
            else:
                params[name] = rng.normal(0.0, scale / np.sqrt(fan), shape)

    def init_zero(self, params, last_bias=None):
        for name, shape in self.param_shapes().items():
            params[name] = np.full(shape, -50.0) if name.endswith(".Wz_raw") else np.zeros(shape)
        if last_bias is not None:
            params[f"{self.prefix}.l{self.depth - 1}.b"] = (
                np.asarray(last_bias, dtype=np.float64).reshape(self.out_dim).copy())

    def validate(self, params):
        for k in range(1, self.depth):
            w = softplus_np(params[f"{self.prefix}.l{k}.Wz_raw"])
            if np.any(w < 0):
                raise ValueError(f"nonnegativity-constrained weight {self.prefix}.l{k}.Wz_raw "
                                 "has a negative entry")

    def forward_np(self, params, xi, ctx):
        s = ctx
        z = None
        for k in range(self.depth):
            p = f"{self.prefix}.l{k}"
            pre = (xi * (s @ params[f"{p}.Wxis"].T + params[f"{p}.bxi"])) @ params[f"{p}.Wxi"].T
            pre = pre + s @ params[f"{p}.Ws"].T + params[f"{p}.b"]
            if z is not None:
                gate = softplus_np(s @ params[f"{p}.Wzs"].T + params[f"{p}.bz"])
                pre = pre + (z * gate) @ softplus_np(params[f"{p}.Wz_raw"]).T
            z = pre if k == self.depth - 1 else softplus_np(pre)
            if k < self.depth - 1:
                s = softplus_np(s @ params[f"{p}.V"].T + params[f"{p}.r"])
        return z

    def forward_and_xi_jacobian_np(self, params, xi, ctx):
        """Value and d(out)/d(xi), shapes (..., out) and (..., out, xi_dim)."""
        s = ctx
        z, G = None, None
        for k in range(self.depth):
            p = f"{self.prefix}.l{k}"
            gxi = s @ params[f"{p}.Wxis"].T + params[f"{p}.bxi"]
            Wxi = params[f"{p}.Wxi"]
            pre = (xi * gxi) @ Wxi.T + s @ params[f"{p}.Ws"].T + params[f"{p}.b"]
            Gpre = gxi[..., None, :] * Wxi
            if z is not None:
                gate = softplus_np(s @ params[f"{p}.Wzs"].T + params[f"{p}.bz"])
                Wz = softplus_np(params[f"{p}.Wz_raw"])
                pre = pre + (z * gate) @ Wz.T
                Gpre = Gpre + np.einsum("ik,...kj->...ij", Wz, gate[..., :, None] * G)
            if k == self.depth - 1:
                z, G = pre, Gpre
            else:
                z = softplus_np(pre)
                G = sigmoid_np(pre)[..., :, None] * Gpre
                s = softplus_np(s @ params[f"{p}.V"].T + params[f"{p}.r"])
        return z, G

    def forward_t(self, params_t, xi, ctx):
        s = ctx
        z = None
        for k in range(self.depth):
            p = f"{self.prefix}.l{k}"
            gxi = ad.add(ad.matmul(s, ad.transpose(params_t[f"{p}.Wxis"])), params_t[f"{p}.bxi"])
            pre = ad.matmul(ad.mul(xi, gxi), ad.transpose(params_t[f"{p}.Wxi"]))
            pre = ad.add(ad.add(pre, ad.matmul(s, ad.transpose(params_t[f"{p}.Ws"]))),
                         params_t[f"{p}.b"])
            if z is not None:
                gate = ad.softplus(ad.add(ad.matmul(s, ad.transpose(params_t[f"{p}.Wzs"])),
                                          params_t[f"{p}.bz"]))
                pre = ad.add(pre, ad.matmul(ad.mul(z, gate),
                                            ad.transpose(ad.softplus(params_t[f"{p}.Wz_raw"]))))
            z = pre if k == self.depth - 1 else ad.softplus(pre)
            if k < self.depth - 1:
                s = ad.softplus(ad.add(ad.matmul(s, ad.transpose(params_t[f"{p}.V"])),
                                       params_t[f"{p}.r"]))
        return z
