"""Hot numeric kernels, each in a numba flavour (``*_nb``) and a numpy flavour (``*_np``).

The public dispatchers at the bottom of this module pick one flavour according
to :func:`kklearn._backend.use_numba`.  The two flavours implement identical
arithmetic; they agree to rounding (summation order inside BLAS differs), not
bit for bit.

MLP parameter layout (shared by every kernel): for each layer ``k`` the weight
matrix ``W_k`` of shape ``(d_{k+1}, d_k)`` in row-major order, immediately
followed by its bias ``b_k`` of length ``d_{k+1}``.  Hidden layers use the
activation selected by ``act`` (``RELU`` or ``TANH``); the last layer is linear.
"""
from __future__ import annotations

import numpy as np

from ._backend import njit, use_numba

RELU = 0
TANH = 1

DIVERGENCE_LIMIT = 1e9


# ---------------------------------------------------------------------------
# MLP: numpy flavour
# ---------------------------------------------------------------------------

def _layers(params, dims):
    out = []
    off = 0
    for din, dout in zip(dims[:-1], dims[1:]):
        W = params[off:off + din * dout].reshape(dout, din)
        off += din * dout
        b = params[off:off + dout]
        off += dout
        out.append((W, b))
    return out


def _act_np(a, act):
    if act == RELU:
        return np.maximum(a, 0.0)
    return np.tanh(a)


def _dact_np(h, act):
    # derivative expressed through the activation output; relu'(0) = 0
    if act == RELU:
        return (h > 0.0).astype(h.dtype)
    return 1.0 - h * h


def mlp_forward_np(params, dims, act, X):
    layers = _layers(params, dims)
    h = X
    last = len(layers) - 1
    for k, (W, b) in enumerate(layers):
        a = h @ W.T + b
        h = a if k == last else _act_np(a, act)
    return h


def mlp_forward_tangent_np(params, dims, act, X, V):
    layers = _layers(params, dims)
    h, hd = X, V
    last = len(layers) - 1
    for k, (W, b) in enumerate(layers):
        a = h @ W.T + b
        ad = hd @ W.T
        if k == last:
            h, hd = a, ad
        else:
            h = _act_np(a, act)
            hd = _dact_np(h, act) * ad
    return h, hd


def mlp_value_grad_np(params, dims, act, X, G):
    """Batch-summed parameter gradient of ``sum(G * forward(X))`` and the input cotangent."""
    layers = _layers(params, dims)
    hs = [X]
    last = len(layers) - 1
    h = X
    for k, (W, b) in enumerate(layers[:-1]):
        h = _act_np(h @ W.T + b, act)
        hs.append(h)
    pieces = [None] * (2 * len(layers))
    g = G
    gx = None
    for k in range(last, -1, -1):
        W, _ = layers[k]
        pieces[2 * k] = (g.T @ hs[k]).ravel()
        pieces[2 * k + 1] = g.sum(axis=0)
        gh = g @ W
        if k > 0:
            g = gh * _dact_np(hs[k], act)
        else:
            gx = gh
    return np.concatenate(pieces), gx


def mlp_tangent_grad_np(params, dims, act, X, V, Gy, Gt):
    """Parameter gradient of ``sum(Gy * value) + sum(Gt * tangent)`` for the JVP pass."""
    layers = _layers(params, dims)
    last = len(layers) - 1
    hs, hds, ads = [X], [V], []
    h, hd = X, V
    for k, (W, b) in enumerate(layers[:-1]):
        a = h @ W.T + b
        ad = hd @ W.T
        h = _act_np(a, act)
        hd = _dact_np(h, act) * ad
        hs.append(h)
        hds.append(hd)
        ads.append(ad)
    pieces = [None] * (2 * len(layers))
    g, gt = Gy, Gt
    for k in range(last, -1, -1):
        W, _ = layers[k]
        pieces[2 * k] = (g.T @ hs[k] + gt.T @ hds[k]).ravel()
        pieces[2 * k + 1] = g.sum(axis=0)
        if k > 0:
            gh = g @ W
            ght = gt @ W
            s1 = _dact_np(hs[k], act)
            g_new = s1 * gh
            if act == TANH:
                g_new = g_new - 2.0 * hs[k] * s1 * ads[k - 1] * ght
            gt = s1 * ght
            g = g_new
    return np.concatenate(pieces)


# ---------------------------------------------------------------------------
# MLP: numba flavour (flat activation buffers, one compiled call per pass)
# ---------------------------------------------------------------------------

@njit
def _offsets_nb(dims, N):
    L = dims.shape[0] - 1
    woff = np.empty(L, np.int64)
    boff = np.empty(L, np.int64)
    hoff = np.empty(L + 2, np.int64)
    off = 0
    for k in range(L):
        woff[k] = off
        off += dims[k] * dims[k + 1]
        boff[k] = off
        off += dims[k + 1]
    s = 0
    for k in range(L + 1):
        hoff[k] = s
        s += N * dims[k]
    hoff[L + 1] = s
    return woff, boff, hoff


@njit
def _act_inplace_nb(a, act):
    flat = a.ravel()
    if act == RELU:
        for i in range(flat.size):
            if flat[i] < 0.0:
                flat[i] = 0.0
    else:
        for i in range(flat.size):
            flat[i] = np.tanh(flat[i])


@njit
def _dact_nb(h, act):
    out = np.empty_like(h)
    fh = h.ravel()
    fo = out.ravel()
    if act == RELU:
        for i in range(fh.size):
            fo[i] = 1.0 if fh[i] > 0.0 else 0.0
    else:
        for i in range(fh.size):
            fo[i] = 1.0 - fh[i] * fh[i]
    return out


@njit
def _weights_nb(params, woff, boff, dims, k):
    din = dims[k]
    dout = dims[k + 1]
    W = params[woff[k]:woff[k] + din * dout].reshape((dout, din))
    b = params[boff[k]:boff[k] + dout]
    return W, b


@njit
def mlp_forward_nb(params, dims, act, X):
    N = X.shape[0]
    L = dims.shape[0] - 1
    woff, boff, hoff = _offsets_nb(dims, N)
    h = np.ascontiguousarray(X)
    for k in range(L):
        W, b = _weights_nb(params, woff, boff, dims, k)
        a = np.dot(h, W.T) + b
        if k < L - 1:
            _act_inplace_nb(a, act)
        h = a
    return h


@njit
def mlp_forward_tangent_nb(params, dims, act, X, V):
    N = X.shape[0]
    L = dims.shape[0] - 1
    woff, boff, hoff = _offsets_nb(dims, N)
    h = np.ascontiguousarray(X)
    hd = np.ascontiguousarray(V)
    for k in range(L):
        W, b = _weights_nb(params, woff, boff, dims, k)
        a = np.dot(h, W.T) + b
        ad = np.dot(hd, W.T)
        if k < L - 1:
            _act_inplace_nb(a, act)
            ad = _dact_nb(a, act) * ad
        h = a
        hd = ad
    return h, hd


@njit
def mlp_value_grad_nb(params, dims, act, X, G):
    N = X.shape[0]
    L = dims.shape[0] - 1
    woff, boff, hoff = _offsets_nb(dims, N)
    H = np.empty(hoff[L])
    H[0:hoff[1]] = np.ascontiguousarray(X).ravel()
    for k in range(L - 1):
        W, b = _weights_nb(params, woff, boff, dims, k)
        h = H[hoff[k]:hoff[k + 1]].reshape((N, dims[k]))
        a = np.dot(h, W.T) + b
        _act_inplace_nb(a, act)
        H[hoff[k + 1]:hoff[k + 2]] = a.ravel()
    grad = np.zeros(params.shape[0])
    g = np.ascontiguousarray(G)
    gx = np.empty((N, dims[0]))
    for k in range(L - 1, -1, -1):
        W, b = _weights_nb(params, woff, boff, dims, k)
        h = H[hoff[k]:hoff[k + 1]].reshape((N, dims[k]))
        gw = np.dot(g.T, h)
        grad[woff[k]:woff[k] + dims[k] * dims[k + 1]] = gw.ravel()
        for j in range(dims[k + 1]):
            s = 0.0
            for i in range(N):
                s += g[i, j]
            grad[boff[k] + j] = s
        gh = np.dot(g, W)
        if k > 0:
            g = gh * _dact_nb(h, act)
        else:
            gx = gh
    return grad, gx


@njit
def mlp_tangent_grad_nb(params, dims, act, X, V, Gy, Gt):
    N = X.shape[0]
    L = dims.shape[0] - 1
    woff, boff, hoff = _offsets_nb(dims, N)
    H = np.empty(hoff[L])
    HD = np.empty(hoff[L])
    AD = np.empty(hoff[L])
    H[0:hoff[1]] = np.ascontiguousarray(X).ravel()
    HD[0:hoff[1]] = np.ascontiguousarray(V).ravel()
    for k in range(L - 1):
        W, b = _weights_nb(params, woff, boff, dims, k)
        h = H[hoff[k]:hoff[k + 1]].reshape((N, dims[k]))
        hd = HD[hoff[k]:hoff[k + 1]].reshape((N, dims[k]))
        a = np.dot(h, W.T) + b
        ad = np.dot(hd, W.T)
        _act_inplace_nb(a, act)
        H[hoff[k + 1]:hoff[k + 2]] = a.ravel()
        HD[hoff[k + 1]:hoff[k + 2]] = (_dact_nb(a, act) * ad).ravel()
        AD[hoff[k + 1]:hoff[k + 2]] = ad.ravel()
    grad = np.zeros(params.shape[0])
    g = np.ascontiguousarray(Gy)
    gt = np.ascontiguousarray(Gt)
    for k in range(L - 1, -1, -1):
        W, b = _weights_nb(params, woff, boff, dims, k)
        h = H[hoff[k]:hoff[k + 1]].reshape((N, dims[k]))
        hd = HD[hoff[k]:hoff[k + 1]].reshape((N, dims[k]))
        gw = np.dot(g.T, h) + np.dot(gt.T, hd)
        grad[woff[k]:woff[k] + dims[k] * dims[k + 1]] = gw.ravel()
        for j in range(dims[k + 1]):
            s = 0.0
            for i in range(N):
                s += g[i, j]
            grad[boff[k] + j] = s
        if k > 0:
            gh = np.dot(g, W)
            ght = np.dot(gt, W)
            s1 = _dact_nb(h, act)
            g_new = s1 * gh
            if act == TANH:
                ad = AD[hoff[k]:hoff[k + 1]].reshape((N, dims[k]))
                g_new = g_new - 2.0 * h * s1 * ad * ght
            gt = s1 * ght
            g = g_new
    return grad


# ---------------------------------------------------------------------------
# Fixed-step RK4 for autonomous systems, batched over initial conditions
# ---------------------------------------------------------------------------

def rk4_batch_np(f, X0, dt, nsteps, lo, hi, clamp, W=None):
    """Integrate ``x' = g(x) + w_k`` for a batch of initial states.

    ``f`` maps an ``(N, n)`` array to ``(N, n)``.  With ``clamp`` the vector
    field is replaced by zero wherever the state leaves the box ``[lo, hi]``.
    ``W`` (optional, shape ``(N, nsteps, n)``) is held constant over each step.

    Returns ``(traj, fail)`` where ``traj`` has shape ``(N, nsteps + 1, n)`` and
    ``fail[i]`` is the first step index whose state was non-finite or exceeded
    the divergence limit (``-1`` if none).  Rows after a failure are NaN.
    """
    X0 = np.asarray(X0, dtype=float)
    N, n = X0.shape
    traj = np.empty((N, nsteps + 1, n))
    traj[:, 0] = X0
    fail = np.full(N, -1, dtype=np.int64)
    alive = np.ones(N, dtype=bool)
    x = X0.copy()

    def g(y):
        d = np.asarray(f(y), dtype=float)
        if clamp:
            inside = np.all((y >= lo) & (y <= hi), axis=1)
            d = np.where(inside[:, None], d, 0.0)
        return d

    half = 0.5 * dt
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(nsteps):
            w = 0.0 if W is None else W[:, k]
            k1 = g(x) + w
            k2 = g(x + half * k1) + w
            k3 = g(x + half * k2) + w
            k4 = g(x + dt * k3) + w
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            bad = alive & ~np.all(np.isfinite(x) & (np.abs(x) <= DIVERGENCE_LIMIT), axis=1)
            if bad.any():
                fail[bad] = k + 1
                alive &= ~bad
                x[bad] = 0.0
            traj[:, k + 1] = x
            traj[~alive, k + 1] = np.nan
    return traj, fail


@njit
def _inside_nb(x, lo, hi):
    for j in range(x.shape[0]):
        if x[j] < lo[j] or x[j] > hi[j]:
            return False
    return True


@njit
def _g_nb(rhs, x, lo, hi, clamp, w, use_w, out):
    if clamp and not _inside_nb(x, lo, hi):
        for j in range(x.shape[0]):
            out[j] = 0.0
    else:
        rhs(x, out)
    if use_w:
        for j in range(x.shape[0]):
            out[j] += w[j]


@njit
def rk4_batch_nb(rhs, X0, dt, nsteps, lo, hi, clamp, W, use_w):
    N, n = X0.shape
    traj = np.empty((N, nsteps + 1, n))
    fail = np.full(N, -1, np.int64)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    zero_w = np.zeros(n)
    half = 0.5 * dt
    for i in range(N):
        x = X0[i].copy()
        traj[i, 0] = x
        for k in range(nsteps):
            w = W[i, k] if use_w else zero_w
            _g_nb(rhs, x, lo, hi, clamp, w, use_w, k1)
            for j in range(n):
                tmp[j] = x[j] + half * k1[j]
            _g_nb(rhs, tmp, lo, hi, clamp, w, use_w, k2)
            for j in range(n):
                tmp[j] = x[j] + half * k2[j]
            _g_nb(rhs, tmp, lo, hi, clamp, w, use_w, k3)
            for j in range(n):
                tmp[j] = x[j] + dt * k3[j]
            _g_nb(rhs, tmp, lo, hi, clamp, w, use_w, k4)
            ok = True
            for j in range(n):
                x[j] = x[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                if not (abs(x[j]) <= DIVERGENCE_LIMIT):
                    ok = False
            if not ok:
                fail[i] = k + 1
                for kk in range(k + 1, nsteps + 1):
                    for j in range(n):
                        traj[i, kk, j] = np.nan
                break
            traj[i, k + 1] = x
    return traj, fail


# ---------------------------------------------------------------------------
# Linear filter z' = A z + B u with sampled input, batched
# ---------------------------------------------------------------------------

def rk4_linear_maps(A, B, dt):
    """Matrices of one RK4 step of ``z' = Az + Bu`` with stage inputs (u_k, u_mid, u_mid, u_{k+1}).

    Returns ``(M, P0, Pm, P1)`` with ``z+ = M z + P0 u_k + Pm u_mid + P1 u_{k+1}``,
    obtained by running the four RK4 stages on identity/zero blocks, so the
    map is the RK4 stage recursion itself.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    nz, ny = B.shape

    def step(z, u0, um, u1):
        k1 = A @ z + B @ u0
        k2 = A @ (z + 0.5 * dt * k1) + B @ um
        k3 = A @ (z + 0.5 * dt * k2) + B @ um
        k4 = A @ (z + dt * k3) + B @ u1
        return z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    Iz, Zz = np.eye(nz), np.zeros((nz, nz))
    Iu, Zu = np.eye(ny), np.zeros((ny, ny))
    M = step(Iz, np.zeros((ny, nz)), np.zeros((ny, nz)), np.zeros((ny, nz)))
    P0 = step(np.zeros((nz, ny)), Iu, Zu, Zu)
    Pm = step(np.zeros((nz, ny)), Zu, Iu, Zu)
    P1 = step(np.zeros((nz, ny)), Zu, Zu, Iu)
    return M, P0, Pm, P1


def midpoints(U, hold):
    """Input value at the half step of every interval, shape ``(N, T-1, ny)``.

    ``hold``: ``"zoh"`` holds the left sample, ``"linear"`` averages the two
    ends, ``"cubic"`` uses the four-point Lagrange midpoint rule (one-sided at
    the ends); cubic falls back to linear when fewer than four samples exist.
    """
    T = U.shape[1]
    if hold == "zoh":
        return U[:, :-1]
    if hold == "linear" or T < 4:
        return 0.5 * (U[:, :-1] + U[:, 1:])
    if hold != "cubic":
        raise ValueError(f"unknown hold mode {hold!r}")
    mid = np.empty_like(U[:, :-1])
    mid[:, 1:-1] = (-U[:, :-3] + 9.0 * U[:, 1:-2] + 9.0 * U[:, 2:-1] - U[:, 3:]) / 16.0
    mid[:, 0] = (5.0 * U[:, 0] + 15.0 * U[:, 1] - 5.0 * U[:, 2] + U[:, 3]) / 16.0
    mid[:, -1] = (U[:, -4] - 5.0 * U[:, -3] + 15.0 * U[:, -2] + 5.0 * U[:, -1]) / 16.0
    return mid


def _right_ends(U, hold):
    # zero-order hold keeps the left sample for the whole interval
    return U[:, :-1] if hold == "zoh" else U[:, 1:]


def linear_filter_np(M, P0, Pm, P1, U, Umid, U1, Z0):
    N, T, _ = U.shape
    nz = M.shape[0]
    drive = U[:, :-1] @ P0.T + Umid @ Pm.T + U1 @ P1.T
    out = np.empty((N, T, nz))
    z = np.array(Z0, dtype=float)
    out[:, 0] = z
    Mt = M.T
    for k in range(T - 1):
        z = z @ Mt + drive[:, k]
        out[:, k + 1] = z
    return out


@njit
def linear_filter_nb(M, P0, Pm, P1, U, Umid, U1, Z0):
    N, T, ny = U.shape
    nz = M.shape[0]
    out = np.empty((N, T, nz))
    for i in range(N):
        z = Z0[i].copy()
        out[i, 0] = z
        zn = np.empty(nz)
        for k in range(T - 1):
            for r in range(nz):
                s = 0.0
                for c in range(nz):
                    s += M[r, c] * z[c]
                for c in range(ny):
                    s += P0[r, c] * U[i, k, c] + Pm[r, c] * Umid[i, k, c] + P1[r, c] * U1[i, k, c]
                zn[r] = s
            z[:] = zn
            out[i, k + 1] = z
    return out


# ---------------------------------------------------------------------------
# Dispatchers
# ---------------------------------------------------------------------------

def _prep(params, dims, X):
    return (np.ascontiguousarray(params, dtype=float), np.asarray(dims, dtype=np.int64),
            np.ascontiguousarray(X, dtype=float))


def mlp_forward(params, dims, act, X):
    params, dims, X = _prep(params, dims, X)
    if use_numba():
        return mlp_forward_nb(params, dims, act, X)
    return mlp_forward_np(params, dims, act, X)


def mlp_forward_tangent(params, dims, act, X, V):
    params, dims, X = _prep(params, dims, X)
    V = np.ascontiguousarray(V, dtype=float)
    if use_numba():
        return mlp_forward_tangent_nb(params, dims, act, X, V)
    return mlp_forward_tangent_np(params, dims, act, X, V)


def mlp_value_grad(params, dims, act, X, G):
    params, dims, X = _prep(params, dims, X)
    G = np.ascontiguousarray(G, dtype=float)
    if use_numba():
        return mlp_value_grad_nb(params, dims, act, X, G)
    return mlp_value_grad_np(params, dims, act, X, G)


def mlp_tangent_grad(params, dims, act, X, V, Gy, Gt):
    params, dims, X = _prep(params, dims, X)
    V = np.ascontiguousarray(V, dtype=float)
    Gy = np.ascontiguousarray(Gy, dtype=float)
    Gt = np.ascontiguousarray(Gt, dtype=float)
    if use_numba():
        return mlp_tangent_grad_nb(params, dims, act, X, V, Gy, Gt)
    return mlp_tangent_grad_np(params, dims, act, X, V, Gy, Gt)


def rk4_batch(f, rhs_jit, X0, dt, nsteps, lo, hi, clamp, W=None):
    """Dispatch batched RK4: compiled when a jitted right-hand side is available."""
    X0 = np.ascontiguousarray(X0, dtype=float)
    lo = np.ascontiguousarray(lo, dtype=float)
    hi = np.ascontiguousarray(hi, dtype=float)
    if rhs_jit is not None and use_numba():
        if W is None:
            Wa = np.zeros((1, 1, X0.shape[1]))
            return rk4_batch_nb(rhs_jit, X0, float(dt), int(nsteps), lo, hi, bool(clamp), Wa, False)
        return rk4_batch_nb(rhs_jit, X0, float(dt), int(nsteps), lo, hi, bool(clamp),
                            np.ascontiguousarray(W, dtype=float), True)
    return rk4_batch_np(f, X0, dt, nsteps, lo, hi, clamp, W)


def linear_filter(A, B, U, Z0, dt, hold="cubic"):
    """Batched RK4 of ``z' = Az + Bu`` with ``U`` of shape ``(N, T, ny)``."""
    U = np.ascontiguousarray(U, dtype=float)
    Z0 = np.ascontiguousarray(Z0, dtype=float)
    M, P0, Pm, P1 = rk4_linear_maps(A, B, dt)
    Umid = np.ascontiguousarray(midpoints(U, hold))
    U1 = np.ascontiguousarray(_right_ends(U, hold))
    if use_numba():
        return linear_filter_nb(M, P0, Pm, P1, U, Umid, U1, Z0)
    return linear_filter_np(M, P0, Pm, P1, U, Umid, U1, Z0)
