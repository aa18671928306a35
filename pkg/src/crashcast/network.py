"""Multi-branch convolutional-recurrent collision predictor.

One ConvLSTM stack per camera plus an optional vector-LSTM branch for
proprioceptive state/action sequences, merged by a relu dense layer into a
2-way softmax. Index 0 of the output is P(collision).

The gate equations, for both the convolutional and the vector layers
(the vector layer is the 1x1-spatial special case):

    I = sigmoid(Wxi*X + Whi*H(t-1) + Wci.C(t-1) + bi)
    F = sigmoid(Wxf*X + Whf*H(t-1) + Wcf.C(t-1) + bf)
    C = F.C(t-1) + I.tanh(Wxc*X + Whc*H(t-1) + bc)
    O = sigmoid(Wxo*X + Who*H(t-1) + Wco.C + bo)     <- new cell state
    H = O.tanh(C)

where * is a same-padded convolution, . is elementwise, and the output
gate peeks at the NEW cell state. Dropout masks multiply weight tensors
elementwise and are held fixed across all time steps of one pass.

Convolutions run as im2col + matmul so that batched training is fast;
the test suite checks each step against a straight-line transcription of
the gate equations built from the exact-order kernel ops, and all
gradients against central finite differences.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .kernel import sigmoid
from .sim import CAMERA_ORDER

GATES = ("i", "f", "c", "o")

INPUT_MODES = ("images_only", "images_state", "images_state_action")


# --- parameter containers ---------------------------------------------------

@dataclass
class ConvLstmLayer:
    """One convolutional-recurrent layer; kernels (m, n, c_in, p), peepholes (q', r', p)."""

    w_xi: np.ndarray
    w_hi: np.ndarray
    w_xf: np.ndarray
    w_hf: np.ndarray
    w_xc: np.ndarray
    w_hc: np.ndarray
    w_xo: np.ndarray
    w_ho: np.ndarray
    w_ci: np.ndarray
    w_cf: np.ndarray
    w_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    stride: int = 1
    return_sequences: bool = True

    @property
    def filters(self):
        return self.w_xi.shape[3]

    def validate(self):
        m, n, c_in, p = self.w_xi.shape
        for name in ("w_xi", "w_xf", "w_xc", "w_xo"):
            if getattr(self, name).shape != (m, n, c_in, p):
                raise ValueError(f"{name} shape mismatch")
        for name in ("w_hi", "w_hf", "w_hc", "w_ho"):
            if getattr(self, name).shape != (m, n, p, p):
                raise ValueError(f"{name} must convolve the p-channel hidden state")
        qr = self.w_ci.shape
        for name in ("w_ci", "w_cf", "w_co"):
            if getattr(self, name).shape != qr or qr[2] != p:
                raise ValueError(f"{name} peephole shape mismatch")
        for name in ("b_i", "b_f", "b_c", "b_o"):
            if getattr(self, name).shape != (p,):
                raise ValueError(f"{name} must have one entry per filter")


@dataclass
class LstmLayer:
    """Vector LSTM with the same gate structure (peepholes included)."""

    w_xi: np.ndarray
    w_hi: np.ndarray
    w_xf: np.ndarray
    w_hf: np.ndarray
    w_xc: np.ndarray
    w_hc: np.ndarray
    w_xo: np.ndarray
    w_ho: np.ndarray
    w_ci: np.ndarray
    w_cf: np.ndarray
    w_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def units(self):
        return self.w_xi.shape[0]


@dataclass
class DenseHead:
    """Merge dense (relu) into the 2-way output layer (softmax)."""

    w_merge: np.ndarray
    b_merge: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray


@dataclass(frozen=True)
class NetworkConfig:
    input_mode: str = "images_state_action"
    cameras: tuple = CAMERA_ORDER
    image_rows: int = 32
    image_cols: int = 32
    image_channels: int = 1
    seq_len: int = 5
    conv_filters: tuple = (8, 8)
    conv_kernels: tuple = (3, 3)
    conv_strides: tuple = (1, 2)
    conv_return_sequences: tuple = (True, False)
    lstm_units: int = 16
    merge_units: int = 32
    batch_norm: bool = False  # reserved name; not implemented

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if not self.cameras:
            raise ValueError("camera set must be non-empty")
        for cam in self.cameras:
            if cam not in CAMERA_ORDER:
                raise ValueError(f"unknown camera {cam!r}")
        if self.seq_len < 1:
            raise ValueError("sequence length must be >= 1")
        n = len(self.conv_filters)
        if not (len(self.conv_kernels) == len(self.conv_strides) == len(self.conv_return_sequences) == n):
            raise ValueError("per-layer conv hyperparameter tuples must have equal length")
        if self.conv_return_sequences and self.conv_return_sequences[-1]:
            raise ValueError("final conv layer must return only the last hidden state")
        if self.batch_norm:
            raise NotImplementedError("batch normalization is reserved but not implemented")

    @property
    def has_state_branch(self):
        return self.input_mode != "images_only"

    @property
    def state_dim(self):
        if self.input_mode == "images_state":
            return 9
        if self.input_mode == "images_state_action":
            return 10
        return 0

    def layer_dims(self):
        """Spatial dims at the OUTPUT of each conv layer."""
        q, r = self.image_rows, self.image_cols
        dims = []
        for s in self.conv_strides:
            q = -(-q // s)
            r = -(-r // s)
            dims.append((q, r))
        return dims

    @property
    def branch_feature_dim(self):
        q, r = self.layer_dims()[-1]
        return q * r * self.conv_filters[-1]

    @property
    def merge_input_dim(self):
        d = self.branch_feature_dim * len(self.cameras)
        if self.has_state_branch:
            d += self.lstm_units
        return d


@dataclass
class NetworkParams:
    branches: dict          # camera name -> list[ConvLstmLayer]
    lstm: "LstmLayer | None"
    head: DenseHead

    def tensors(self):
        """Live name -> array view of every parameter tensor, in a stable order."""
        out = {}
        for cam, layers in self.branches.items():
            for li, layer in enumerate(layers):
                for g in GATES:
                    out[f"cam.{cam}.l{li}.w_x{g}"] = getattr(layer, f"w_x{g}")
                    out[f"cam.{cam}.l{li}.w_h{g}"] = getattr(layer, f"w_h{g}")
                for g in ("i", "f", "o"):
                    out[f"cam.{cam}.l{li}.w_c{g}"] = getattr(layer, f"w_c{g}")
                for g in GATES:
                    out[f"cam.{cam}.l{li}.b_{g}"] = getattr(layer, f"b_{g}")
        if self.lstm is not None:
            for g in GATES:
                out[f"lstm.w_x{g}"] = getattr(self.lstm, f"w_x{g}")
                out[f"lstm.w_h{g}"] = getattr(self.lstm, f"w_h{g}")
            for g in ("i", "f", "o"):
                out[f"lstm.w_c{g}"] = getattr(self.lstm, f"w_c{g}")
            for g in GATES:
                out[f"lstm.b_{g}"] = getattr(self.lstm, f"b_{g}")
        out["head.w_merge"] = self.head.w_merge
        out["head.b_merge"] = self.head.b_merge
        out["head.w_out"] = self.head.w_out
        out["head.b_out"] = self.head.b_out
        return out

    def set_tensor(self, name, value):
        target = self.tensors()[name]
        if target.shape != np.shape(value):
            raise ValueError(f"shape mismatch for {name}: {target.shape} vs {np.shape(value)}")
        target[...] = value

    def copy(self):
        new_branches = {
            cam: [replace(l, **{f: getattr(l, f).copy() for f in _CONV_TENSOR_FIELDS})
                  for l in layers]
            for cam, layers in self.branches.items()
        }
        new_lstm = None
        if self.lstm is not None:
            new_lstm = replace(self.lstm, **{f: getattr(self.lstm, f).copy() for f in _LSTM_TENSOR_FIELDS})
        new_head = DenseHead(self.head.w_merge.copy(), self.head.b_merge.copy(),
                             self.head.w_out.copy(), self.head.b_out.copy())
        return NetworkParams(new_branches, new_lstm, new_head)


_CONV_TENSOR_FIELDS = tuple(
    [f"w_x{g}" for g in GATES] + [f"w_h{g}" for g in GATES]
    + [f"w_c{g}" for g in ("i", "f", "o")] + [f"b_{g}" for g in GATES]
)
_LSTM_TENSOR_FIELDS = _CONV_TENSOR_FIELDS

# weight families eligible for dropout masking, by connection kind
MASKABLE_FAMILIES = {
    "inputs": tuple(f"w_x{g}" for g in GATES),
    "recurrent": tuple(f"w_h{g}" for g in GATES),
    "outputs": tuple(f"w_c{g}" for g in ("i", "f", "o")),
}


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config, seed=0):
    """Glorot-uniform weights, zero biases except forget gate at +1."""
    rng = np.random.default_rng(seed)
    branches = {}
    for cam in config.cameras:
        layers = []
        c_in = config.image_channels
        q, r = config.image_rows, config.image_cols
        for li, p in enumerate(config.conv_filters):
            k = config.conv_kernels[li]
            s = config.conv_strides[li]
            q = -(-q // s)
            r = -(-r // s)
            fields = {}
            for g in GATES:
                fields[f"w_x{g}"] = _glorot(rng, (k, k, c_in, p), k * k * c_in, k * k * p)
                fields[f"w_h{g}"] = _glorot(rng, (k, k, p, p), k * k * p, k * k * p)
            for g in ("i", "f", "o"):
                fields[f"w_c{g}"] = _glorot(rng, (q, r, p), p, p)
            for g in GATES:
                fields[f"b_{g}"] = np.full(p, 1.0) if g == "f" else np.zeros(p)
            layers.append(ConvLstmLayer(stride=s, return_sequences=config.conv_return_sequences[li], **fields))
            c_in = p
        branches[cam] = layers
    lstm = None
    if config.has_state_branch:
        u, d = config.lstm_units, config.state_dim
        fields = {}
        for g in GATES:
            fields[f"w_x{g}"] = _glorot(rng, (u, d), d, u)
            fields[f"w_h{g}"] = _glorot(rng, (u, u), u, u)
        for g in ("i", "f", "o"):
            fields[f"w_c{g}"] = _glorot(rng, (u,), u, u)
        for g in GATES:
            fields[f"b_{g}"] = np.full(u, 1.0) if g == "f" else np.zeros(u)
        lstm = LstmLayer(**fields)
    head = DenseHead(
        w_merge=_glorot(rng, (config.merge_units, config.merge_input_dim),
                        config.merge_input_dim, config.merge_units),
        b_merge=np.zeros(config.merge_units),
        w_out=_glorot(rng, (2, config.merge_units), config.merge_units, 2),
        b_out=np.zeros(2),
    )
    return NetworkParams(branches, lstm, head)


# --- fast batched convolution ----------------------------------------------

def _conv_forward(x, w2d, m, n, stride):
    """Same-padded conv of x (B,H,W,C) with stacked kernels w2d (m*n*C, P)."""
    b, h, w, c = x.shape
    oh = -(-h // stride)
    ow = -(-w // stride)
    xp = np.pad(x, ((0, 0), (m // 2, m // 2), (n // 2, n // 2), (0, 0)))
    sb, sh, sw, sc = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (b, oh, ow, m, n, c), (sb, sh * stride, sw * stride, sh, sw, sc))
    col = np.ascontiguousarray(patches).reshape(b * oh * ow, m * n * c)
    out = (col @ w2d).reshape(b, oh, ow, -1)
    return out, col


def _conv_backward_input(dcol, x_shape, m, n, stride, oh, ow):
    """Scatter column gradients back onto the (padded, then cropped) input."""
    b, h, w, c = x_shape
    d6 = dcol.reshape(b, oh, ow, m, n, c)
    dxp = np.zeros((b, h + 2 * (m // 2), w + 2 * (n // 2), c))
    for u in range(m):
        for v in range(n):
            dxp[:, u : u + (oh - 1) * stride + 1 : stride,
                v : v + (ow - 1) * stride + 1 : stride, :] += d6[:, :, :, u, v, :]
    return dxp[:, m // 2 : m // 2 + h, n // 2 : n // 2 + w, :]


def _stack_gate_kernels(layer, prefix):
    ws = [getattr(layer, f"{prefix}{g}") for g in GATES]
    m, n, c, p = ws[0].shape
    return np.concatenate(ws, axis=3).reshape(m * n * c, 4 * p)


def _masked_layer(layer, masks):
    if not masks:
        return layer
    updates = {}
    for fname, mask in masks.items():
        updates[fname] = getattr(layer, fname) * mask
    return replace(layer, **updates)


# --- ConvLSTM step / sequence ------------------------------------------------

def _convlstm_step_batch(layer, x, h_prev, c_prev, cache=None):
    """One gate-equation step on batched tensors (B, ., ., .)."""
    p = layer.filters
    m, n = layer.w_xi.shape[:2]
    wx2d = _stack_gate_kernels(layer, "w_x")
    wh2d = _stack_gate_kernels(layer, "w_h")
    zx, col_x = _conv_forward(x, wx2d, m, n, layer.stride)
    zh, col_h = _conv_forward(h_prev, wh2d, m, n, 1)
    z = zx + zh
    gi = sigmoid(z[..., 0 * p : 1 * p] + layer.w_ci * c_prev + layer.b_i)
    gf = sigmoid(z[..., 1 * p : 2 * p] + layer.w_cf * c_prev + layer.b_f)
    gc = np.tanh(z[..., 2 * p : 3 * p] + layer.b_c)
    c_new = gf * c_prev + gi * gc
    go = sigmoid(z[..., 3 * p : 4 * p] + layer.w_co * c_new + layer.b_o)
    h_new = go * np.tanh(c_new)
    if cache is not None:
        cache.append((col_x, col_h, x.shape, h_prev.shape, gi, gf, gc, go, c_prev, c_new))
    return h_new, c_new


def _convlstm_step_backward(layer, step_cache, dh, dc_in, grads, prefix):
    """Backprop one step; returns (dx, dh_prev, dc_prev) and accumulates grads."""
    col_x, col_h, x_shape, h_shape, gi, gf, gc, go, c_prev, c_new = step_cache
    p = layer.filters
    m, n = layer.w_xi.shape[:2]
    tanh_c = np.tanh(c_new)
    d_go = dh * tanh_c
    dz_o = d_go * go * (1.0 - go)
    dc = dh * go * (1.0 - tanh_c * tanh_c) + dc_in + dz_o * layer.w_co
    d_gc = dc * gi
    dz_c = d_gc * (1.0 - gc * gc)
    d_gi = dc * gc
    dz_i = d_gi * gi * (1.0 - gi)
    d_gf = dc * c_prev
    dz_f = d_gf * gf * (1.0 - gf)
    dc_prev = dc * gf + dz_i * layer.w_ci + dz_f * layer.w_cf

    grads[f"{prefix}.w_co"] += (dz_o * c_new).sum(axis=0)
    grads[f"{prefix}.w_ci"] += (dz_i * c_prev).sum(axis=0)
    grads[f"{prefix}.w_cf"] += (dz_f * c_prev).sum(axis=0)
    for g, dz in (("i", dz_i), ("f", dz_f), ("c", dz_c), ("o", dz_o)):
        grads[f"{prefix}.b_{g}"] += dz.sum(axis=(0, 1, 2))

    dz = np.concatenate([dz_i, dz_f, dz_c, dz_o], axis=3)
    b, oh, ow = dz.shape[:3]
    dz2d = dz.reshape(b * oh * ow, 4 * p)

    dwx = col_x.T @ dz2d
    dwh = col_h.T @ dz2d
    c_in = x_shape[3]
    dwx4 = dwx.reshape(m, n, c_in, 4 * p)
    dwh4 = dwh.reshape(m, n, p, 4 * p)
    for k, g in enumerate(GATES):
        grads[f"{prefix}.w_x{g}"] += dwx4[..., k * p : (k + 1) * p]
        grads[f"{prefix}.w_h{g}"] += dwh4[..., k * p : (k + 1) * p]

    wx2d = _stack_gate_kernels(layer, "w_x")
    wh2d = _stack_gate_kernels(layer, "w_h")
    dx = _conv_backward_input(dz2d @ wx2d.T, x_shape, m, n, layer.stride, oh, ow)
    dh_prev = _conv_backward_input(dz2d @ wh2d.T, h_shape, m, n, 1, oh, ow)
    return dx, dh_prev, dc_prev


def convlstm_step(layer, x, h_prev, c_prev, masks=None):
    """Single-sample gate-equation step: x (q, r, c_in), h/c (q', r', p)."""
    layer = _masked_layer(layer, masks)
    _check_step_shapes(layer, x, h_prev, c_prev)
    h, c = _convlstm_step_batch(layer, x[None], h_prev[None], c_prev[None])
    return h[0], c[0]


def _check_step_shapes(layer, x, h_prev, c_prev):
    layer.validate()
    m, n, c_in, p = layer.w_xi.shape
    if x.ndim != 3 or x.shape[2] != c_in:
        raise ValueError(f"input must be (q, r, {c_in}), got {x.shape}")
    oq = -(-x.shape[0] // layer.stride)
    orr = -(-x.shape[1] // layer.stride)
    if h_prev.shape != (oq, orr, p) or c_prev.shape != (oq, orr, p):
        raise ValueError(f"state must be ({oq}, {orr}, {p}), got {h_prev.shape} / {c_prev.shape}")
    if layer.w_ci.shape != (oq, orr, p):
        raise ValueError(f"peephole shape {layer.w_ci.shape} does not match output dims ({oq}, {orr}, {p})")


def convlstm_sequence(layer, xs, masks=None):
    """Iterate the step from zero state with one fixed mask set.

    Returns the list of hidden states if layer.return_sequences, else the
    final hidden state.
    """
    if len(xs) == 0:
        raise ValueError("empty input sequence")
    layer = _masked_layer(layer, masks)
    h = c = _zero_state(layer, xs[0].shape)
    _check_step_shapes(layer, xs[0], h, c)
    outs = []
    for x in xs:
        h, c = _convlstm_step_batch(layer, x[None], h[None], c[None])
        h, c = h[0], c[0]
        outs.append(h)
    return outs if layer.return_sequences else outs[-1]


def _zero_state(layer, x_shape):
    p = layer.filters
    oq = -(-x_shape[0] // layer.stride)
    orr = -(-x_shape[1] // layer.stride)
    return np.zeros((oq, orr, p))


# --- vector LSTM -------------------------------------------------------------

def _lstm_step_batch(layer, x, h_prev, c_prev, cache=None):
    """One step on (B, d) inputs and (B, u) states."""
    u = layer.units
    wx = np.concatenate([getattr(layer, f"w_x{g}") for g in GATES], axis=0)  # (4u, d)
    wh = np.concatenate([getattr(layer, f"w_h{g}") for g in GATES], axis=0)
    z = x @ wx.T + h_prev @ wh.T
    gi = sigmoid(z[:, 0 * u : 1 * u] + layer.w_ci * c_prev + layer.b_i)
    gf = sigmoid(z[:, 1 * u : 2 * u] + layer.w_cf * c_prev + layer.b_f)
    gc = np.tanh(z[:, 2 * u : 3 * u] + layer.b_c)
    c_new = gf * c_prev + gi * gc
    go = sigmoid(z[:, 3 * u : 4 * u] + layer.w_co * c_new + layer.b_o)
    h_new = go * np.tanh(c_new)
    if cache is not None:
        cache.append((x, h_prev, gi, gf, gc, go, c_prev, c_new))
    return h_new, c_new


def _lstm_step_backward(layer, step_cache, dh, dc_in, grads, prefix="lstm"):
    x, h_prev, gi, gf, gc, go, c_prev, c_new = step_cache
    u = layer.units
    tanh_c = np.tanh(c_new)
    d_go = dh * tanh_c
    dz_o = d_go * go * (1.0 - go)
    dc = dh * go * (1.0 - tanh_c * tanh_c) + dc_in + dz_o * layer.w_co
    d_gc = dc * gi
    dz_c = d_gc * (1.0 - gc * gc)
    d_gi = dc * gc
    dz_i = d_gi * gi * (1.0 - gi)
    d_gf = dc * c_prev
    dz_f = d_gf * gf * (1.0 - gf)
    dc_prev = dc * gf + dz_i * layer.w_ci + dz_f * layer.w_cf

    grads[f"{prefix}.w_co"] += (dz_o * c_new).sum(axis=0)
    grads[f"{prefix}.w_ci"] += (dz_i * c_prev).sum(axis=0)
    grads[f"{prefix}.w_cf"] += (dz_f * c_prev).sum(axis=0)
    for g, dz in (("i", dz_i), ("f", dz_f), ("c", dz_c), ("o", dz_o)):
        grads[f"{prefix}.b_{g}"] += dz.sum(axis=0)
        grads[f"{prefix}.w_x{g}"] += dz.T @ x
        grads[f"{prefix}.w_h{g}"] += dz.T @ h_prev

    wx = np.concatenate([getattr(layer, f"w_x{g}") for g in GATES], axis=0)
    wh = np.concatenate([getattr(layer, f"w_h{g}") for g in GATES], axis=0)
    dz_all = np.concatenate([dz_i, dz_f, dz_c, dz_o], axis=1)
    dx = dz_all @ wx
    dh_prev = dz_all @ wh
    return dx, dh_prev, dc_prev


def lstm_step(layer, x, h_prev, c_prev, masks=None):
    """Single-sample vector LSTM step; x (d,), h/c (u,)."""
    layer = _masked_layer(layer, masks)
    if x.ndim != 1 or layer.w_xi.shape[1] != x.shape[0]:
        raise ValueError(f"input must be ({layer.w_xi.shape[1]},), got {x.shape}")
    if h_prev.shape != (layer.units,) or c_prev.shape != (layer.units,):
        raise ValueError("state dimension mismatch")
    h, c = _lstm_step_batch(layer, x[None], h_prev[None], c_prev[None])
    return h[0], c[0]


# --- full network ------------------------------------------------------------

def _branch_masks(masks, prefix):
    """Slice a global-name mask set down to one layer's field names."""
    if not masks:
        return None
    local = {}
    for name, m in masks.items():
        if name.startswith(prefix + "."):
            local[name[len(prefix) + 1 :]] = m
    return local or None


def inputs_from_samples(config, samples):
    """Stack SequenceSamples into per-branch batch arrays.

    Returns (images: dict cam -> (B, L, q, r, c), states: (B, L, d) or None).
    uint8 images (the dataset storage form) are promoted to float64 in [0, 1].
    """
    if not samples:
        raise ValueError("empty sample batch")
    for s in samples:
        if len(s.frames) != config.seq_len:
            raise ValueError(f"sample has {len(s.frames)} frames, network expects "
                             f"{config.seq_len}")
    images = {}
    for cam in config.cameras:
        stacks = []
        for s in samples:
            if cam not in s.cameras:
                raise ValueError(f"sample is missing camera {cam!r} required by the network config")
            ci = s.cameras.index(cam)
            stacks.append(np.stack([f.images[ci] for f in s.frames]))
        batch = np.stack(stacks)
        if batch.dtype == np.uint8:
            batch = batch / 255.0
        else:
            batch = batch.astype(np.float64, copy=False)
        images[cam] = batch
    states = None
    if config.has_state_branch:
        rows = []
        for s in samples:
            vecs = []
            for f in s.frames:
                v = np.asarray(f.state, dtype=np.float64)
                if v.shape != (9,):
                    raise ValueError(f"state vector must have 9 entries, got {v.shape}")
                if config.input_mode == "images_state_action":
                    v = np.append(v, float(f.action))
                vecs.append(v)
            rows.append(np.stack(vecs))
        states = np.stack(rows)
    return images, states


def _forward_batch(params, config, images, states, masks=None, cache=None, step_hook=None):
    """Run the network on stacked inputs; returns (B, 2) probabilities.

    step_hook(branch, layer_index, t, effective_layer), when given, observes
    the exact parameter set applied at every time step (test instrumentation
    for the mask-constancy requirement).
    """
    feats = []
    for cam in config.cameras:
        x_seq = images[cam]  # (B, L, q, r, c)
        b, length = x_seq.shape[:2]
        h_out = None
        layer_in = [x_seq[:, t] for t in range(length)]
        for li, layer in enumerate(params.branches[cam]):
            eff = _masked_layer(layer, _branch_masks(masks, f"cam.{cam}.l{li}"))
            h = c = np.zeros((b,) + _zero_state(eff, layer_in[0].shape[1:]).shape)
            outs = []
            step_caches = [] if cache is not None else None
            for t, x in enumerate(layer_in):
                if step_hook is not None:
                    step_hook(cam, li, t, eff)
                h, c = _convlstm_step_batch(eff, x, h, c, step_caches)
                outs.append(h)
            if cache is not None:
                cache["conv"][(cam, li)] = (eff, step_caches)
            layer_in = outs if layer.return_sequences else [outs[-1]]
        h_out = layer_in[-1]
        feats.append(h_out.reshape(b, -1))
        if cache is not None:
            cache["branch_shape"][cam] = h_out.shape
    if config.has_state_branch:
        if states is None:
            raise ValueError(f"input mode {config.input_mode!r} requires state sequences")
        eff = _masked_layer(params.lstm, _branch_masks(masks, "lstm"))
        b, length = states.shape[:2]
        h = c = np.zeros((b, eff.units))
        step_caches = [] if cache is not None else None
        for t in range(length):
            if step_hook is not None:
                step_hook("state", 0, t, eff)
            h, c = _lstm_step_batch(eff, states[:, t], h, c, step_caches)
        feats.append(h)
        if cache is not None:
            cache["lstm"] = (eff, step_caches)
    feat = np.concatenate(feats, axis=1)
    if feat.shape[1] != params.head.w_merge.shape[1]:
        raise ValueError(f"head expects {params.head.w_merge.shape[1]} features, got {feat.shape[1]}")
    act = feat @ params.head.w_merge.T + params.head.b_merge
    hidden = np.maximum(act, 0.0)
    logits = hidden @ params.head.w_out.T + params.head.b_out
    shifted = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    probs = ez / ez.sum(axis=1, keepdims=True)
    if cache is not None:
        cache["head"] = (feat, act, hidden)
        cache["probs"] = probs
    return probs


def dpm_forward_batch(params, config, samples, masks=None, step_hook=None):
    images, states = inputs_from_samples(config, samples)
    return _forward_batch(params, config, images, states, masks, step_hook=step_hook)


def dpm_forward(params, config, sample, masks=None, step_hook=None):
    """Probabilities [P(collision), P(no collision)] for one sample."""
    return dpm_forward_batch(params, config, [sample], masks, step_hook=step_hook)[0]


def zero_grads(params):
    return {name: np.zeros_like(t) for name, t in params.tensors().items()}


def dpm_gradients(params, config, samples, labels, masks=None):
    """Mean cross-entropy over the batch and exact BPTT gradients.

    labels: 1 = collision, 0 = no collision; P(collision) is probs[:, 0],
    so the target softmax index is (1 - label).
    """
    if len(samples) == 0:
        raise ValueError("empty sample batch")
    if len(labels) != len(samples):
        raise ValueError("labels must match samples")
    images, states = inputs_from_samples(config, samples)
    cache = {"conv": {}, "branch_shape": {}, "lstm": None, "head": None, "probs": None}
    probs = _forward_batch(params, config, images, states, masks, cache)
    b = len(samples)
    target = 1 - np.asarray(labels, dtype=np.int64)
    picked = np.clip(probs[np.arange(b), target], 1e-12, None)
    loss = float(-np.log(picked).mean())

    grads = zero_grads(params)
    dlogits = probs.copy()
    dlogits[np.arange(b), target] -= 1.0
    dlogits /= b

    feat, act, hidden = cache["head"]
    grads["head.w_out"] += dlogits.T @ hidden
    grads["head.b_out"] += dlogits.sum(axis=0)
    dhidden = dlogits @ params.head.w_out
    dact = dhidden * (act > 0)
    grads["head.w_merge"] += dact.T @ feat
    grads["head.b_merge"] += dact.sum(axis=0)
    dfeat = dact @ params.head.w_merge

    offset = 0
    for cam in config.cameras:
        shape = cache["branch_shape"][cam]
        width = int(np.prod(shape[1:]))
        dbranch = dfeat[:, offset : offset + width].reshape(shape)
        offset += width
        _branch_backward(params, config, cam, cache, dbranch, grads)
    if config.has_state_branch:
        eff, step_caches = cache["lstm"]
        u = eff.units
        dh = dfeat[:, offset : offset + u]
        dc = np.zeros_like(dh)
        for t in range(len(step_caches) - 1, -1, -1):
            _, dh_prev, dc_prev = _lstm_step_backward(eff, step_caches[t], dh, dc, grads)
            dh, dc = dh_prev, dc_prev

    if masks:
        for name, m in masks.items():
            if name in grads:
                grads[name] *= m
    return loss, grads


def _branch_backward(params, config, cam, cache, d_final, grads):
    layers = params.branches[cam]
    n_layers = len(layers)
    # gradient w.r.t. each layer's output sequence, walked top layer down
    d_out = {n_layers - 1: {"final": d_final}}
    for li in range(n_layers - 1, -1, -1):
        eff, step_caches = cache["conv"][(cam, li)]
        length = len(step_caches)
        d_here = d_out.get(li, {})
        dh = None
        dc = None
        dx_list = [None] * length
        for t in range(length - 1, -1, -1):
            dh_t = np.zeros(step_caches[t][9].shape)  # shaped like c_new
            if layers[li].return_sequences and t in d_here:
                dh_t = dh_t + d_here[t]
            if not layers[li].return_sequences and t == length - 1 and "final" in d_here:
                dh_t = dh_t + d_here["final"]
            if dh is not None:
                dh_t = dh_t + dh
            dc_t = dc if dc is not None else np.zeros_like(dh_t)
            dx, dh, dc = _convlstm_step_backward(eff, step_caches[t], dh_t, dc_t, grads, f"cam.{cam}.l{li}")
            dx_list[t] = dx
        if li > 0:
            below = layers[li - 1]
            if below.return_sequences:
                d_out[li - 1] = {t: dx_list[t] for t in range(length)}
            else:
                # the layer below emitted one tensor that this layer saw at every t
                total = dx_list[0]
                for t in range(1, length):
                    total = total + dx_list[t]
                d_out[li - 1] = {"final": total}
