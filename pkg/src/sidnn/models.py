"""GRU and TCN sequence models in autoregressive (AR) and non-autoregressive
(NAR) configurations, with hand-written backpropagation through time.

Conventions:
    * sequences are (batch, time, channels); convolutions run channels-first
    * models operate in standardized signal space; the AR feedback input is
      the model's own previous standardized output (zero for a fresh
      sequence, i.e. the standardized mean)
    * parameter names: "gru.{l}.Wz", "gru.{l}.Uz", "gru.{l}.bz" (likewise
      r/h gates), "tcn.{l}.kernel", "tcn.{l}.bias", "tcn.{l}.proj",
      "head.W", "head.b"

The AR variants feed their previous output back as an extra input channel,
so gradients flow through the feedback path inside a chunk; truncation
happens only at chunk boundaries (the carried state is plain values).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numkit as nk
from .errors import (
    DimensionError,
    InputError,
    ParameterError,
    StateError,
    UsageError,
)

Array = np.ndarray

ARCHS = ("gru", "tcn")
MODES = ("ar", "nar")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters for one network."""

    arch: str
    mode: str
    input_dim: int
    hidden: int
    depth: int
    kernel: int = 2
    residual: bool = True
    output_dim: int = 1
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ParameterError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.depth < 1 or self.hidden < 1:
            raise ParameterError("depth and hidden must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ParameterError("input_dim and output_dim must be >= 1")
        if self.kernel < 1:
            raise ParameterError("kernel must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must be in [0, 1)")
        if self.dropout > 0.0 and self.arch != "gru":
            raise ParameterError("dropout is only supported between GRU layers")

    @property
    def feed_dim(self) -> int:
        """Width of the network input: AR mode appends the fed-back output."""
        return self.input_dim + (self.output_dim if self.mode == "ar" else 0)


def receptive_field(depth: int) -> int:
    """Warm-up sample count of a depth-layer kernel-2 dilated stack: 2**depth - 1.

    Note: such a stack formally spans 2**depth input samples including the
    current one; this convention counts only the look-back and is the length
    used for loss masking and minimum-sequence checks.
    """
    if depth < 1:
        raise ParameterError(f"depth must be >= 1, got {depth}")
    return 2 ** depth - 1


def history_span(spec: ModelSpec) -> int:
    """Total left-pad of the conv stack: samples of history one output reads."""
    return (spec.kernel - 1) * (2 ** spec.depth - 1)


class ParamStore:
    """Ordered map of parameter name -> float64 array."""

    def __init__(self, arrays: dict[str, Array]):
        self._arrays: dict[str, Array] = {}
        for name, a in arrays.items():
            self._arrays[name] = nk.as_f64(a)

    def __getitem__(self, name: str) -> Array:
        return self._arrays[name]

    def __setitem__(self, name: str, value: Array) -> None:
        self._arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def zeros_like(self) -> dict[str, Array]:
        return {k: np.zeros_like(v) for k, v in self._arrays.items()}

    def validate_for(self, spec: ModelSpec) -> None:
        """Check names and shapes against the spec-derived shape table."""
        expected = param_shapes(spec)
        if set(self._arrays) != set(expected):
            missing = sorted(set(expected) - set(self._arrays))
            extra = sorted(set(self._arrays) - set(expected))
            raise DimensionError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self._arrays[name].shape != shape:
                raise DimensionError(
                    f"parameter '{name}' has shape {self._arrays[name].shape}, expected {shape}"
                )


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape table for one ModelSpec."""
    shapes: dict[str, tuple[int, ...]] = {}
    H = spec.hidden
    if spec.arch == "gru":
        for l in range(spec.depth):
            in_dim = spec.feed_dim if l == 0 else H
            for gate in ("z", "r", "h"):
                shapes[f"gru.{l}.W{gate}"] = (in_dim, H)
                shapes[f"gru.{l}.U{gate}"] = (H, H)
                shapes[f"gru.{l}.b{gate}"] = (H,)
    else:
        for l in range(spec.depth):
            c_in = spec.feed_dim if l == 0 else H
            shapes[f"tcn.{l}.kernel"] = (H, c_in, spec.kernel)
            shapes[f"tcn.{l}.bias"] = (H,)
            if spec.residual and c_in != H:
                shapes[f"tcn.{l}.proj"] = (H, c_in, 1)
    shapes["head.W"] = (H, spec.output_dim)
    shapes["head.b"] = (spec.output_dim,)
    return shapes


def init_params(spec: ModelSpec, seed: int) -> ParamStore:
    """Uniform(-s, s) weights with s = 1/sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, Array] = {}
    for name, shape in param_shapes(spec).items():
        kind = name.rsplit(".", 1)[-1]
        if kind.startswith("b"):
            arrays[name] = np.zeros(shape)
            continue
        if kind == "kernel" or kind == "proj":
            fan_in = shape[1] * shape[2]
        else:  # W*, U*, head.W: (in, out)
            fan_in = shape[0]
        s = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-s, s, size=shape)
    return ParamStore(arrays)


# ---------------------------------------------------------------------------
# hidden state
# ---------------------------------------------------------------------------


@dataclass
class ConvCache:
    """Per-layer ring buffers of the last (kernel-1)*2**l layer inputs.

    Buffer slot for time step t is t % len(buffer); unwritten slots are zero,
    which is exactly the left zero-padding of a fresh sequence.
    """

    spec: ModelSpec
    params: ParamStore
    buffers: list[Array]  # layer l: ((kernel-1)*2**l, B, C_in_l)
    steps: int = 0

    @classmethod
    def init(cls, spec: ModelSpec, params: ParamStore, batch: int) -> "ConvCache":
        buffers = []
        for l in range(spec.depth):
            c_in = spec.feed_dim if l == 0 else spec.hidden
            length = (spec.kernel - 1) * 2 ** l
            buffers.append(np.zeros((max(length, 1), batch, c_in)))
        return cls(spec=spec, params=params, buffers=buffers)

    def check(self, batch: int) -> None:
        if self.steps < 0:
            raise StateError(f"cache cursor out of range: steps={self.steps}")
        if len(self.buffers) != self.spec.depth:
            raise StateError(
                f"cache holds {len(self.buffers)} layer buffers, expected {self.spec.depth}"
            )
        for l, buf in enumerate(self.buffers):
            c_in = self.spec.feed_dim if l == 0 else self.spec.hidden
            length = max((self.spec.kernel - 1) * 2 ** l, 1)
            if buf.shape != (length, batch, c_in):
                raise StateError(
                    f"layer {l} buffer has shape {buf.shape}, expected {(length, batch, c_in)}"
                )

    def copy(self) -> "ConvCache":
        return ConvCache(
            spec=self.spec,
            params=self.params,
            buffers=[b.copy() for b in self.buffers],
            steps=self.steps,
        )


@dataclass
class HiddenState:
    """Carried state for chunked processing.

    gru_h: per-layer hidden (B, H); conv: AR-TCN ring buffers; input_tail:
    trailing raw inputs for NAR-TCN context re-supply; last_output: the most
    recent standardized output (AR modes).
    """

    gru_h: list[Array] | None = None
    conv: ConvCache | None = None
    input_tail: Array | None = None
    last_output: Array | None = None


def initial_state(spec: ModelSpec, params: ParamStore, batch: int) -> HiddenState:
    """Zero state for a fresh sequence."""
    state = HiddenState()
    if spec.arch == "gru":
        state.gru_h = [np.zeros((batch, spec.hidden)) for _ in range(spec.depth)]
    elif spec.mode == "ar":
        state.conv = ConvCache.init(spec, params, batch)
    else:
        state.input_tail = np.zeros((batch, 0, spec.feed_dim))
    if spec.mode == "ar":
        state.last_output = np.zeros((batch, spec.output_dim))
    return state


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


def _gru_layer_mats(params: ParamStore, l: int):
    """Concatenated gate matrices for layer l: one matmul per projection."""
    Wz, Wr, Wh = params[f"gru.{l}.Wz"], params[f"gru.{l}.Wr"], params[f"gru.{l}.Wh"]
    Uz, Ur, Uh = params[f"gru.{l}.Uz"], params[f"gru.{l}.Ur"], params[f"gru.{l}.Uh"]
    bz, br, bh = params[f"gru.{l}.bz"], params[f"gru.{l}.br"], params[f"gru.{l}.bh"]
    w_cat = np.concatenate([Wz, Wr, Wh], axis=1)  # (in, 3H)
    b_cat = np.concatenate([bz, br, bh])
    u_zr = np.concatenate([Uz, Ur], axis=1)  # (H, 2H)
    return w_cat, b_cat, u_zr, Uh


def _gru_step(proj_t: Array, h: Array, u_zr: Array, u_h: Array, H: int):
    """One gated update from precomputed input projections.

    proj_t is x @ [Wz|Wr|Wh] + b (B, 3H).
    z = sig(.), r = sig(.), c = tanh(.), h' = (1-z)*h + z*c.
    """
    zr = nk.sigmoid(proj_t[:, : 2 * H] + h @ u_zr)
    z = zr[:, :H]
    r = zr[:, H:]
    c = np.tanh(proj_t[:, 2 * H :] + (r * h) @ u_h)
    h_new = (1.0 - z) * h + z * c
    return h_new, z, r, c


def _gru_step_backward(g, h_prev, z, r, c, u_zr, u_h, ga_out):
    """Fill ga_out (B, 3H) with gate pre-activation grads; return dL/dh_prev."""
    H = h_prev.shape[1]
    gc = g * z
    gh = g * (1.0 - z)
    ga_h = gc * (1.0 - c * c)
    g_rh = ga_h @ u_h.T
    gh += g_rh * r
    ga_out[:, :H] = (g * (c - h_prev)) * z * (1.0 - z)          # ga_z
    ga_out[:, H : 2 * H] = (g_rh * h_prev) * r * (1.0 - r)      # ga_r
    ga_out[:, 2 * H :] = ga_h
    gh += ga_out[:, : 2 * H] @ u_zr.T
    return gh


def gru_cell(x_t: Array, h_prev: Array, params: ParamStore, layer: int = 0) -> Array:
    """Single GRU step: z/r gates, candidate, convex blend with h_prev."""
    w_cat, b_cat, u_zr, u_h = _gru_layer_mats(params, layer)
    if x_t.ndim != 2 or x_t.shape[1] != w_cat.shape[0]:
        raise DimensionError(
            f"gru_cell input shape {x_t.shape} incompatible with W {w_cat.shape}"
        )
    if h_prev.shape != (x_t.shape[0], u_h.shape[0]):
        raise DimensionError(
            f"gru_cell state shape {h_prev.shape} != {(x_t.shape[0], u_h.shape[0])}"
        )
    proj = x_t @ w_cat + b_cat
    h_new, _, _, _ = _gru_step(proj, h_prev, u_zr, u_h, u_h.shape[0])
    return h_new


def _dropout_masks(spec: ModelSpec, batch: int, training: bool, rng):
    if not training or spec.dropout == 0.0 or spec.depth < 2:
        return None
    if rng is None:
        raise UsageError("dropout requires an rng during training")
    keep = 1.0 - spec.dropout
    return [
        (rng.random((batch, spec.hidden)) < keep).astype(np.float64) / keep
        for _ in range(spec.depth - 1)
    ]


def _gru_forward_core(u, h0, params, spec, *, training=False, rng=None):
    # scratch arrays are time-major (T, B, .) so each step touches one
    # contiguous block; (B, T, .) slicing thrashes caches for long chunks
    B, T, _ = u.shape
    H = spec.hidden
    L = spec.depth
    mats = [_gru_layer_mats(params, l) for l in range(L)]
    masks = _dropout_masks(spec, B, training, rng)
    u_tm = np.ascontiguousarray(u.transpose(1, 0, 2))
    hs = [h.copy() for h in h0]
    Hs = [np.empty((T, B, H)) for _ in range(L)]
    Zs = [np.empty((T, B, H)) for _ in range(L)]
    Rs = [np.empty((T, B, H)) for _ in range(L)]
    Cs = [np.empty((T, B, H)) for _ in range(L)]
    # layer 0 input projections are known upfront: hoist them out of the loop
    w0, b0, _, _ = mats[0]
    proj0 = (u_tm.reshape(T * B, -1) @ w0 + b0).reshape(T, B, 3 * H)
    for t in range(T):
        x = None
        for l in range(L):
            w_cat, b_cat, u_zr, u_h = mats[l]
            proj_t = proj0[t] if l == 0 else x @ w_cat + b_cat
            h_new, z, r, c = _gru_step(proj_t, hs[l], u_zr, u_h, H)
            hs[l] = h_new
            Hs[l][t] = h_new
            Zs[l][t] = z
            Rs[l][t] = r
            Cs[l][t] = c
            if l < L - 1:
                x = h_new * masks[l] if masks else h_new
    cache = {"u_tm": u_tm, "h0": h0, "H": Hs, "Z": Zs, "R": Rs, "C": Cs,
             "masks": masks, "mats": mats, "spec": spec, "shape": (B, T)}
    return hs, cache


def _gru_weight_grads(cache, GA):
    """Stacked-matmul weight/bias gradients from per-step gate adjoints."""
    spec = cache["spec"]
    u_tm, h0 = cache["u_tm"], cache["h0"]
    Hs, Rs = cache["H"], cache["R"]
    masks = cache["masks"]
    B, T = cache["shape"]
    H = spec.hidden
    grads: dict[str, Array] = {}
    for l in range(spec.depth):
        if l == 0:
            x_stack = u_tm.reshape(T * B, -1)
        else:
            below = Hs[l - 1]
            x = below * masks[l - 1] if masks else below
            x_stack = x.reshape(T * B, H)
        ga = GA[l].reshape(T * B, 3 * H)
        gw = x_stack.T @ ga
        h_prev_stack = np.concatenate([h0[l][None], Hs[l][:-1]], axis=0)
        h_prev_flat = h_prev_stack.reshape(T * B, H)
        gu_zr = h_prev_flat.T @ ga[:, : 2 * H]
        rh_flat = (Rs[l] * h_prev_stack).reshape(T * B, H)
        gu_h = rh_flat.T @ ga[:, 2 * H :]
        gb = ga.sum(axis=0)
        grads[f"gru.{l}.Wz"] = gw[:, :H]
        grads[f"gru.{l}.Wr"] = gw[:, H : 2 * H]
        grads[f"gru.{l}.Wh"] = gw[:, 2 * H :]
        grads[f"gru.{l}.Uz"] = gu_zr[:, :H]
        grads[f"gru.{l}.Ur"] = gu_zr[:, H:]
        grads[f"gru.{l}.Uh"] = gu_h
        grads[f"gru.{l}.bz"] = gb[:H]
        grads[f"gru.{l}.br"] = gb[H : 2 * H]
        grads[f"gru.{l}.bh"] = gb[2 * H :]
    return grads


def _gru_backward_core(cache, g_top, *, need_input_grad):
    """Reverse sweep for the NAR stack; g_top is time-major (T, B, H)."""
    spec = cache["spec"]
    u_tm, h0 = cache["u_tm"], cache["h0"]
    Hs, Zs, Rs, Cs = cache["H"], cache["Z"], cache["R"], cache["C"]
    masks, mats = cache["masks"], cache["mats"]
    B, T = cache["shape"]
    H = spec.hidden
    L = spec.depth
    GA = [np.empty((T, B, 3 * H)) for _ in range(L)]
    gh_carry = [np.zeros((B, H)) for _ in range(L)]
    gu = np.empty((T, B, u_tm.shape[2])) if need_input_grad else None
    for t in range(T - 1, -1, -1):
        g_above = g_top[t]
        for l in range(L - 1, -1, -1):
            _, _, u_zr, u_h = mats[l]
            g = gh_carry[l] + g_above
            h_prev = Hs[l][t - 1] if t > 0 else h0[l]
            gh_carry[l] = _gru_step_backward(
                g, h_prev, Zs[l][t], Rs[l][t], Cs[l][t], u_zr, u_h, GA[l][t]
            )
            if l > 0:
                gx = GA[l][t] @ mats[l][0].T
                g_above = gx * masks[l - 1] if masks else gx
            elif need_input_grad:
                gu[t] = GA[0][t] @ mats[0][0].T
    grads = _gru_weight_grads(cache, GA)
    if gu is not None:
        gu = np.ascontiguousarray(gu.transpose(1, 0, 2))
    return grads, gu, gh_carry


def _check_seq_input(u: Array, spec: ModelSpec) -> None:
    if u.ndim != 3:
        raise DimensionError(f"expected (batch, time, channels) input, got shape {u.shape}")
    if u.shape[2] != spec.input_dim:
        raise DimensionError(
            f"input has {u.shape[2]} channels, spec expects {spec.input_dim}"
        )
    if u.shape[1] < 1:
        raise InputError("input must contain at least one time step")


def gru_forward(
    u: Array,
    h0: HiddenState | None,
    params: ParamStore,
    spec: ModelSpec,
    *,
    training: bool = False,
    rng=None,
    return_cache: bool = False,
):
    """Stacked NAR GRU over a sequence; returns (y, final state[, cache])."""
    if spec.mode != "nar" or spec.arch != "gru":
        raise UsageError(f"gru_forward requires a gru/nar spec, got {spec.arch}/{spec.mode}")
    _check_seq_input(u, spec)
    B, T, _ = u.shape
    if h0 is None or h0.gru_h is None:
        h0_list = [np.zeros((B, spec.hidden)) for _ in range(spec.depth)]
    else:
        h0_list = h0.gru_h
    hs, cache = _gru_forward_core(u, h0_list, params, spec, training=training, rng=rng)
    w_y, b_y = params["head.W"], params["head.b"]
    y_tm = (cache["H"][-1].reshape(T * B, spec.hidden) @ w_y + b_y)
    y = np.ascontiguousarray(y_tm.reshape(T, B, spec.output_dim).transpose(1, 0, 2))
    state = HiddenState(gru_h=hs)
    if return_cache:
        cache["y"] = y
        cache["params"] = params
        return y, state, cache
    return y, state


def gru_nar_backward(cache, g_y: Array, *, need_input_grad: bool = False):
    """Gradients of a cached gru_forward run; g_y matches the output shape."""
    params = cache["params"]
    spec = cache["spec"]
    B, T = cache["shape"]
    H = spec.hidden
    w_y = params["head.W"]
    h_top_flat = cache["H"][-1].reshape(T * B, H)
    g_flat = np.ascontiguousarray(g_y.transpose(1, 0, 2)).reshape(T * B, -1)
    g_top = (g_flat @ w_y.T).reshape(T, B, H)
    grads, gu, _ = _gru_backward_core(cache, g_top, need_input_grad=need_input_grad)
    grads["head.W"] = h_top_flat.T @ g_flat
    grads["head.b"] = g_flat.sum(axis=0)
    return grads, gu


def gru_forward_ar(
    u: Array,
    h0: HiddenState | None,
    params: ParamStore,
    spec: ModelSpec,
    *,
    teacher: Array | None = None,
    training: bool = False,
    rng=None,
    return_cache: bool = False,
):
    """Free-running AR GRU: input at t is concat(u_t, previous output).

    The fed-back value is the model's own standardized output unless a
    teacher sequence (standardized ground truth) is supplied.
    """
    if spec.mode != "ar" or spec.arch != "gru":
        raise UsageError(f"gru_forward_ar requires a gru/ar spec, got {spec.arch}/{spec.mode}")
    _check_seq_input(u, spec)
    B, T, _ = u.shape
    H, L, O = spec.hidden, spec.depth, spec.output_dim
    if h0 is None:
        h0 = initial_state(spec, params, B)
    if h0.last_output is None:
        raise StateError("AR forward needs state.last_output (zero for a fresh sequence)")
    h0_list = h0.gru_h if h0.gru_h is not None else [np.zeros((B, H)) for _ in range(L)]
    mats = [_gru_layer_mats(params, l) for l in range(L)]
    masks = _dropout_masks(spec, B, training, rng)
    w_y, b_y = params["head.W"], params["head.b"]
    u_tm = np.ascontiguousarray(u.transpose(1, 0, 2))
    hs = [h.copy() for h in h0_list]
    Hs = [np.empty((T, B, H)) for _ in range(L)]
    Zs = [np.empty((T, B, H)) for _ in range(L)]
    Rs = [np.empty((T, B, H)) for _ in range(L)]
    Cs = [np.empty((T, B, H)) for _ in range(L)]
    FB = np.empty((T, B, O))
    Y = np.empty((T, B, O))
    fb = h0.last_output
    for t in range(T):
        FB[t] = fb
        x = np.concatenate([u_tm[t], fb], axis=1)
        for l in range(L):
            w_cat, b_cat, u_zr, u_h = mats[l]
            proj_t = x @ w_cat + b_cat
            h_new, z, r, c = _gru_step(proj_t, hs[l], u_zr, u_h, H)
            hs[l] = h_new
            Hs[l][t] = h_new
            Zs[l][t] = z
            Rs[l][t] = r
            Cs[l][t] = c
            if l < L - 1:
                x = h_new * masks[l] if masks else h_new
        y_t = Hs[L - 1][t] @ w_y + b_y
        Y[t] = y_t
        fb = teacher[:, t] if teacher is not None else y_t
    y = np.ascontiguousarray(Y.transpose(1, 0, 2))
    state = HiddenState(gru_h=hs, last_output=fb.copy())
    if return_cache:
        cache = {"u_tm": u_tm, "h0": h0_list, "H": Hs, "Z": Zs, "R": Rs, "C": Cs,
                 "masks": masks, "mats": mats, "spec": spec, "params": params,
                 "FB": FB, "y": y, "shape": (B, T),
                 "teacher_forced": teacher is not None}
        return y, state, cache
    return y, state


def gru_ar_backward(cache, g_y: Array, *, need_input_grad: bool = False):
    """Gradients of a cached gru_forward_ar run, including feedback paths."""
    params = cache["params"]
    spec = cache["spec"]
    u_tm, h0 = cache["u_tm"], cache["h0"]
    Hs, Zs, Rs, Cs = cache["H"], cache["Z"], cache["R"], cache["C"]
    masks, mats = cache["masks"], cache["mats"]
    teacher_forced = cache["teacher_forced"]
    B, T = cache["shape"]
    H, L, O, I = spec.hidden, spec.depth, spec.output_dim, spec.input_dim
    w_y = params["head.W"]
    g_tm = np.ascontiguousarray(g_y.transpose(1, 0, 2))
    GA = [np.empty((T, B, 3 * H)) for _ in range(L)]
    GY = np.empty((T, B, O))
    gh_carry = [np.zeros((B, H)) for _ in range(L)]
    gu = np.empty((T, B, I)) if need_input_grad else None
    g_fb = np.zeros((B, O))
    for t in range(T - 1, -1, -1):
        g_out = g_tm[t] + g_fb
        GY[t] = g_out
        g_above = g_out @ w_y.T
        for l in range(L - 1, -1, -1):
            _, _, u_zr, u_h = mats[l]
            g = gh_carry[l] + g_above
            h_prev = Hs[l][t - 1] if t > 0 else h0[l]
            gh_carry[l] = _gru_step_backward(
                g, h_prev, Zs[l][t], Rs[l][t], Cs[l][t], u_zr, u_h, GA[l][t]
            )
            if l > 0:
                gx = GA[l][t] @ mats[l][0].T
                g_above = gx * masks[l - 1] if masks else gx
            else:
                gx0 = GA[0][t] @ mats[0][0].T
                if teacher_forced:
                    g_fb = np.zeros((B, O))
                else:
                    g_fb = gx0[:, I:]
                if need_input_grad:
                    gu[t] = gx0[:, :I]
    # feed the AR input stack (u plus fed-back outputs) into the shared
    # weight-gradient accumulation by swapping it in as the layer-0 input
    ar_cache = dict(cache)
    ar_cache["u_tm"] = np.concatenate([u_tm, cache["FB"]], axis=2)
    grads = _gru_weight_grads(ar_cache, GA)
    gy_flat = GY.reshape(T * B, O)
    grads["head.W"] = Hs[L - 1].reshape(T * B, H).T @ gy_flat
    grads["head.b"] = gy_flat.sum(axis=0)
    if gu is not None:
        gu = np.ascontiguousarray(gu.transpose(1, 0, 2))
    return grads, gu


# ---------------------------------------------------------------------------
# TCN
# ---------------------------------------------------------------------------


def _tcn_layer_params(params: ParamStore, spec: ModelSpec, l: int):
    k = params[f"tcn.{l}.kernel"]
    bias = params[f"tcn.{l}.bias"]
    proj = params[f"tcn.{l}.proj"] if f"tcn.{l}.proj" in params else None
    identity_skip = spec.residual and proj is None
    return k, bias, proj, identity_skip


def _tcn_forward_ctx(u: Array, ctx: Array | None, params: ParamStore, spec: ModelSpec):
    """Conv stack over [ctx, u]; outputs for the u region only.

    ctx is raw network input history (B, T_ctx, feed); it re-creates the
    activations a monolithic pass over the whole window would produce, so
    chunked NAR-TCN processing is exact.
    """
    B, T, _ = u.shape
    if ctx is not None and ctx.shape[1] > 0:
        x = np.concatenate([ctx, u], axis=1)
    else:
        x = u
    n_ctx = x.shape[1] - T
    x = np.ascontiguousarray(x.transpose(0, 2, 1))  # (B, C, n_ctx + T)
    xs = [x]
    pres = []
    for l in range(spec.depth):
        k, bias, proj, identity_skip = _tcn_layer_params(params, spec, l)
        pre = nk.causal_conv1d(x, k, 2 ** l)
        pre += bias[None, :, None]
        a = nk.relu(pre)
        if identity_skip:
            out = a + x
        elif proj is not None:
            out = a + nk.causal_conv1d(x, proj, 1)
        else:
            out = a
        pres.append(pre)
        xs.append(out)
        x = out
    w_y, b_y = params["head.W"], params["head.b"]
    top = xs[-1][:, :, n_ctx:]
    y = (top.transpose(0, 2, 1).reshape(B * T, spec.hidden) @ w_y + b_y).reshape(
        B, T, spec.output_dim
    )
    cache = {"xs": xs, "pres": pres, "n_ctx": n_ctx, "spec": spec, "params": params,
             "u_shape": u.shape, "y": y}
    return y, cache


def tcn_forward(
    u: Array,
    params: ParamStore,
    spec: ModelSpec,
    *,
    ctx: Array | None = None,
    return_cache: bool = False,
):
    """Stateless NAR TCN: dilation 2**l at layer l, ReLU, optional residual."""
    if spec.mode != "nar" or spec.arch != "tcn":
        raise UsageError(f"tcn_forward requires a tcn/nar spec, got {spec.arch}/{spec.mode}")
    _check_seq_input(u, spec)
    y, cache = _tcn_forward_ctx(u, ctx, params, spec)
    if return_cache:
        return y, cache
    return y


def tcn_nar_backward(cache, g_y: Array, *, need_input_grad: bool = False):
    """Gradients of a cached tcn_forward run; context-region input grads are
    discarded (the context is carried data, not part of the chunk's graph)."""
    spec = cache["spec"]
    params = cache["params"]
    xs, pres, n_ctx = cache["xs"], cache["pres"], cache["n_ctx"]
    B, T, _ = cache["u_shape"]
    H = spec.hidden
    w_y = params["head.W"]
    g_flat = g_y.reshape(B * T, -1)
    top_flat = xs[-1][:, :, n_ctx:].transpose(0, 2, 1).reshape(B * T, H)
    grads: dict[str, Array] = {
        "head.W": top_flat.T @ g_flat,
        "head.b": g_flat.sum(axis=0),
    }
    g_x = np.zeros_like(xs[-1])
    g_x[:, :, n_ctx:] = (g_flat @ w_y.T).reshape(B, T, H).transpose(0, 2, 1)
    for l in range(spec.depth - 1, -1, -1):
        k, _, proj, identity_skip = _tcn_layer_params(params, spec, l)
        g_out = g_x
        g_pre = nk.relu_backward(g_out, pres[l])
        dx, dk = nk.causal_conv1d_backward(g_pre, xs[l], k, 2 ** l)
        grads[f"tcn.{l}.kernel"] = dk
        grads[f"tcn.{l}.bias"] = g_pre.sum(axis=(0, 2))
        if identity_skip:
            dx += g_out
        elif proj is not None:
            dx_p, dp = nk.causal_conv1d_backward(g_out, xs[l], proj, 1)
            dx += dx_p
            grads[f"tcn.{l}.proj"] = dp
        g_x = dx
    gu = g_x[:, :, n_ctx:].transpose(0, 2, 1).copy() if need_input_grad else None
    return grads, gu


def _conv_step(k: Array, bias: Array, taps: list[Array]) -> Array:
    """One causal-conv output column from per-tap input vectors (B, C_in)."""
    pre = taps[0] @ k[:, :, 0].T
    for j in range(1, k.shape[2]):
        pre += taps[j] @ k[:, :, j].T
    pre += bias
    return pre


def conv_cache_step(cache: ConvCache, x_t: Array) -> Array:
    """Advance the cached conv stack one step; cost independent of history.

    x_t is the full network input vector (B, feed_dim); returns the head
    output (B, output_dim). Reads per-layer taps from exactly
    (kernel-1-j)*2**l steps ago, then pushes the current layer input.
    """
    spec, params = cache.spec, cache.params
    B = x_t.shape[0]
    if x_t.ndim != 2 or x_t.shape[1] != spec.feed_dim:
        raise DimensionError(f"step input shape {x_t.shape} != (B, {spec.feed_dim})")
    cache.check(B)
    K = spec.kernel
    v = x_t
    t = cache.steps
    for l in range(spec.depth):
        k, bias, proj, identity_skip = _tcn_layer_params(params, spec, l)
        d = 2 ** l
        length = (K - 1) * d
        buf = cache.buffers[l]
        taps = []
        for j in range(K - 1):
            taps.append(buf[(t - (K - 1 - j) * d) % length])
        taps.append(v)
        pre = _conv_step(k, bias, taps)
        a = nk.relu(pre)
        if identity_skip:
            out = a + v
        elif proj is not None:
            out = a + v @ proj[:, :, 0].T
        else:
            out = a
        if length > 0:
            buf[t % length] = v
        v = out
    cache.steps = t + 1
    return v @ params["head.W"] + params["head.b"]


def tcn_forward_ar(
    u: Array,
    state: HiddenState | None,
    params: ParamStore,
    spec: ModelSpec,
    *,
    teacher: Array | None = None,
    return_cache: bool = False,
):
    """Free-running AR TCN via the per-layer activation cache.

    Sequential generation with input concat(u_t, previous output); equals a
    naive full-history recompute. When return_cache is set, full per-layer
    input arrays are kept so the chunk can be backpropagated.
    """
    if spec.mode != "ar" or spec.arch != "tcn":
        raise UsageError(f"tcn_forward_ar requires a tcn/ar spec, got {spec.arch}/{spec.mode}")
    _check_seq_input(u, spec)
    B, T, _ = u.shape
    O = spec.output_dim
    if state is None:
        state = initial_state(spec, params, B)
    if state.last_output is None:
        raise StateError("AR forward needs state.last_output (zero for a fresh sequence)")
    if state.conv is None:
        raise StateError("AR TCN forward needs state.conv ring buffers")
    conv = state.conv
    conv.check(B)
    if not return_cache:
        work = conv.copy()
        Y = np.empty((B, T, O))
        fb = state.last_output
        for t in range(T):
            x_t = np.concatenate([u[:, t], fb], axis=1)
            y_t = conv_cache_step(work, x_t)
            Y[:, t] = y_t
            fb = teacher[:, t] if teacher is not None else y_t
        return Y, HiddenState(conv=work, last_output=fb.copy())

    # training path: dense time-major per-layer input arrays (context + chunk)
    K = spec.kernel
    depth = spec.depth
    lens = [(K - 1) * 2 ** l for l in range(depth)]
    u_tm = np.ascontiguousarray(u.transpose(1, 0, 2))
    a_pad: list[Array] = []
    for l in range(depth):
        c_in = spec.feed_dim if l == 0 else spec.hidden
        arr = np.zeros((lens[l] + T, B, c_in))
        buf = conv.buffers[l]
        for m in range(1, lens[l] + 1):
            src_t = conv.steps - m
            if src_t >= 0:
                arr[lens[l] - m] = buf[src_t % lens[l]]
        a_pad.append(arr)
    a_pad.append(np.zeros((T, B, spec.hidden)))  # top-layer outputs, no context
    pres = [np.empty((T, B, spec.hidden)) for _ in range(depth)]
    layer_p = [_tcn_layer_params(params, spec, l) for l in range(depth)]
    w_y, b_y = params["head.W"], params["head.b"]
    Y = np.empty((T, B, O))
    FB = np.empty((T, B, O))
    fb = state.last_output
    for t in range(T):
        FB[t] = fb
        v = np.concatenate([u_tm[t], fb], axis=1)
        a_pad[0][lens[0] + t] = v
        for l in range(depth):
            k, bias, proj, identity_skip = layer_p[l]
            d = 2 ** l
            taps = [a_pad[l][lens[l] + t - (K - 1 - j) * d] for j in range(K - 1)]
            taps.append(v)
            pre = _conv_step(k, bias, taps)
            pres[l][t] = pre
            a = nk.relu(pre)
            if identity_skip:
                out = a + v
            elif proj is not None:
                out = a + v @ proj[:, :, 0].T
            else:
                out = a
            a_pad[l + 1][(lens[l + 1] if l + 1 < depth else 0) + t] = out
            v = out
        y_t = v @ w_y + b_y
        Y[t] = y_t
        fb = teacher[:, t] if teacher is not None else y_t

    new_conv = ConvCache(spec=spec, params=params,
                         buffers=[b.copy() for b in conv.buffers],
                         steps=conv.steps + T)
    for l in range(depth):
        if lens[l] == 0:
            continue
        for m in range(1, lens[l] + 1):
            new_conv.buffers[l][(conv.steps + T - m) % lens[l]] = a_pad[l][lens[l] + T - m]
    y = np.ascontiguousarray(Y.transpose(1, 0, 2))
    new_state = HiddenState(conv=new_conv, last_output=fb.copy())
    cache = {"a_pad": a_pad, "pres": pres, "FB": FB, "y": y, "lens": lens,
             "spec": spec, "params": params, "shape": (B, T),
             "teacher_forced": teacher is not None}
    if return_cache:
        return y, new_state, cache
    return y, new_state


def tcn_ar_backward(cache, g_y: Array, *, need_input_grad: bool = False):
    """Reverse-time adjoint sweep through the cached AR-TCN chunk.

    Adjoints only ever flow from later to earlier time steps (conv taps and
    the output feedback both look backward), so one descending pass over t
    with a top-down layer loop visits every node after its dependents.
    """
    spec = cache["spec"]
    params = cache["params"]
    a_pad, pres, lens = cache["a_pad"], cache["pres"], cache["lens"]
    teacher_forced = cache["teacher_forced"]
    B, T = cache["shape"]
    I = spec.input_dim
    O = spec.output_dim
    K = spec.kernel
    depth = spec.depth
    layer_p = [_tcn_layer_params(params, spec, l) for l in range(depth)]
    w_y = params["head.W"]
    g_tm = np.ascontiguousarray(g_y.transpose(1, 0, 2))
    g_a = [np.zeros_like(a) for a in a_pad]
    g_pres = [np.empty((T, B, spec.hidden)) for _ in range(depth)]
    GY = np.empty((T, B, O))
    g_fb = np.zeros((B, O))
    gu = np.empty((T, B, I)) if need_input_grad else None
    for t in range(T - 1, -1, -1):
        g_out_t = g_tm[t] + g_fb
        GY[t] = g_out_t
        g_a[depth][t] += g_out_t @ w_y.T
        for l in range(depth - 1, -1, -1):
            k, _, proj, identity_skip = layer_p[l]
            d = 2 ** l
            row_out = t if l == depth - 1 else lens[l + 1] + t
            g_out = g_a[l + 1][row_out]
            g_pre = g_out * (pres[l][t] > 0)
            g_pres[l][t] = g_pre
            for j in range(K):
                g_a[l][lens[l] + t - (K - 1 - j) * d] += g_pre @ k[:, :, j]
            if identity_skip:
                g_a[l][lens[l] + t] += g_out
            elif proj is not None:
                g_a[l][lens[l] + t] += g_out @ proj[:, :, 0]
        gx0 = g_a[0][lens[0] + t]
        g_fb = np.zeros((B, O)) if teacher_forced else gx0[:, I:].copy()
        if need_input_grad:
            gu[t] = gx0[:, :I]
    grads: dict[str, Array] = {}
    for l in range(depth):
        k, _, proj, identity_skip = layer_p[l]
        d = 2 ** l
        dk = np.empty_like(k)
        for j in range(K):
            s = (K - 1 - j) * d
            dk[:, :, j] = np.tensordot(
                g_pres[l], a_pad[l][lens[l] - s : lens[l] - s + T],
                axes=([0, 1], [0, 1]),
            )
        grads[f"tcn.{l}.kernel"] = dk
        grads[f"tcn.{l}.bias"] = g_pres[l].sum(axis=(0, 1))
        if proj is not None:
            row_lo = 0 if l == depth - 1 else lens[l + 1]
            g_out_full = g_a[l + 1][row_lo : row_lo + T]
            dp = np.tensordot(g_out_full, a_pad[l][lens[l] :], axes=([0, 1], [0, 1]))
            grads[f"tcn.{l}.proj"] = dp[:, :, None]
    gy_flat = GY.reshape(T * B, O)
    top_flat = a_pad[depth].reshape(T * B, spec.hidden)
    grads["head.W"] = top_flat.T @ gy_flat
    grads["head.b"] = gy_flat.sum(axis=0)
    if gu is not None:
        gu = np.ascontiguousarray(gu.transpose(1, 0, 2))
    return grads, gu


# ---------------------------------------------------------------------------
# unified model handle
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """A spec plus its parameters, with variant-dispatched forward/backward."""

    spec: ModelSpec
    params: ParamStore

    @classmethod
    def create(cls, spec: ModelSpec, seed: int = 0) -> "Model":
        return cls(spec=spec, params=init_params(spec, seed))

    def initial_state(self, batch: int) -> HiddenState:
        return initial_state(self.spec, self.params, batch)

    def clone(self) -> "Model":
        return Model(spec=self.spec, params=self.params.copy())

    def forward(
        self,
        u: Array,
        state: HiddenState | None = None,
        *,
        training: bool = False,
        rng=None,
        teacher: Array | None = None,
        return_cache: bool = False,
    ):
        """Run one chunk; returns (y, new_state[, cache])."""
        spec, params = self.spec, self.params
        if spec.arch == "gru" and spec.mode == "nar":
            return gru_forward(u, state, params, spec, training=training, rng=rng,
                               return_cache=return_cache)
        if spec.arch == "gru":
            return gru_forward_ar(u, state, params, spec, teacher=teacher,
                                  training=training, rng=rng, return_cache=return_cache)
        if spec.mode == "nar":
            ctx = state.input_tail if state is not None else None
            out = tcn_forward(u, params, spec, ctx=ctx, return_cache=return_cache)
            span = history_span(spec)
            joined = u if ctx is None or ctx.shape[1] == 0 else np.concatenate([ctx, u], axis=1)
            tail = joined[:, max(joined.shape[1] - span, 0):].copy()
            new_state = HiddenState(input_tail=tail)
            if return_cache:
                return out[0], new_state, out[1]
            return out, new_state
        return tcn_forward_ar(u, state, params, spec, teacher=teacher,
                              return_cache=return_cache)

    def backward(self, cache, g_y: Array, *, need_input_grad: bool = False):
        """Gradients for a cached forward chunk; returns (grads, du)."""
        spec = self.spec
        if spec.arch == "gru" and spec.mode == "nar":
            return gru_nar_backward(cache, g_y, need_input_grad=need_input_grad)
        if spec.arch == "gru":
            return gru_ar_backward(cache, g_y, need_input_grad=need_input_grad)
        if spec.mode == "nar":
            return tcn_nar_backward(cache, g_y, need_input_grad=need_input_grad)
        return tcn_ar_backward(cache, g_y, need_input_grad=need_input_grad)
