"""Neural building blocks over :mod:`mceiu.tensor`.

All blocks accept either an unbatched input (``[L, d]``) or a batched one
(``[B, L, d]``).  Variable-length batches pass ``lengths``; padded steps are
excluded from recurrences and from max-pooling.

Parameters are plain ``dict[str, Tensor]`` keyed by short names (``W_x``,
``b``...).  :func:`save_params` / :func:`load_params` implement the ``EIUP``
checkpoint container.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Mapping

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError, ShapeError
from .tensor import Tensor

KINDS = ("linear", "lstm", "gru", "textcnn", "mha", "transformer_layer")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_dim: int
    output_dim: int
    heads: int = 1
    kernel_widths: tuple = ()
    filters_per_width: int = 0
    ff_dim: int = 0  # transformer_layer only; 0 means 2 * output_dim

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ContractError(f"{self.kind}: dimensions must be positive, got {self}")
        if self.kind in ("mha", "transformer_layer"):
            if self.heads < 1 or self.output_dim % self.heads:
                raise ContractError(
                    f"{self.kind}: output_dim {self.output_dim} not divisible by heads {self.heads}"
                )
            if self.input_dim != self.output_dim:
                raise ContractError(f"{self.kind}: input_dim must equal output_dim")
        if self.kind == "textcnn":
            if not self.kernel_widths or any(w < 1 for w in self.kernel_widths):
                raise ContractError(f"textcnn: bad kernel widths {self.kernel_widths}")
            if self.filters_per_width < 1:
                raise ContractError("textcnn: filters_per_width must be positive")


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: LayerSpec, seed) -> dict[str, Tensor]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero; layer-norm gains one."""
    spec.validate()
    rng = np.random.default_rng(seed)
    d_in, d_out = spec.input_dim, spec.output_dim
    arrays: dict[str, np.ndarray] = {}
    if spec.kind == "linear":
        arrays["W"] = _uniform(rng, d_in, (d_in, d_out))
        arrays["b"] = np.zeros(d_out)
    elif spec.kind == "lstm":
        arrays["W_x"] = _uniform(rng, d_in, (d_in, 4 * d_out))
        arrays["W_h"] = _uniform(rng, d_out, (d_out, 4 * d_out))
        arrays["b"] = np.zeros(4 * d_out)
    elif spec.kind == "gru":
        arrays["W_x"] = _uniform(rng, d_in, (d_in, 3 * d_out))
        arrays["W_h"] = _uniform(rng, d_out, (d_out, 3 * d_out))
        arrays["b_x"] = np.zeros(3 * d_out)
        arrays["b_h"] = np.zeros(3 * d_out)
    elif spec.kind == "textcnn":
        f = spec.filters_per_width
        for w in spec.kernel_widths:
            arrays[f"conv{w}.W"] = _uniform(rng, w * d_in, (w, d_in, f))
            arrays[f"conv{w}.b"] = np.zeros(f)
        n = f * len(spec.kernel_widths)
        arrays["proj.W"] = _uniform(rng, n, (n, d_out))
        arrays["proj.b"] = np.zeros(d_out)
    elif spec.kind == "mha":
        _mha_arrays(rng, d_out, arrays, "")
    elif spec.kind == "transformer_layer":
        ff = spec.ff_dim or 2 * d_out
        _mha_arrays(rng, d_out, arrays, "attn.")
        arrays["ln1.gamma"] = np.ones(d_out)
        arrays["ln1.beta"] = np.zeros(d_out)
        arrays["ff1.W"] = _uniform(rng, d_out, (d_out, ff))
        arrays["ff1.b"] = np.zeros(ff)
        arrays["ff2.W"] = _uniform(rng, ff, (ff, d_out))
        arrays["ff2.b"] = np.zeros(d_out)
        arrays["ln2.gamma"] = np.ones(d_out)
        arrays["ln2.beta"] = np.zeros(d_out)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def _mha_arrays(rng, d, arrays, prefix):
    # no key bias: it shifts every score of a query row equally, so softmax ignores it
    for name in ("Q", "K", "V", "O"):
        arrays[f"{prefix}W_{name}"] = _uniform(rng, d, (d, d))
        if name != "K":
            arrays[f"{prefix}b_{name}"] = np.zeros(d)


def sub_params(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Strip ``prefix`` from every key that starts with it."""
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# --- blocks -------------------------------------------------------------------


def linear(params, x) -> Tensor:
    x = T._wrap(x)
    W = params["W"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} != weight input dim {W.shape[0]}")
    if x.ndim == 1:
        return T.reshape(T.reshape(x, (1, -1)) @ W, (W.shape[1],)) + params["b"]
    return x @ W + params["b"]


def _batched(seq, lengths):
    seq = T._wrap(seq)
    if seq.ndim == 2:
        seq = T.reshape(seq, (1,) + seq.shape)
        single = True
    elif seq.ndim == 3:
        single = False
    else:
        raise ShapeError(f"expected [L, d] or [B, L, d], got {seq.shape}")
    B, L = seq.shape[0], seq.shape[1]
    if lengths is None:
        lengths = np.full(B, L)
    lengths = np.asarray(lengths, dtype=int)
    if lengths.shape != (B,) or (lengths > L).any() or (lengths < 0).any():
        raise ShapeError(f"lengths {lengths} do not fit a batch of shape {seq.shape}")
    return seq, lengths, single


def _step_masks(lengths, L, dtype):
    """Per-step keep masks ``[B, 1]``, or ``None`` when no row is padded."""
    if (lengths == L).all():
        return None
    keep = (np.arange(L)[None, :] < lengths[:, None]).astype(dtype)
    return [keep[:, t : t + 1] for t in range(L)]


def _masked_time_max(H: Tensor, lengths, L) -> Tensor:
    if (lengths < L).any():
        neg = np.where(np.arange(L)[None, :] < lengths[:, None], 0.0, -np.inf)
        H = H + neg[:, :, None].astype(H.data.dtype)
    return T.reduce("max", H, axis=1)


def lstm_encode(params, seq, lengths=None) -> Tensor:
    """LSTM over time, then max-pooling of the hidden states over time."""
    seq, lengths, single = _batched(seq, lengths)
    B, L, _ = seq.shape
    if L == 0 or (lengths < 1).any():
        raise ContractError("lstm_encode: empty sequence")
    W_h = params["W_h"]
    d = W_h.shape[0]
    xw = seq @ params["W_x"] + params["b"]
    masks = _step_masks(lengths, L, seq.data.dtype)
    h = T._wrap(np.zeros((B, d)))
    c = T._wrap(np.zeros((B, d)))
    hs = []
    for t in range(L):
        gates = xw[:, t, :] + h @ W_h
        s = T.sigmoid(gates)
        i, f, o = s[:, :d], s[:, d : 2 * d], s[:, 3 * d :]
        g = T.tanh(gates[:, 2 * d : 3 * d])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        if masks is not None:
            m = masks[t]
            c_new = c_new * m + c * (1.0 - m)
            h_new = h_new * m + h * (1.0 - m)
        c, h = c_new, h_new
        hs.append(h)
    out = _masked_time_max(T.stack(hs, axis=1), lengths, L)
    return out[0] if single else out


def gru_encode(params, seq, lengths=None) -> Tensor:
    """GRU over time; returns the hidden state after each row's last valid step.

    Rows with length 0 keep the zero initial state (batched use only).
    """
    seq, lengths, single = _batched(seq, lengths)
    B, L, _ = seq.shape
    if L == 0 or (single and lengths[0] < 1):
        raise ContractError("gru_encode: empty sequence")
    W_h = params["W_h"]
    d = W_h.shape[0]
    xw = seq @ params["W_x"] + params["b_x"]
    masks = _step_masks(lengths, L, seq.data.dtype)
    h = T._wrap(np.zeros((B, d)))
    for t in range(L):
        x_t = xw[:, t, :]
        hw = h @ W_h + params["b_h"]
        rz = T.sigmoid(x_t[:, : 2 * d] + hw[:, : 2 * d])
        r, z = rz[:, :d], rz[:, d:]
        n = T.tanh(x_t[:, 2 * d :] + r * hw[:, 2 * d :])
        h_new = n + z * (h - n)
        if masks is not None:
            m = masks[t]
            h_new = h_new * m + h * (1.0 - m)
        h = h_new
    return h[0] if single else h


def textcnn_encode(params, tokens, lengths=None) -> Tensor:
    """Multi-width 1-D convolution, relu, max over time, concat, projection."""
    tokens, lengths, single = _batched(tokens, lengths)
    widths = sorted(int(k[4:-2]) for k in params if k.startswith("conv") and k.endswith(".W"))
    wmax = max(widths)
    B, L, d = tokens.shape
    if L < wmax:
        pad = np.zeros((B, wmax - L, d), dtype=tokens.data.dtype)
        tokens = T.concat([tokens, pad], axis=1)
        L = wmax
    effective = np.maximum(lengths, wmax)
    pooled = []
    for w in widths:
        W = params[f"conv{w}.W"]
        n_pos = L - w + 1
        acc = None
        for k in range(w):
            term = tokens[:, k : k + n_pos, :] @ W[k]
            acc = term if acc is None else acc + term
        act = T.relu(acc + params[f"conv{w}.b"])
        pooled.append(_masked_time_max(act, effective - w + 1, n_pos))
    feats = T.concat(pooled, axis=-1)
    out = feats @ params["proj.W"] + params["proj.b"]
    return out[0] if single else out


def multi_head_attention(params, q_in, k_in, v_in, heads: int, return_weights: bool = False):
    """Scaled dot-product attention with ``heads`` heads.

    Returns the output ``[.., Lq, d]`` and, if asked, the attention weights
    ``[.., heads, Lq, Lk]``.
    """
    q_in, k_in, v_in = T._wrap(q_in), T._wrap(k_in), T._wrap(v_in)
    d = q_in.shape[-1]
    if heads < 1 or d % heads:
        raise ContractError(f"attention: model dim {d} not divisible by {heads} heads")
    if q_in.shape[-2] < 1 or k_in.shape[-2] < 1:
        raise ContractError("attention: empty query or key sequence")
    single = q_in.ndim == 2
    if single:
        q_in, k_in, v_in = (T.reshape(x, (1,) + x.shape) for x in (q_in, k_in, v_in))
    dk = d // heads

    def split(x, name):
        y = x @ params[f"W_{name}"]
        if name != "K":
            y = y + params[f"b_{name}"]
        B, L = y.shape[0], y.shape[1]
        return T.transpose(T.reshape(y, (B, L, heads, dk)), (0, 2, 1, 3))

    q, k, v = split(q_in, "Q"), split(k_in, "K"), split(v_in, "V")
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    ctx = weights @ v
    B, Lq = ctx.shape[0], ctx.shape[2]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Lq, d))
    out = ctx @ params["W_O"] + params["b_O"]
    if single:
        out, weights = out[0], weights[0]
    return (out, weights) if return_weights else out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = T.reduce("mean", x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.reduce("mean", T.square(xc), axis=-1, keepdims=True)
    return xc * T.power(var + eps, -0.5) * gamma + beta


def transformer_layer(params, seq, heads: int, return_weights: bool = False):
    """Post-norm encoder layer: self-attention and a relu feed-forward, each with residual + LN."""
    seq = T._wrap(seq)
    attn, weights = multi_head_attention(sub_params(params, "attn."), seq, seq, seq, heads, True)
    x = layer_norm(seq + attn, params["ln1.gamma"], params["ln1.beta"])
    ff = T.relu(x @ params["ff1.W"] + params["ff1.b"]) @ params["ff2.W"] + params["ff2.b"]
    out = layer_norm(x + ff, params["ln2.gamma"], params["ln2.beta"])
    return (out, weights) if return_weights else out


# --- EIUP checkpoints ---------------------------------------------------------

EIUP_MAGIC = b"EIUP"
EIUP_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_params(fh: BinaryIO, params: Mapping) -> None:
    fh.write(EIUP_MAGIC)
    fh.write(struct.pack("<B", EIUP_VERSION))
    for path, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype == np.float32:
            code = 0
        elif arr.dtype == np.float64:
            code = 1
        else:
            raise ContractError(f"{path}: unsupported dtype {arr.dtype}")
        name = path.encode("utf-8")
        if len(name) > 0xFFFF:
            raise ContractError(f"parameter path too long: {path[:40]}...")
        fh.write(struct.pack("<H", len(name)))
        fh.write(name)
        fh.write(struct.pack("<BI", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def read_params(fh: BinaryIO) -> dict[str, np.ndarray]:
    def take(n):
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError("EIUP: truncated file")
        return buf

    if fh.read(4) != EIUP_MAGIC:
        raise FormatError("EIUP: bad magic")
    (version,) = struct.unpack("<B", take(1))
    if version != EIUP_VERSION:
        raise FormatError(f"EIUP: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(2)
        if not head:
            return out
        if len(head) != 2:
            raise FormatError("EIUP: truncated record header")
        (n,) = struct.unpack("<H", head)
        path = take(n).decode("utf-8")
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _DTYPE_CODES:
            raise FormatError(f"EIUP: {path}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(count * dt.itemsize), dtype=dt).reshape(dims)
        if path in out:
            raise FormatError(f"EIUP: duplicate path {path}")
        out[path] = arr.astype(dt.newbyteorder("="))


def save_params(path, params: Mapping) -> None:
    with open(path, "wb") as fh:
        write_params(fh, params)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_params(fh)


def params_to_bytes(params: Mapping) -> bytes:
    buf = io.BytesIO()
    write_params(buf, params)
    return buf.getvalue()
