"""Trainable attention feature network with hand-written backward pass.

Layers alternate self-attention (each cloud attends itself) and
cross-attention (each cloud attends the other), sharing one weight set
per layer between the two clouds. A single head per layer computes

    q_i = enc(p_i) * (W_q f_i)        elementwise positional modulation
    k_j = enc(p_j) * (W_k f_j)
    v_j = W_v f_j
    a_ij = softmax_j(q_i . k_j / sqrt(d))
    f_i <- f_i + MLP(concat[q_i, sum_j a_ij v_j])

The MLP is 3 fully connected layers on the 2d-wide concatenation
(widths 2d -> 2d -> d -> d) with tanh between them; tanh keeps the whole
map smooth so exact gradients can be checked against finite differences
without landing on activation kinks. A zero final MLP layer makes every
block the identity on features.

Gradients of every parameter are accumulated by reverse-mode
differentiation in attention_backward, which consumes the caches the
forward pass records. Nothing here depends on an autodiff framework.
"""

import json
import math
import struct

import numpy as np

from ..errors import MissingForwardCache, ParamsFormatError, ShapeMismatch, UsageError

PARAMS_MAGIC = b"DRTENSOR"
PARAMS_FORMAT_VERSION = 1

LAYER_TENSORS = ("w_q", "w_k", "w_v", "w1", "b1", "w2", "b2", "w3", "b3")


def _layer_shapes(d):
    return {
        "w_q": (d, d),
        "w_k": (d, d),
        "w_v": (d, d),
        "w1": (2 * d, 2 * d),
        "b1": (2 * d,),
        "w2": (d, 2 * d),
        "b2": (d,),
        "w3": (d, d),
        "b3": (d,),
    }


class AttentionParams:
    """Weight collection for the interleaved attention stack.

    Tensors are keyed "layer{l}.{name}"; even layer indices are
    self-attention, odd are cross-attention. Instances behave as values:
    arrays are frozen, updates build a new instance.
    """

    def __init__(self, d, n_layers, tensors):
        if d < 1 or n_layers < 1:
            raise UsageError("d and n_layers must be positive")
        shapes = _layer_shapes(d)
        expected = [f"layer{l}.{t}" for l in range(n_layers) for t in LAYER_TENSORS]
        if sorted(tensors) != sorted(expected):
            raise UsageError("tensor names do not match layer layout")
        store = {}
        for name in expected:
            arr = np.array(tensors[name], dtype=np.float64, order="C")
            want = shapes[name.split(".", 1)[1]]
            if arr.shape != want:
                raise ShapeMismatch(f"{name}: expected shape {want}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise UsageError(f"{name}: non-finite parameter values")
            arr.flags.writeable = False
            store[name] = arr
        self.d = d
        self.n_layers = n_layers
        self.tensors = store
        self._order = expected

    @classmethod
    def random(cls, d, n_layers=2, rng=None, scale=1.0):
        """Gaussian init, std scale/sqrt(fan_in), zero biases."""
        rng = np.random.default_rng() if rng is None else rng
        shapes = _layer_shapes(d)
        tensors = {}
        for l in range(n_layers):
            for t in LAYER_TENSORS:
                shape = shapes[t]
                if len(shape) == 1:
                    tensors[f"layer{l}.{t}"] = np.zeros(shape)
                else:
                    std = scale / math.sqrt(shape[1])
                    tensors[f"layer{l}.{t}"] = rng.standard_normal(shape) * std
        return cls(d, n_layers, tensors)

    @classmethod
    def residual_identity(cls, d, n_layers=2, rng=None, scale=1.0):
        """Random attention weights but a zero final MLP layer, so the
        whole stack is the identity on features."""
        params = cls.random(d, n_layers, rng, scale)
        tensors = dict(params.tensors)
        for l in range(n_layers):
            tensors[f"layer{l}.w3"] = np.zeros((d, d))
            tensors[f"layer{l}.b3"] = np.zeros(d)
        return cls(d, n_layers, tensors)

    def layer(self, l):
        prefix = f"layer{l}."
        return {t: self.tensors[prefix + t] for t in LAYER_TENSORS}

    @property
    def tensor_order(self):
        return list(self._order)

    @property
    def n_parameters(self):
        return sum(self.tensors[n].size for n in self._order)

    def zero_gradients(self):
        return {n: np.zeros_like(self.tensors[n]) for n in self._order}

    def pack(self):
        return np.concatenate([self.tensors[n].ravel() for n in self._order])

    def unpack(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.n_parameters,):
            raise ShapeMismatch("vector length does not match parameter count")
        tensors = {}
        pos = 0
        for name in self._order:
            size = self.tensors[name].size
            tensors[name] = vector[pos : pos + size].reshape(self.tensors[name].shape)
            pos += size
        return AttentionParams(self.d, self.n_layers, tensors)

    def apply_update(self, deltas):
        tensors = {n: self.tensors[n] + deltas[n] for n in self._order}
        return AttentionParams(self.d, self.n_layers, tensors)


def pack_gradients(params, grads):
    return np.concatenate([grads[n].ravel() for n in params.tensor_order])


def _attend_forward(layer, f_q, f_kv, enc_q, enc_kv):
    d = f_q.shape[1]
    qr = f_q @ layer["w_q"].T
    q = enc_q * qr
    kr = f_kv @ layer["w_k"].T
    k = enc_kv * kr
    v = f_kv @ layer["w_v"].T
    scores = (q @ k.T) / math.sqrt(d)
    # shift is exactly invariant under softmax; backward ignores it
    shifted = scores - scores.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    att = ex / ex.sum(axis=1, keepdims=True)
    o = att @ v
    cat = np.concatenate([q, o], axis=1)
    h1 = np.tanh(cat @ layer["w1"].T + layer["b1"])
    h2 = np.tanh(h1 @ layer["w2"].T + layer["b2"])
    z3 = h2 @ layer["w3"].T + layer["b3"]
    out = f_q + z3
    cache = {
        "f_q": f_q, "f_kv": f_kv, "enc_q": enc_q, "enc_kv": enc_kv,
        "q": q, "k": k, "v": v, "att": att, "cat": cat, "h1": h1, "h2": h2,
    }
    return out, cache


def _attend_backward(layer, cache, g_out):
    d = cache["f_q"].shape[1]
    h1, h2, cat, att = cache["h1"], cache["h2"], cache["cat"], cache["att"]
    g_fq = g_out.copy()
    gw3 = g_out.T @ h2
    gb3 = g_out.sum(axis=0)
    dh2 = g_out @ layer["w3"]
    dz2 = dh2 * (1.0 - h2 * h2)
    gw2 = dz2.T @ h1
    gb2 = dz2.sum(axis=0)
    dh1 = dz2 @ layer["w2"]
    dz1 = dh1 * (1.0 - h1 * h1)
    gw1 = dz1.T @ cat
    gb1 = dz1.sum(axis=0)
    dcat = dz1 @ layer["w1"]
    dq = dcat[:, :d].copy()
    do = dcat[:, d:]
    datt = do @ cache["v"].T
    dv = att.T @ do
    dscores = att * (datt - (datt * att).sum(axis=1, keepdims=True))
    dscores /= math.sqrt(d)
    dq += dscores @ cache["k"]
    dk = dscores.T @ cache["q"]
    dqr = dq * cache["enc_q"]
    gwq = dqr.T @ cache["f_q"]
    g_fq += dqr @ layer["w_q"]
    dkr = dk * cache["enc_kv"]
    gwk = dkr.T @ cache["f_kv"]
    g_fkv = dkr @ layer["w_k"]
    gwv = dv.T @ cache["f_kv"]
    g_fkv += dv @ layer["w_v"]
    grads = {
        "w_q": gwq, "w_k": gwk, "w_v": gwv,
        "w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3,
    }
    return g_fq, g_fkv, grads


def _validate_features(params, desc, enc, label):
    if desc.ndim != 2 or desc.shape[1] != params.d:
        raise ShapeMismatch(f"{label} descriptors must be (N, {params.d})")
    if enc.shape != desc.shape:
        raise ShapeMismatch(f"{label} encoding must match descriptor shape")


def attention_forward(params, src_desc, tgt_desc, src_enc, tgt_enc, want_cache=False):
    """Run the stack; returns (src_features, tgt_features, caches)."""
    src_desc = np.asarray(src_desc, dtype=np.float64)
    tgt_desc = np.asarray(tgt_desc, dtype=np.float64)
    src_enc = np.asarray(src_enc, dtype=np.float64)
    tgt_enc = np.asarray(tgt_enc, dtype=np.float64)
    _validate_features(params, src_desc, src_enc, "source")
    _validate_features(params, tgt_desc, tgt_enc, "target")
    fs, ft = src_desc, tgt_desc
    caches = [] if want_cache else None
    for l in range(params.n_layers):
        layer = params.layer(l)
        if l % 2 == 0:
            fs_new, c_s = _attend_forward(layer, fs, fs, src_enc, src_enc)
            ft_new, c_t = _attend_forward(layer, ft, ft, tgt_enc, tgt_enc)
        else:
            fs_new, c_s = _attend_forward(layer, fs, ft, src_enc, tgt_enc)
            ft_new, c_t = _attend_forward(layer, ft, fs, tgt_enc, src_enc)
        if want_cache:
            caches.append((c_s, c_t))
        fs, ft = fs_new, ft_new
    return fs, ft, caches


def attention_backward(params, caches, g_src_features, g_tgt_features):
    """Exact parameter gradients by reverse accumulation.

    caches comes from attention_forward(want_cache=True) on the same
    params and inputs; the upstream gradients are with respect to the
    two feature outputs. Also returns gradients w.r.t. the input
    descriptors (useful for diagnostics; inputs are fixed in training).
    """
    if caches is None or len(caches) != params.n_layers:
        raise MissingForwardCache("caches do not match the parameter stack")
    grads = params.zero_gradients()
    g_fs = np.asarray(g_src_features, dtype=np.float64).copy()
    g_ft = np.asarray(g_tgt_features, dtype=np.float64).copy()
    for l in reversed(range(params.n_layers)):
        c_s, c_t = caches[l]
        layer = params.layer(l)
        a_q, a_kv, g_a = _attend_backward(layer, c_s, g_fs)
        b_q, b_kv, g_b = _attend_backward(layer, c_t, g_ft)
        if l % 2 == 0:
            g_fs = a_q + a_kv
            g_ft = b_q + b_kv
        else:
            g_fs = a_q + b_kv
            g_ft = b_q + a_kv
        for t in LAYER_TENSORS:
            grads[f"layer{l}.{t}"] += g_a[t] + g_b[t]
    return grads, g_fs, g_ft


class AttentionFeatureNet:
    """Feature-network adapter over a parameter set.

    Scores go through the matcher in log domain: adding a constant to
    every logit then cancels exactly in the row-shifted exponentiation,
    and negative logits keep gradient signal instead of being clamped.
    """

    logit_domain = "log"

    def __init__(self, params):
        self.params = params
        self.encoding_dim = params.d

    def features(self, src_points, tgt_points, src_desc, tgt_desc,
                 src_encoding, tgt_encoding):
        fs, ft, _ = attention_forward(
            self.params, src_desc, tgt_desc, src_encoding, tgt_encoding
        )
        return fs, ft

    def logits(self, src_points, tgt_points, src_desc, tgt_desc,
               src_encoding, tgt_encoding):
        fs, ft = self.features(
            src_points, tgt_points, src_desc, tgt_desc, src_encoding, tgt_encoding
        )
        return (fs @ ft.T) / math.sqrt(self.params.d)


# ---------------------------------------------------------------------------
# parameter archive: magic, u32 manifest length, manifest JSON, raw f64 data

def save_params(path, params):
    manifest = {
        "format_version": PARAMS_FORMAT_VERSION,
        "kind": "attention_params",
        "d": params.d,
        "n_layers": params.n_layers,
        "tensors": [
            {"name": n, "shape": list(params.tensors[n].shape)}
            for n in params.tensor_order
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in params.tensor_order:
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(PARAMS_MAGIC) + 4 or not raw.startswith(PARAMS_MAGIC):
        raise ParamsFormatError(f"{path}: not a parameter archive")
    off = len(PARAMS_MAGIC)
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        manifest = json.loads(raw[off : off + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParamsFormatError(f"{path}: bad manifest ({exc})") from exc
    off += mlen
    if manifest.get("format_version") != PARAMS_FORMAT_VERSION:
        raise ParamsFormatError(
            f"{path}: unsupported format version {manifest.get('format_version')!r}"
        )
    if manifest.get("kind") != "attention_params":
        raise ParamsFormatError(f"{path}: unexpected archive kind")
    tensors = {}
    for spec in manifest["tensors"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) * 8
        if off + size > len(raw):
            raise ParamsFormatError(f"{path}: archive truncated at {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(
            raw, dtype="<f8", count=int(np.prod(shape)), offset=off
        ).reshape(shape)
        off += size
    if off != len(raw):
        raise ParamsFormatError(f"{path}: trailing bytes after tensor data")
    try:
        return AttentionParams(int(manifest["d"]), int(manifest["n_layers"]), tensors)
    except (KeyError, UsageError, ShapeMismatch) as exc:
        raise ParamsFormatError(f"{path}: inconsistent archive ({exc})") from exc
