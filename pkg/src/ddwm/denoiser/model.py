"""A small spatio-temporal token denoiser with hand-written reverse-mode gradients.

Architecture (pre-norm residual blocks; float64 unless configured otherwise):

* input: tied token embedding (mask is its own learnable row) + spatial and
  temporal positional encodings + the projected 16-d pose added to every
  location of its frame;
* ``spatial`` block: LayerNorm -> single-head attention over the 3x3
  neighbourhood within each frame (keys carry a learned offset embedding),
  then LayerNorm -> GELU MLP, each added back to the residual stream;
* ``temporal`` block: LayerNorm -> single-head attention across frames at the
  same location, restricted by a :class:`TemporalMask`;
* head: LayerNorm -> logits against the first ``m`` embedding rows (weight
  tying; the mask row is never predicted).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import archive
from ..corruption import TemporalMask, build_temporal_mask
from ..errors import PreconditionError
from ..sampler import Context

LN_EPS = 1e-5
LABEL_SMOOTHING = 0.1
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    m: int = 8
    rows: int = 8
    cols: int = 8
    d: int = 32
    hidden: int = 64
    max_frames: int = 8
    layers: tuple = ("spatial", "temporal", "spatial", "temporal", "spatial")
    zero_init_head: bool = False
    # "float32" roughly halves training time; gradient checks need float64
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        bad = set(self.layers) - {"spatial", "conv", "temporal"}
        if bad:
            raise PreconditionError(f"unknown layer kinds {sorted(bad)}")

    @property
    def n_tokens(self) -> int:
        return self.rows * self.cols

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        return d


@dataclass
class DenoiserInput:
    """``frames``: (B, T, N) token ids; ``actions``: (B, T, 16); ``positions``: (T,) temporal ids."""

    frames: np.ndarray
    actions: np.ndarray
    temporal_mask: TemporalMask
    positions: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        if self.frames.ndim == 2:
            self.frames = self.frames[None]
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim == 2:
            self.actions = self.actions[None]
        T = self.frames.shape[1]
        if self.positions is None:
            self.positions = np.arange(T)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.actions.shape[:2] != self.frames.shape[:2] or self.actions.shape[2] != 16:
            raise PreconditionError(
                f"actions {self.actions.shape} must be (B, T, 16) matching frames {self.frames.shape}")
        if self.temporal_mask.size != T or self.positions.shape != (T,):
            raise PreconditionError(
                f"temporal mask of size {self.temporal_mask.size} / positions {self.positions.shape} "
                f"inconsistent with {T} frames")


# -- primitive layers -----------------------------------------------------


def _ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=axes)
    db = np.sum(dy, axis=axes)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(z):
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z * z))
    return 0.5 * z * (1.0 + t), t


def _gelu_grad(z, t):
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


_OFFSETS = tuple((di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1))


def _pad(x):
    """Zero-pad axes (-3, -2) of (..., R, C, d) by one cell."""
    out = np.zeros(x.shape[:-3] + (x.shape[-3] + 2, x.shape[-2] + 2, x.shape[-1]), dtype=x.dtype)
    out[..., 1:-1, 1:-1, :] = x
    return out


def _window_valid(R: int, C: int) -> np.ndarray:
    """(R, C, 9) mask of which 3x3 neighbours lie inside the grid."""
    r = np.arange(R)[:, None, None]
    c = np.arange(C)[None, :, None]
    di = np.array([o[0] for o in _OFFSETS])
    dj = np.array([o[1] for o in _OFFSETS])
    return (r + di >= 0) & (r + di < R) & (c + dj >= 0) & (c + dj < C)


def _local_attn_forward(u, wq, wk, wv, rel):
    """Single-head attention of every cell over its 3x3 neighbourhood, (..., R, C, d).

    Keys carry a learned embedding of the neighbour's offset, so the head can
    select "the cell at offset v" from content in the query.
    """
    R, C, d = u.shape[-3:]
    q = u @ wq
    pk, pv = _pad(u @ wk), _pad(u @ wv)
    keys = np.stack([pk[..., 1 + di : 1 + di + R, 1 + dj : 1 + dj + C, :] for di, dj in _OFFSETS], -2)
    keys = keys + rel
    vals = np.stack([pv[..., 1 + di : 1 + di + R, 1 + dj : 1 + dj + C, :] for di, dj in _OFFSETS], -2)
    scores = np.einsum("...d,...jd->...j", q, keys) / math.sqrt(d)
    scores = np.where(_window_valid(R, C), scores, -np.inf)
    scores = scores - scores.max(-1, keepdims=True)
    e = np.exp(scores)
    att = e / e.sum(-1, keepdims=True)
    o = np.einsum("...j,...jd->...d", att, vals)
    return o, (q, keys, vals, att)


def _local_attn_backward(do, cache, u, wq, wk, wv):
    q, keys, vals, att = cache
    R, C, d = u.shape[-3:]
    datt = np.einsum("...d,...jd->...j", do, vals)
    dvals = att[..., None] * do[..., None, :]
    ds = att * (datt - np.sum(att * datt, -1, keepdims=True)) / math.sqrt(d)
    dq = np.einsum("...j,...jd->...d", ds, keys)
    dkeys = ds[..., None] * q[..., None, :]
    drel = dkeys.reshape(-1, 9, d).sum(0)
    pk = np.zeros(u.shape[:-3] + (R + 2, C + 2, d), dtype=u.dtype)
    pv = np.zeros_like(pk)
    for j, (di, dj) in enumerate(_OFFSETS):
        pk[..., 1 + di : 1 + di + R, 1 + dj : 1 + dj + C, :] += dkeys[..., j, :]
        pv[..., 1 + di : 1 + di + R, 1 + dj : 1 + dj + C, :] += dvals[..., j, :]
    dk = pk[..., 1:-1, 1:-1, :]
    dv = pv[..., 1:-1, 1:-1, :]
    grads = {"wq": _outer(u, dq), "wk": _outer(u, dk), "wv": _outer(u, dv), "rel": drel}
    du = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return du, grads


def _dwconv_forward(u, w):
    """Zero-padded depthwise 3x3 convolution over axes (-3, -2) of (..., R, C, d)."""
    R, C = u.shape[-3], u.shape[-2]
    pad = _pad(u)
    out = np.zeros_like(u)
    for i in range(3):
        for j in range(3):
            out += w[i, j] * pad[..., i : i + R, j : j + C, :]
    return out, pad


def _dwconv_backward(dout, pad, w):
    R, C = dout.shape[-3], dout.shape[-2]
    axes = tuple(range(dout.ndim - 1))
    dw = np.empty_like(w)
    dpad = np.zeros_like(pad)
    for i in range(3):
        for j in range(3):
            dw[i, j] = np.sum(dout * pad[..., i : i + R, j : j + C, :], axis=axes)
            dpad[..., i : i + R, j : j + C, :] += w[i, j] * dout
    return dpad[..., 1:-1, 1:-1, :], dw


def _outer(a, b):
    """Sum over all leading axes of ``a[..., i] * b[..., j]``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def smoothed_targets(labels: np.ndarray, m: int, eps: float = LABEL_SMOOTHING) -> np.ndarray:
    """``1 - eps`` on the label and ``eps / (m - 1)`` spread over the other codes."""
    if m == 1:
        return np.ones(labels.shape + (1,))
    t = np.full(labels.shape + (m,), eps / (m - 1))
    np.put_along_axis(t, labels[..., None], 1.0 - eps, axis=-1)
    return t


def smoothing_floor(m: int, eps: float = LABEL_SMOOTHING) -> float:
    """Entropy of the smoothed target, the minimum achievable cross-entropy."""
    if m == 1:
        return 0.0
    return -((1 - eps) * math.log(1 - eps) + eps * math.log(eps / (m - 1)))


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


# -- the model ------------------------------------------------------------


@dataclass
class ToyDenoiser:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ToyDenoiser":
        c = config
        n_res = max(1, len(c.layers) + c.layers.count("spatial"))

        def normal(shape, fan_in, scale=1.0):
            return rng.normal(0.0, math.sqrt(1.0 / (3.0 * fan_in)), size=shape) * scale

        p = {
            "emb": normal((c.m + 1, c.d), c.d),
            "act_w": normal((16, c.d), 16),
            "pos_s": normal((c.n_tokens, c.d), c.d),
            "pos_t": normal((c.max_frames, c.d), c.d),
        }
        res_scale = math.sqrt(1.0 / n_res)
        for i, kind in enumerate(c.layers):
            pre = f"L{i}."
            p[pre + "ln_g"] = np.ones(c.d)
            p[pre + "ln_b"] = np.zeros(c.d)
            if kind == "spatial":
                for name in ("sq", "sk", "sv"):
                    p[pre + name] = normal((c.d, c.d), c.d)
                p[pre + "rel"] = normal((9, c.d), c.d)
                p[pre + "so"] = normal((c.d, c.d), c.d, res_scale)
                p[pre + "ln2_g"] = np.ones(c.d)
                p[pre + "ln2_b"] = np.zeros(c.d)
                p[pre + "w1"] = normal((c.d, c.hidden), c.d)
                p[pre + "b1"] = np.zeros(c.hidden)
                p[pre + "w2"] = normal((c.hidden, c.d), c.hidden, res_scale)
            elif kind == "conv":
                p[pre + "conv"] = normal((3, 3, c.d), 9)
                p[pre + "w1"] = normal((c.d, c.hidden), c.d)
                p[pre + "b1"] = np.zeros(c.hidden)
                p[pre + "w2"] = normal((c.hidden, c.d), c.hidden, res_scale)
            else:
                for name in ("wq", "wk", "wv"):
                    p[pre + name] = normal((c.d, c.d), c.d)
                p[pre + "wo"] = normal((c.d, c.d), c.d, res_scale)
        p["head_g"] = np.zeros(c.d) if c.zero_init_head else np.ones(c.d)
        p["head_b"] = np.zeros(c.d)
        p["out_b"] = np.zeros(c.m)
        return cls(config, {k: v.astype(c.dtype) for k, v in p.items()})

    # -- properties --------------------------------------------------------

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def max_frames(self) -> int:
        return self.config.max_frames

    @property
    def output_weight(self) -> np.ndarray:
        """The un-embedding matrix; a view into ``params['emb']`` (weight tying)."""
        return self.params["emb"][: self.config.m]

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward -------------------------------------------------------------

    def _check_input(self, inp: DenoiserInput):
        c = self.config
        if inp.frames.shape[2] != c.n_tokens:
            raise PreconditionError(f"frames carry {inp.frames.shape[2]} tokens, model expects {c.n_tokens}")
        if np.any(inp.frames < 0) or np.any(inp.frames > c.m):
            raise PreconditionError(f"token ids must lie in [0, {c.m}]")
        if np.any(inp.positions >= c.max_frames) or np.any(inp.positions < 0):
            raise PreconditionError(f"temporal positions must lie in [0, {c.max_frames})")

    def forward(self, inp: DenoiserInput, *, keep_cache: bool = False):
        """Logits of shape ``(B, T, N, m)``; with ``keep_cache`` also the backward cache."""
        self._check_input(inp)
        c, p = self.config, self.params
        B, T, N = inp.frames.shape
        h = (p["emb"][inp.frames]
             + p["pos_s"][None, None]
             + p["pos_t"][inp.positions][None, :, None]
             + (inp.actions.astype(c.dtype) @ p["act_w"])[:, :, None])
        caches = []
        allowed = inp.temporal_mask.matrix
        for i, kind in enumerate(c.layers):
            pre = f"L{i}."
            u, ln_cache = _ln_forward(h, p[pre + "ln_g"], p[pre + "ln_b"])
            if kind == "spatial":
                grid = u.reshape(B, T, c.rows, c.cols, c.d)
                o, att_cache = _local_attn_forward(grid, p[pre + "sq"], p[pre + "sk"], p[pre + "sv"], p[pre + "rel"])
                o = o.reshape(B, T, N, c.d)
                h = h + o @ p[pre + "so"]
                u2, ln2_cache = _ln_forward(h, p[pre + "ln2_g"], p[pre + "ln2_b"])
                z = u2 @ p[pre + "w1"] + p[pre + "b1"]
                a, tz = _gelu(z)
                h = h + a @ p[pre + "w2"]
                caches.append((ln_cache, grid, att_cache, o, ln2_cache, u2, z, tz, a))
            elif kind == "conv":
                grid = u.reshape(B, T, c.rows, c.cols, c.d)
                conv, pad = _dwconv_forward(grid, p[pre + "conv"])
                conv = conv.reshape(B, T, N, c.d)
                z = conv @ p[pre + "w1"] + p[pre + "b1"]
                a, tz = _gelu(z)
                h = h + a @ p[pre + "w2"]
                caches.append((ln_cache, pad, conv, z, tz, a))
            else:
                ut = u.transpose(0, 2, 1, 3)  # (B, N, T, d)
                q = ut @ p[pre + "wq"]
                k = ut @ p[pre + "wk"]
                v = ut @ p[pre + "wv"]
                scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(c.d)
                scores = np.where(allowed, scores, -np.inf)
                scores = scores - scores.max(-1, keepdims=True)
                e = np.exp(scores)
                att = e / e.sum(-1, keepdims=True)
                o = att @ v
                h = h + (o @ p[pre + "wo"]).transpose(0, 2, 1, 3)
                caches.append((ln_cache, ut, q, k, v, att, o))
        u, head_cache = _ln_forward(h, p["head_g"], p["head_b"])
        logits = u @ self.output_weight.T + p["out_b"]
        if keep_cache:
            return logits, (inp, caches, head_cache, u)
        return logits

    # -- backward ------------------------------------------------------------

    def backward(self, dlogits: np.ndarray, cache) -> dict:
        c, p = self.config, self.params
        inp, caches, head_cache, u_head = cache
        B, T, N, _ = dlogits.shape
        grads = {name: np.zeros_like(v) for name, v in p.items()}
        grads["out_b"] += dlogits.sum((0, 1, 2))
        grads["emb"][: c.m] += _outer(dlogits, u_head)
        du = dlogits @ self.output_weight
        dh, dg, db = _ln_backward(du, head_cache)
        grads["head_g"] += dg
        grads["head_b"] += db
        for i in reversed(range(len(c.layers))):
            pre = f"L{i}."
            kind = c.layers[i]
            if kind == "spatial":
                ln_cache, grid, att_cache, o, ln2_cache, u2, z, tz, a = caches[i]
                grads[pre + "w2"] += _outer(a, dh)
                dz = (dh @ p[pre + "w2"].T) * _gelu_grad(z, tz)
                grads[pre + "b1"] += dz.sum((0, 1, 2))
                grads[pre + "w1"] += _outer(u2, dz)
                dx, dg, db = _ln_backward(dz @ p[pre + "w1"].T, ln2_cache)
                grads[pre + "ln2_g"] += dg
                grads[pre + "ln2_b"] += db
                dh = dh + dx
                grads[pre + "so"] += _outer(o, dh)
                do = (dh @ p[pre + "so"].T).reshape(B, T, c.rows, c.cols, c.d)
                dgrid, g = _local_attn_backward(do, att_cache, grid, p[pre + "sq"], p[pre + "sk"], p[pre + "sv"])
                for name, key in (("wq", "sq"), ("wk", "sk"), ("wv", "sv"), ("rel", "rel")):
                    grads[pre + key] += g[name]
                du = dgrid.reshape(B, T, N, c.d)
            elif kind == "conv":
                ln_cache, pad, conv, z, tz, a = caches[i]
                grads[pre + "w2"] += _outer(a, dh)
                dz = (dh @ p[pre + "w2"].T) * _gelu_grad(z, tz)
                grads[pre + "b1"] += dz.sum((0, 1, 2))
                grads[pre + "w1"] += _outer(conv, dz)
                dconv = (dz @ p[pre + "w1"].T).reshape(B, T, c.rows, c.cols, c.d)
                dgrid, dw = _dwconv_backward(dconv, pad, p[pre + "conv"])
                grads[pre + "conv"] += dw
                du = dgrid.reshape(B, T, N, c.d)
            else:
                ln_cache, ut, q, k, v, att, o = caches[i]
                dy = dh.transpose(0, 2, 1, 3)  # (B, N, T, d)
                grads[pre + "wo"] += _outer(o, dy)
                do = dy @ p[pre + "wo"].T
                datt = do @ v.transpose(0, 1, 3, 2)
                dv = att.transpose(0, 1, 3, 2) @ do
                ds = att * (datt - np.sum(datt * att, -1, keepdims=True))
                ds /= math.sqrt(c.d)
                dq = ds @ k
                dk = ds.transpose(0, 1, 3, 2) @ q
                grads[pre + "wq"] += _outer(ut, dq)
                grads[pre + "wk"] += _outer(ut, dk)
                grads[pre + "wv"] += _outer(ut, dv)
                dut = dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
                du = dut.transpose(0, 2, 1, 3)
            dx, dg, db = _ln_backward(du, ln_cache)
            grads[pre + "ln_g"] += dg
            grads[pre + "ln_b"] += db
            dh = dh + dx
        np.add.at(grads["emb"], inp.frames.reshape(-1), dh.reshape(-1, c.d))
        grads["pos_s"] += dh.sum((0, 1))
        np.add.at(grads["pos_t"], inp.positions, dh.sum((0, 2)))
        grads["act_w"] += _outer(inp.actions.astype(c.dtype), dh.sum(2))
        return grads

    def loss_and_gradients(self, inp: DenoiserInput, targets: np.ndarray, loss_mask: np.ndarray,
                           smoothing: float = LABEL_SMOOTHING, *, need_grad: bool = True):
        """Mean label-smoothed cross-entropy over ``loss_mask`` and its gradients."""
        loss_mask = np.asarray(loss_mask, dtype=bool)
        if loss_mask.ndim == 2:
            loss_mask = loss_mask[None]
        targets = np.asarray(targets, dtype=np.int64)
        if targets.ndim == 2:
            targets = targets[None]
        count = int(loss_mask.sum())
        if count == 0:
            raise PreconditionError("empty loss-position set")
        if np.any(targets[loss_mask] >= self.m):
            raise PreconditionError("labels must be uncorrupted real codes")
        logits, cache = self.forward(inp, keep_cache=True)
        logp = _log_softmax(logits)
        tgt = smoothed_targets(np.minimum(targets, self.m - 1), self.m, smoothing)
        weight = loss_mask[..., None] / count
        loss = float(-np.sum(weight * tgt * logp))
        if not need_grad:
            return loss, None
        dlogits = (weight * (np.exp(logp) - tgt)).astype(self.config.dtype)
        return loss, self.backward(dlogits, cache)

    # -- sampler interface ------------------------------------------------------

    def _flatten(self, x, context: Context):
        x = np.asarray(x, dtype=np.int64)
        batch = x.shape[:-1]
        frames = np.asarray(context.frames, dtype=np.int64).reshape((-1,) + context.frames.shape[-2:])
        actions = np.asarray(context.actions, dtype=np.float64).reshape((-1,) + context.actions.shape[-2:])
        return batch, x.reshape(-1, x.shape[-1]), frames, actions

    def __call__(self, x: np.ndarray, context: Context, *, conditional: bool = True) -> np.ndarray:
        batch, x, frames, actions = self._flatten(x, context)
        t = frames.shape[1]
        if conditional:
            seq = np.concatenate([frames, x[:, None]], axis=1)
            inp = DenoiserInput(seq, actions, build_temporal_mask(t + 1, "causal"))
            out = self.forward(inp)[:, -1]
        else:
            inp = DenoiserInput(x[:, None], actions[:, -1:], build_temporal_mask(1, "identity"), np.array([t]))
            out = self.forward(inp)[:, 0]
        return out.reshape(batch + out.shape[-2:])

    def guided(self, x: np.ndarray, context: Context):
        """Conditional and unconditional logits from one pass over ``t + 2`` frames.

        The frame being decoded is appended twice; the second copy sits at
        the same temporal position but attends only to itself.
        """
        batch, x, frames, actions = self._flatten(x, context)
        t = frames.shape[1]
        seq = np.concatenate([frames, x[:, None], x[:, None]], axis=1)
        acts = np.concatenate([actions, actions[:, -1:]], axis=1)
        positions = np.concatenate([np.arange(t + 1), [t]])
        inp = DenoiserInput(seq, acts, build_temporal_mask(t + 1, "cfg_extended"), positions)
        logits = self.forward(inp)
        cond, uncond = logits[:, t], logits[:, t + 1]
        return cond.reshape(batch + cond.shape[-2:]), uncond.reshape(batch + uncond.shape[-2:])

    # -- persistence -------------------------------------------------------------

    def save(self, stem, meta: dict | None = None):
        info = {"kind": "toy_denoiser", "model_config": self.config.to_dict()}
        info.update(meta or {})
        return archive.save(stem, self.params, info)

    @classmethod
    def load(cls, stem) -> tuple["ToyDenoiser", dict]:
        tensors, meta = archive.load(stem)
        cfg = dict(meta["model_config"])
        cfg["layers"] = tuple(cfg["layers"])
        return cls(ModelConfig(**cfg), tensors), meta
