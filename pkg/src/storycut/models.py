"""Peephole LSTM, stacked and fast-forward stacks, frame scorer and proposal head.

Forward passes run over a batch: sequences are ``(T, B, width)`` arrays.
Every backward pass is written by hand and accumulates into gradient
arrays laid out exactly like the parameters.

Gate layout of the 4H pre-activation rows: ``[input | forget | cell | output]``.
Gates use the logistic sigmoid, the cell candidate and output squashing use
tanh, and the forget/output gates read the cell state through diagonal
peephole weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .numerics import ParamStore, ShapeError, sigmoid, uniform_init

WINDOW = 7
NUM_CATEGORIES = 4


@dataclass
class LstmCellParams:
    W_f: np.ndarray  # (4H, D) input projection
    W_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)
    w_g: np.ndarray  # (H,) forget-gate peephole
    w_o: np.ndarray  # (H,) output-gate peephole

    @property
    def hidden(self) -> int:
        return self.W_h.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1]

    def validate(self):
        H = self.hidden
        if self.W_h.shape != (4 * H, H):
            raise ShapeError(f"W_h has shape {self.W_h.shape}, expected {(4 * H, H)}")
        if self.W_f.shape[0] != 4 * H:
            raise ShapeError(f"W_f has {self.W_f.shape[0]} rows, expected {4 * H}")
        if self.b.shape != (4 * H,) or self.w_g.shape != (H,) or self.w_o.shape != (H,):
            raise ShapeError("bias/peephole shapes inconsistent with hidden width")

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LstmCellParams":
        H = hidden
        return cls(np.zeros((4 * H, input_dim)), np.zeros((4 * H, H)), np.zeros(4 * H), np.zeros(H), np.zeros(H))

    @classmethod
    def random(cls, rng, input_dim: int, hidden: int, scale: float = 1.0) -> "LstmCellParams":
        H = hidden
        return cls(
            scale * rng.uniform(-1, 1, (4 * H, input_dim)),
            scale * rng.uniform(-1, 1, (4 * H, H)),
            scale * rng.uniform(-1, 1, 4 * H),
            scale * rng.uniform(-1, 1, H),
            scale * rng.uniform(-1, 1, H),
        )


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, batch: Optional[int] = None) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape), np.zeros(shape))


def lstm_cell_forward(params: LstmCellParams, x, state: LstmState) -> Tuple[LstmState, np.ndarray]:
    """One step of the peephole LSTM. ``x`` is ``(D,)`` or ``(B, D)``."""
    params.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"input width {x.shape[-1]} != {params.input_dim}")
    H = params.hidden
    z = x @ params.W_f.T + state.h @ params.W_h.T + params.b
    zi, zg, zc, zo = z[..., :H], z[..., H:2 * H], z[..., 2 * H:3 * H], z[..., 3 * H:]
    i = sigmoid(zi)
    g = sigmoid(zg + params.w_g * state.c)
    c = g * state.c + i * np.tanh(zc)
    o = sigmoid(zo + params.w_o * c)
    h = np.tanh(c) * o
    return LstmState(h, c), h


# ---------------------------------------------------------------------------
# recurrence over a pre-projected sequence


def _recur_forward(cell: LstmCellParams, f_seq: np.ndarray, active=None):
    """Run the recurrent block over ``f_seq`` (T, B, 4H) from a zero state.

    ``active[t]`` is the number of leading batch rows still running at step
    ``t`` (rows sorted by decreasing length); finished rows are left at zero.
    """
    T, B, _ = f_seq.shape
    H = cell.hidden
    full = active is None
    gates = np.empty((T, B, 4, H)) if full else np.zeros((T, B, 4, H))  # i, g, cand, o
    cs = np.empty((T, B, H)) if full else np.zeros((T, B, H))
    hs = np.empty((T, B, H)) if full else np.zeros((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    WhT = cell.W_h.T
    for t in range(T):
        n = B if full else int(active[t])
        h, c = h[:n], c[:n]
        z = f_seq[t, :n] + h @ WhT + cell.b
        i = sigmoid(z[:, :H])
        g = sigmoid(z[:, H:2 * H] + cell.w_g * c)
        cand = np.tanh(z[:, 2 * H:3 * H])
        c = g * c + i * cand
        o = sigmoid(z[:, 3 * H:] + cell.w_o * c)
        h = np.tanh(c) * o
        gates[t, :n, 0], gates[t, :n, 1], gates[t, :n, 2], gates[t, :n, 3] = i, g, cand, o
        cs[t, :n] = c
        hs[t, :n] = h
    return hs, (gates, cs, hs, active)


def _recur_backward(cell: LstmCellParams, grad: LstmCellParams, cache, dh_seq: np.ndarray) -> np.ndarray:
    """Backpropagate through the recurrence; returns d f_seq and accumulates W_h, b, peepholes."""
    gates, cs, hs, active = cache
    T, B, H = cs.shape
    dz = np.zeros((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dw_g = np.zeros(H)
    dw_o = np.zeros(H)
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        n = B if active is None else int(active[t])
        gt = gates[t, :n]
        i, g, cand, o = gt[:, 0], gt[:, 1], gt[:, 2], gt[:, 3]
        c = cs[t, :n]
        c_prev = cs[t - 1, :n] if t > 0 else zeros[:n]
        tc = np.tanh(c)
        dh = dh_seq[t, :n] + dh_next[:n]
        dao = dh * tc * o * (1.0 - o)
        dc = dc_next[:n] + dh * o * (1.0 - tc * tc) + dao * cell.w_o
        dag = dc * c_prev * g * (1.0 - g)
        dai = dc * cand * i * (1.0 - i)
        dac = dc * i * (1.0 - cand * cand)
        dw_o += np.einsum("bh,bh->h", dao, c)
        dw_g += np.einsum("bh,bh->h", dag, c_prev)
        dzt = dz[t, :n]
        dzt[:, :H], dzt[:, H:2 * H], dzt[:, 2 * H:3 * H], dzt[:, 3 * H:] = dai, dag, dac, dao
        dc_next[:n] = dc * g + dag * cell.w_g
        dh_next[:n] = dzt @ cell.W_h
    flat = dz.reshape(T * B, 4 * H)
    if T > 1:
        h_prev = hs[:-1].reshape((T - 1) * B, H)
        grad.W_h += flat[B:].T @ h_prev
    grad.b += flat.sum(axis=0)
    grad.w_g += dw_g
    grad.w_o += dw_o
    return dz


# ---------------------------------------------------------------------------
# stacks


def _as_seq(xs) -> Tuple[np.ndarray, bool]:
    x = np.asarray(xs, dtype=np.float64)
    if x.ndim == 2:
        return x[:, None, :], True
    if x.ndim != 3:
        raise ShapeError("sequence must be (T, D) or (T, B, D)")
    return x, False


def check_stack(layers: Sequence[LstmCellParams], input_dim: int, fast_forward: bool):
    if len(layers) < 1:
        raise ShapeError("a stack needs at least one layer")
    width = input_dim
    prev = None
    for k, cell in enumerate(layers):
        cell.validate()
        if k > 0:
            width = prev.hidden + (4 * prev.hidden if fast_forward else 0)
        if cell.input_dim != width:
            raise ShapeError(f"layer {k} expects input width {cell.input_dim}, chain provides {width}")
        prev = cell


def stack_forward(layers: Sequence[LstmCellParams], x_seq: np.ndarray, fast_forward: bool, active=None):
    """Forward a (T, B, D) sequence through the stack.

    Returns top-layer outputs (T, B, H_K), top hidden blocks (T, B, 4H_K) and a cache.
    ``active`` (see ``_recur_forward``) skips the padded tail of shorter rows.
    """
    check_stack(layers, x_seq.shape[-1], fast_forward)
    cache = []
    inp = x_seq
    f = h = None
    for k, cell in enumerate(layers):
        if k > 0:
            inp = np.concatenate([h, f], axis=-1) if fast_forward else h
        f = inp @ cell.W_f.T
        h, rc = _recur_forward(cell, f, active)
        cache.append((inp, rc))
    return h, f, cache


def stack_backward(layers, grads, cache, dh_top: np.ndarray, fast_forward: bool) -> np.ndarray:
    """Accumulate parameter gradients; returns the gradient w.r.t. the input sequence."""
    dh = dh_top
    df_extra = None
    d_inp = None
    for k in range(len(layers) - 1, -1, -1):
        cell, grad = layers[k], grads[k]
        inp, rc = cache[k]
        df = _recur_backward(cell, grad, rc, dh)
        if df_extra is not None:
            df = df + df_extra
        T, B, W = inp.shape
        grad.W_f += df.reshape(T * B, -1).T @ inp.reshape(T * B, W)
        d_inp = df @ cell.W_f
        if k > 0:
            Hb = layers[k - 1].hidden
            dh = d_inp[..., :Hb]
            df_extra = d_inp[..., Hb:] if fast_forward else None
    return d_inp


def stacked_lstm_forward(layers: Sequence[LstmCellParams], xs) -> np.ndarray:
    """Plain deep LSTM: layer k>1 projects the previous layer's output only."""
    x, single = _as_seq(xs)
    h, _, _ = stack_forward(layers, x, fast_forward=False)
    return h[:, 0] if single else h


def ff_lstm_forward(layers: Sequence[LstmCellParams], xs) -> Tuple[np.ndarray, np.ndarray]:
    """Fast-forward stack: layer k>1 projects ``[h_{k-1}; f_{k-1}]``.

    Returns the top-layer outputs and the top-layer hidden blocks.
    """
    x, single = _as_seq(xs)
    h, f, _ = stack_forward(layers, x, fast_forward=True)
    return (h[:, 0], f[:, 0]) if single else (h, f)


# ---------------------------------------------------------------------------
# frame scorer


@dataclass
class BanParams:
    cell: LstmCellParams
    out_W: np.ndarray  # (4, H)
    out_b: np.ndarray  # (4,)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _ban_logits(params: BanParams, windows: np.ndarray):
    if windows.ndim != 3 or windows.shape[1] != WINDOW:
        raise ShapeError(f"windows must be (B, {WINDOW}, D), got {windows.shape}")
    x = np.ascontiguousarray(windows.transpose(1, 0, 2))
    f = x @ params.cell.W_f.T
    hs, rc = _recur_forward(params.cell, f)
    pooled = hs.mean(axis=0)
    logits = pooled @ params.out_W.T + params.out_b
    return logits, (x, rc, pooled)


def ban_window_forward(params: BanParams, window) -> np.ndarray:
    """Category probabilities (within, background, begin, end) for one 7-frame window."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != WINDOW:
        raise ShapeError(f"window must have exactly {WINDOW} rows, got shape {w.shape}")
    return ban_batch_proba(params, w[None])[0]


def ban_batch_proba(params: BanParams, windows: np.ndarray) -> np.ndarray:
    logits, _ = _ban_logits(params, np.asarray(windows, dtype=np.float64))
    return softmax(logits)


def ban_loss_and_grad(params: BanParams, grads: Optional[BanParams], windows: np.ndarray, labels) -> float:
    """Mean 4-way cross-entropy over a batch of windows; accumulates into ``grads``."""
    labels = np.asarray(labels, dtype=np.int64)
    logits, (x, rc, pooled) = _ban_logits(params, windows)
    logp = log_softmax(logits)
    B = len(labels)
    loss = -logp[np.arange(B), labels].mean()
    if grads is None:
        return float(loss)
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    grads.out_W += dlogits.T @ pooled
    grads.out_b += dlogits.sum(axis=0)
    dpooled = dlogits @ params.out_W
    dh = np.broadcast_to(dpooled / WINDOW, (WINDOW,) + dpooled.shape)
    df = _recur_backward(params.cell, grads.cell, rc, dh)
    T, Bn, D = x.shape
    grads.cell.W_f += df.reshape(T * Bn, -1).T @ x.reshape(T * Bn, D)
    return float(loss)


# ---------------------------------------------------------------------------
# proposal head


@dataclass
class ProposalHeadParams:
    layers: List[LstmCellParams]
    cls_w: np.ndarray  # (H_top,)
    cls_b: np.ndarray  # (1,)
    reg_W: np.ndarray  # (2, H_top)
    reg_b: np.ndarray  # (2,)
    fast_forward: bool = True


def pad_batch(features: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack variable-length (L_i, D) arrays into (L_max, B, D) plus lengths."""
    lengths = np.array([len(f) for f in features], dtype=np.int64)
    if len(features) == 0:
        raise ShapeError("empty batch")
    if lengths.min() < 1:
        raise ShapeError("empty feature range")
    D = features[0].shape[1]
    out = np.zeros((int(lengths.max()), len(features), D))
    for j, f in enumerate(features):
        out[: len(f), j] = f
    return out, lengths


def _head_forward(params: ProposalHeadParams, x: np.ndarray, lengths: np.ndarray):
    # run rows longest-first so each step only touches sequences still going
    order = np.argsort(-lengths, kind="stable")
    T = x.shape[0]
    active = (lengths[None, :] > np.arange(T)[:, None]).sum(axis=1)
    hs, _, cache = stack_forward(params.layers, x[:, order], params.fast_forward, active)
    h = np.empty_like(hs)
    h[:, order] = hs
    valid = np.arange(T)[:, None] < lengths[None, :]
    masked = np.where(valid[..., None], h, -np.inf)
    arg = masked.argmax(axis=0)  # earliest maximizing step
    rep = np.take_along_axis(h, arg[None], axis=0)[0]
    logit = rep @ params.cls_w + params.cls_b[0]
    reg = rep @ params.reg_W.T + params.reg_b
    return logit, reg, (cache, arg, rep, h.shape, order)


def proposal_head_batch(params: ProposalHeadParams, features: Sequence[np.ndarray]):
    """Story probabilities (B,) and normalized offsets (B, 2) for a batch of proposals."""
    x, lengths = pad_batch([np.asarray(f, dtype=np.float64) for f in features])
    logit, reg, _ = _head_forward(params, x, lengths)
    return sigmoid(logit), reg


def proposal_head_forward(params: ProposalHeadParams, features) -> Tuple[float, float, float]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ShapeError("features must be a non-empty (L, D) array")
    p, reg = proposal_head_batch(params, [f])
    return float(p[0]), float(reg[0, 0]), float(reg[0, 1])


def softplus(x):
    return np.logaddexp(0.0, x)


def head_loss_and_grad(
    params: ProposalHeadParams,
    grads: Optional[ProposalHeadParams],
    features: Sequence[np.ndarray],
    labels,
    targets,
    lam: float,
    parts: Optional[dict] = None,
) -> float:
    """Mean multi-task loss (binary cross-entropy + lam * smooth-L1 on positives).

    If ``parts`` is given, the mean classification and (unweighted)
    regression terms are stored under ``"cls"`` and ``"reg"``.
    """
    x, lengths = pad_batch([np.asarray(f, dtype=np.float64) for f in features])
    y = np.asarray(labels, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64).reshape(len(y), 2)
    logit, reg, (cache, arg, rep, hshape, order) = _head_forward(params, x, lengths)
    B = len(y)
    # -log p = softplus(-logit); -log(1-p) = softplus(logit)
    ce = np.where(y > 0, softplus(-logit), softplus(logit))
    resid = reg - t
    a = np.abs(resid)
    sl1 = np.where(a < 1.0, 0.5 * resid * resid, a - 0.5)
    pos = (y > 0).astype(np.float64)
    reg_term = pos * sl1.sum(axis=1)
    loss = float((ce + lam * reg_term).mean())
    if parts is not None:
        parts["cls"] = float(ce.mean())
        parts["reg"] = float(reg_term.mean())
    if grads is None:
        return loss
    dlogit = (sigmoid(logit) - y) / B
    dreg = lam * pos[:, None] * np.clip(resid, -1.0, 1.0) / B
    grads.cls_w += rep.T @ dlogit
    grads.cls_b += dlogit.sum()
    grads.reg_W += dreg.T @ rep
    grads.reg_b += dreg.sum(axis=0)
    drep = np.outer(dlogit, params.cls_w) + dreg @ params.reg_W
    dh = np.zeros(hshape)
    np.put_along_axis(dh, arg[None], drep[None], axis=0)
    stack_backward(params.layers, grads.layers, cache, dh[:, order], params.fast_forward)
    return loss


# ---------------------------------------------------------------------------
# store-backed models


def _cell_names(prefix: str):
    return [f"{prefix}.{n}" for n in ("W_f", "W_h", "b", "w_g", "w_o")]


def _cell_view(store: ParamStore, prefix: str, grad: bool) -> LstmCellParams:
    get = store.grad if grad else store.value
    W_f, W_h, b, w_g, w_o = (get(n) for n in _cell_names(prefix))
    return LstmCellParams(W_f, W_h, b[0], w_g[0], w_o[0])


def _add_cell(store: ParamStore, rng, prefix: str, input_dim: int, hidden: int, forget_bias: float):
    H = hidden
    store.add(f"{prefix}.W_f", uniform_init(rng, (4 * H, input_dim), input_dim))
    store.add(f"{prefix}.W_h", uniform_init(rng, (4 * H, H), H))
    b = np.zeros((1, 4 * H))
    b[0, H:2 * H] = forget_bias
    store.add(f"{prefix}.b", b)
    store.add(f"{prefix}.w_g", uniform_init(rng, (1, H), H))
    store.add(f"{prefix}.w_o", uniform_init(rng, (1, H), H))


class BanModel:
    """Frame scorer: LSTM over a 7-frame window, mean-pooled, 4-way softmax.

    Parameters are drawn in name order: W_f, W_h, w_g, w_o of the cell,
    then the output map; biases start at zero except the forget gate (1.0).
    """

    kind = "ban"

    def __init__(self, feature_dim: int, hidden: int = 64, forget_bias: float = 1.0, seed: int = 0):
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.forget_bias = forget_bias
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        _add_cell(self.store, rng, "ban", feature_dim, hidden, forget_bias)
        self.store.add("ban.out.W", uniform_init(rng, (NUM_CATEGORIES, hidden), hidden))
        self.store.add("ban.out.b", np.zeros((1, NUM_CATEGORIES)))

    def config(self) -> dict:
        return {"feature_dim": self.feature_dim, "hidden": self.hidden, "forget_bias": self.forget_bias}

    def params(self) -> BanParams:
        return BanParams(_cell_view(self.store, "ban", False), self.store.value("ban.out.W"), self.store.value("ban.out.b")[0])

    def grads(self) -> BanParams:
        return BanParams(_cell_view(self.store, "ban", True), self.store.grad("ban.out.W"), self.store.grad("ban.out.b")[0])

    def predict_proba(self, windows: np.ndarray, chunk: int = 4096) -> np.ndarray:
        p = self.params()
        parts = [ban_batch_proba(p, windows[i:i + chunk]) for i in range(0, len(windows), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, NUM_CATEGORIES))

    def loss_and_grad(self, windows: np.ndarray, labels) -> float:
        self.store.zero_grad()
        return ban_loss_and_grad(self.params(), self.grads(), windows, labels)


class ProposalHead:
    """K-layer recurrent stack, max-pooled over time, with story classifier and boundary regressor."""

    kind = "head"

    def __init__(
        self,
        feature_dim: int,
        hidden: int = 32,
        num_layers: int = 5,
        fast_forward: bool = True,
        forget_bias: float = 1.0,
        seed: int = 0,
    ):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.num_layers = num_layers
        self.fast_forward = fast_forward
        self.forget_bias = forget_bias
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        width = feature_dim
        for k in range(num_layers):
            _add_cell(self.store, rng, f"layer{k}", width, hidden, forget_bias)
            width = hidden + (4 * hidden if fast_forward else 0)
        self.store.add("cls.w", uniform_init(rng, (1, hidden), hidden))
        self.store.add("cls.b", np.zeros((1, 1)))
        self.store.add("reg.W", uniform_init(rng, (2, hidden), hidden))
        self.store.add("reg.b", np.zeros((1, 2)))

    def config(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "hidden": self.hidden,
            "num_layers": self.num_layers,
            "fast_forward": self.fast_forward,
            "forget_bias": self.forget_bias,
        }

    def _view(self, grad: bool) -> ProposalHeadParams:
        get = self.store.grad if grad else self.store.value
        layers = [_cell_view(self.store, f"layer{k}", grad) for k in range(self.num_layers)]
        return ProposalHeadParams(layers, get("cls.w")[0], get("cls.b")[0], get("reg.W"), get("reg.b")[0], self.fast_forward)

    def params(self) -> ProposalHeadParams:
        return self._view(False)

    def grads(self) -> ProposalHeadParams:
        return self._view(True)

    def predict(self, features: Sequence[np.ndarray], chunk: int = 256):
        ps, regs = [], []
        p = self.params()
        for i in range(0, len(features), chunk):
            a, b = proposal_head_batch(p, features[i:i + chunk])
            ps.append(a)
            regs.append(b)
        if not ps:
            return np.zeros(0), np.zeros((0, 2))
        return np.concatenate(ps), np.concatenate(regs)

    def loss_and_grad(self, features, labels, targets, lam: float) -> float:
        self.store.zero_grad()
        return head_loss_and_grad(self.params(), self.grads(), features, labels, targets, lam)
