"""Client-private fusion between local-body tokens and messenger tokens.

Two mirrored cross-attention blocks share one dimension adapter:

* ``receiver`` (used while the local model trains): queries come from the
  messenger tokens, keys/values from the adapted local tokens;
* ``transmitter`` (used while the messenger trains): queries come from the
  adapted local tokens, keys/values from the messenger tokens.

The whole adapter+projection+attention chain runs as one fused operation in
float64 with a single float32 rounding at the output (per-node rounding of
the long softmax chain would cost more precision than the rest of the engine
tolerates), so its backward pass is derived by hand here.

Everything in this module stays on the client — these parameters are never
uploaded — so the parameter names carry a ``fusion.`` prefix that the
snapshot layer rejects on sight.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor
from .tensor import _accum


def _attention_forward(
    loc64: np.ndarray,
    mes64: np.ndarray,
    wd: np.ndarray,
    bd: np.ndarray,
    wq: np.ndarray,
    bq: np.ndarray,
    wk: np.ndarray,
    bk: np.ndarray,
    wv: np.ndarray,
    bv: np.ndarray,
    mode: str,
):
    """Float64 forward of the fused adapter + single-head cross-attention.

    Returns every intermediate the backward pass needs.
    """
    adapted = loc64 @ wd + bd
    if mode == "recv":
        q_src, kv_src = mes64, adapted
    else:
        q_src, kv_src = adapted, mes64
    q = q_src @ wq + bq
    k = kv_src @ wk + bk
    v = kv_src @ wv + bv
    inv = 1.0 / np.sqrt(wq.shape[1])
    scores = (q @ np.swapaxes(k, -1, -2)) * inv
    if not np.isfinite(scores).all():
        raise FloatingPointError("non-finite attention score")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = probs @ v
    return out, (adapted, q_src, kv_src, q, k, v, probs, inv)


def fused_attention(
    loc: Tensor,
    mes: Tensor,
    wd: Tensor,
    bd: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    mode: str,
) -> Tensor:
    """Fused op: adapt local tokens, project Q/K/V, attend, weight values.

    ``mode="recv"`` queries with the messenger tokens (output length T_m);
    ``mode="trans"`` queries with the adapted local tokens (output length T_l).
    """
    if mode not in ("recv", "trans"):
        raise ValueError(f"mode must be recv|trans, got {mode!r}")
    loc64 = loc.data.astype(np.float64)
    mes64 = mes.data.astype(np.float64)
    wd64, bd64 = wd.data.astype(np.float64), bd.data.astype(np.float64)
    wq64, bq64 = wq.data.astype(np.float64), bq.data.astype(np.float64)
    wk64, bk64 = wk.data.astype(np.float64), bk.data.astype(np.float64)
    wv64, bv64 = wv.data.astype(np.float64), bv.data.astype(np.float64)
    out, cache = _attention_forward(loc64, mes64, wd64, bd64, wq64, bq64, wk64, bk64, wv64, bv64, mode)
    adapted, q_src, kv_src, q, k, v, probs, inv = cache

    def bwd(g: np.ndarray) -> None:
        g64 = g.astype(np.float64)
        g_probs = g64 @ np.swapaxes(v, -1, -2)
        g_v = np.swapaxes(probs, -1, -2) @ g64
        g_scores = probs * (g_probs - (g_probs * probs).sum(axis=-1, keepdims=True))
        g_scores *= inv
        g_q = g_scores @ k
        g_k = np.swapaxes(g_scores, -1, -2) @ q
        g_qsrc = g_q @ wq64.T
        g_kvsrc = g_k @ wk64.T + g_v @ wv64.T
        if wq.requires_grad:
            _accum(wq, np.einsum("ntd,nte->de", q_src, g_q).astype(np.float32))
        if bq.requires_grad:
            _accum(bq, g_q.sum(axis=(0, 1)).astype(np.float32))
        if wk.requires_grad:
            _accum(wk, np.einsum("ntd,nte->de", kv_src, g_k).astype(np.float32))
        if bk.requires_grad:
            _accum(bk, g_k.sum(axis=(0, 1)).astype(np.float32))
        if wv.requires_grad:
            _accum(wv, np.einsum("ntd,nte->de", kv_src, g_v).astype(np.float32))
        if bv.requires_grad:
            _accum(bv, g_v.sum(axis=(0, 1)).astype(np.float32))
        if mode == "recv":
            g_mes, g_adapted = g_qsrc, g_kvsrc
        else:
            g_adapted, g_mes = g_qsrc, g_kvsrc
        if mes.requires_grad:
            _accum(mes, g_mes.astype(np.float32))
        if wd.requires_grad:
            _accum(wd, np.einsum("ntd,nte->de", loc64, g_adapted).astype(np.float32))
        if bd.requires_grad:
            _accum(bd, g_adapted.sum(axis=(0, 1)).astype(np.float32))
        if loc.requires_grad:
            _accum(loc, (g_adapted @ wd64.T).astype(np.float32))

    parents = (loc, mes, wd, bd, wq, bq, wk, bk, wv, bv)
    return Tensor._node(out.astype(np.float32), parents, bwd)


class FusionProjections:
    """Adapter + receiver/transmitter projections for one client.

    ``d_loc`` is the channel width of the local body output, ``d_mes`` the
    messenger token width.  The receiver owns the adapter ``w_d`` (it is the
    stage that trains it); the transmitter reuses it frozen.
    """

    def __init__(self, d_loc: int, d_mes: int, seed: int):
        self.d_loc = int(d_loc)
        self.d_mes = int(d_mes)
        rng = np.random.default_rng(seed)

        def make(name: str, rows: int, cols: int) -> Parameter:
            bound = float(np.sqrt(6.0 / rows))
            w = rng.uniform(-bound, bound, size=(rows, cols)).astype(np.float32)
            return Parameter(name, Tensor(w, requires_grad=True))

        def make_bias(name: str, cols: int) -> Parameter:
            return Parameter(name, Tensor(np.zeros(cols, dtype=np.float32), requires_grad=True))

        d = self.d_mes
        self.params: dict[str, Parameter] = {}
        for name, rows in (
            ("fusion.w_d", self.d_loc),
            ("fusion.recv.w_q", d),
            ("fusion.recv.w_k", d),
            ("fusion.recv.w_v", d),
            ("fusion.trans.w_q", d),
            ("fusion.trans.w_k", d),
            ("fusion.trans.w_v", d),
        ):
            self.params[f"{name}.weight"] = make(f"{name}.weight", rows, d)
            self.params[f"{name}.bias"] = make_bias(f"{name}.bias", d)

    # -- parameter groups ---------------------------------------------------

    def receiver_params(self) -> list[Parameter]:
        """Trained during knowledge injection (includes the shared adapter)."""
        names = ("fusion.w_d", "fusion.recv.w_q", "fusion.recv.w_k", "fusion.recv.w_v")
        return [self.params[f"{n}.{s}"] for n in names for s in ("weight", "bias")]

    def transmitter_params(self) -> list[Parameter]:
        """Trained during knowledge distillation (adapter excluded: frozen reuse)."""
        names = ("fusion.trans.w_q", "fusion.trans.w_k", "fusion.trans.w_v")
        return [self.params[f"{n}.{s}"] for n in names for s in ("weight", "bias")]

    def all_params(self) -> list[Parameter]:
        return list(self.params.values())

    # -- forward pieces -----------------------------------------------------

    def _proj(self, name: str, x: Tensor) -> Tensor:
        return T.linear(x, self.params[f"{name}.weight"].tensor, self.params[f"{name}.bias"].tensor)

    def adapt(self, local_tokens: Tensor) -> Tensor:
        """Map (N, T_l, d_loc) local tokens into the messenger width."""
        if local_tokens.ndim != 3 or local_tokens.shape[2] != self.d_loc:
            raise ShapeError(f"adapt expects (N, T, {self.d_loc}), got {local_tokens.data.shape}")
        return self._proj("fusion.w_d", local_tokens)

    def _check_pair(self, local_tokens: Tensor, messenger_tokens: Tensor, caller: str) -> None:
        if local_tokens.ndim != 3 or local_tokens.shape[2] != self.d_loc:
            raise ShapeError(f"{caller} expects local tokens (N, T, {self.d_loc}), got {local_tokens.data.shape}")
        if messenger_tokens.ndim != 3 or messenger_tokens.shape[2] != self.d_mes:
            raise ShapeError(
                f"{caller} expects messenger tokens (N, T, {self.d_mes}), got {messenger_tokens.data.shape}"
            )
        if local_tokens.shape[0] != messenger_tokens.shape[0]:
            raise ShapeError(f"{caller}: batch sizes {local_tokens.shape[0]} != {messenger_tokens.shape[0]}")

    def _fused(self, side: str, local_tokens: Tensor, messenger_tokens: Tensor) -> Tensor:
        p = self.params
        return fused_attention(
            local_tokens,
            messenger_tokens,
            p["fusion.w_d.weight"].tensor,
            p["fusion.w_d.bias"].tensor,
            p[f"fusion.{side}.w_q.weight"].tensor,
            p[f"fusion.{side}.w_q.bias"].tensor,
            p[f"fusion.{side}.w_k.weight"].tensor,
            p[f"fusion.{side}.w_k.bias"].tensor,
            p[f"fusion.{side}.w_v.weight"].tensor,
            p[f"fusion.{side}.w_v.bias"].tensor,
            mode=side,
        )

    def receiver(self, local_tokens: Tensor, messenger_tokens: Tensor) -> Tensor:
        """(N, T_l, d_loc) x (N, T_m, d_mes) -> (N, T_m, d_mes)."""
        self._check_pair(local_tokens, messenger_tokens, "receiver")
        return self._fused("recv", local_tokens, messenger_tokens)

    def transmitter(self, local_tokens: Tensor, messenger_tokens: Tensor) -> Tensor:
        """(N, T_l, d_loc) x (N, T_m, d_mes) -> (N, T_l, d_mes) as messenger-head input."""
        self._check_pair(local_tokens, messenger_tokens, "transmitter")
        return self._fused("trans", local_tokens, messenger_tokens)

    def attention_matrix(self, side: str, local_tokens: Tensor, messenger_tokens: Tensor) -> np.ndarray:
        """The row-stochastic attention weights of one side, float64, no graph."""
        self._check_pair(local_tokens, messenger_tokens, "attention_matrix")
        p = self.params
        args = [
            p["fusion.w_d.weight"].tensor.data.astype(np.float64),
            p["fusion.w_d.bias"].tensor.data.astype(np.float64),
        ]
        for stem in ("w_q", "w_k", "w_v"):
            args.append(p[f"fusion.{side}.{stem}.weight"].tensor.data.astype(np.float64))
            args.append(p[f"fusion.{side}.{stem}.bias"].tensor.data.astype(np.float64))
        _, cache = _attention_forward(
            local_tokens.data.astype(np.float64), messenger_tokens.data.astype(np.float64), *args, mode=side
        )
        return cache[6]

    # -- attention-free ablation paths ---------------------------------------

    def add_receive(self, local_tokens: Tensor, messenger_tokens: Tensor) -> Tensor:
        """Receiver ablation: messenger tokens plus the mean adapted local token."""
        adapted = self.adapt(local_tokens)
        pooled = T.tmean(adapted, axis=1, keepdims=True)
        t_m = messenger_tokens.shape[1]
        return T.add(messenger_tokens, T.expand(pooled, 1, t_m))

    def add_transmit(self, local_tokens: Tensor, messenger_tokens: Tensor) -> Tensor:
        """Transmitter ablation: adapted local tokens plus the mean messenger token."""
        adapted = self.adapt(local_tokens)
        pooled = T.tmean(messenger_tokens, axis=1, keepdims=True)
        t_l = adapted.shape[1]
        return T.add(adapted, T.expand(pooled, 1, t_l))
