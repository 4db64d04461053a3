"""Small pre-norm encoder-decoder transformer in float64 numpy.

Parameters live in a flat ``dict[str, ndarray]``. Every forward helper can
record a cache so that :func:`backward` returns exact gradients, including
gradients injected directly on the decoder self-attention score matrices.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-6


@dataclass
class ModelConfig:
    vocab_size: int
    n_out: int
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 128
    max_src_len: int = 300
    max_tgt_len: int = 60
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "n_out", "d_model", "n_heads", "d_ff", "max_src_len", "max_tgt_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_out > self.vocab_size:
            raise ValueError("n_out cannot exceed vocab_size")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def init_params(cfg: ModelConfig, seed: int = 0, dtype=DTYPE) -> dict[str, np.ndarray]:
    """Random parameters; pass ``dtype=np.longdouble`` for extended-precision checks."""
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff

    def dense(n_in, n_out):
        return rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_out))

    p = {
        "tok_emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)),
        "pos_src": rng.normal(0.0, 0.1, size=(cfg.max_src_len, d)),
        # one extra slot for the BOS prefix
        "pos_tgt": rng.normal(0.0, 0.1, size=(cfg.max_tgt_len + 1, d)),
    }

    def attn(prefix):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            p[f"{prefix}.{w}"] = dense(d, d)

    def norm(prefix):
        p[f"{prefix}.g"] = np.ones(d)
        p[f"{prefix}.b"] = np.zeros(d)

    def ffn(prefix):
        p[f"{prefix}.W1"] = dense(d, f)
        p[f"{prefix}.b1"] = np.zeros(f)
        p[f"{prefix}.W2"] = dense(f, d)
        p[f"{prefix}.b2"] = np.zeros(d)

    for b in range(cfg.n_blocks):
        norm(f"enc.{b}.ln1")
        attn(f"enc.{b}.attn")
        norm(f"enc.{b}.ln2")
        ffn(f"enc.{b}.ffn")
    for b in range(cfg.n_blocks):
        norm(f"dec.{b}.ln1")
        attn(f"dec.{b}.self")
        norm(f"dec.{b}.ln2")
        attn(f"dec.{b}.cross")
        norm(f"dec.{b}.ln3")
        ffn(f"dec.{b}.ffn")
    norm("dec.ln_f")
    p["out.W"] = dense(d, cfg.n_out)
    p["out.b"] = np.zeros(cfg.n_out)
    return {k: v.astype(dtype) for k, v in p.items()}


# ---------------------------------------------------------------- primitives

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def attention(q, k, v, causal=False, allowed=None):
    """Scaled dot-product attention; returns ``(output, scores)``.

    Works on any leading batch axes. ``allowed`` is an optional boolean array
    broadcastable to the score shape; ``causal`` additionally hides j > i.
    """
    dtype = np.result_type(q, k, v, DTYPE)
    q, k, v = (np.asarray(a, dtype=dtype) for a in (q, k, v))
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    n, m = q.shape[-2], k.shape[-2]
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(k.shape[-1])
    if causal:
        tri = np.tril(np.ones((n, m), dtype=bool))
        allowed = tri if allowed is None else (allowed & tri)
    if allowed is not None:
        logits = np.where(allowed, logits, -np.inf)
    scores = softmax(logits)
    return scores @ v, scores


def _attention_bwd(dout, q, k, v, scores, dscores_extra=None):
    dscores = dout @ np.swapaxes(v, -1, -2)
    if dscores_extra is not None:
        dscores = dscores + dscores_extra
    dv = np.swapaxes(scores, -1, -2) @ dout
    dlogits = scores * (dscores - (dscores * scores).sum(-1, keepdims=True))
    dlogits /= np.sqrt(k.shape[-1])
    dq = dlogits @ k
    dk = np.swapaxes(dlogits, -1, -2) @ q
    return dq, dk, dv


def _split_heads(x, n_heads):
    *lead, n, d = x.shape
    return np.moveaxis(x.reshape(*lead, n, n_heads, d // n_heads), -2, -3)


def _merge_heads(x):
    *lead, h, n, dh = x.shape
    return np.moveaxis(x, -3, -2).reshape(*lead, n, h * dh)


def multi_head(x_q, x_kv, params, prefix, n_heads, causal=False, allowed=None, cache=None):
    """Project, attend per head, concatenate, project by ``Wo``.

    Returns ``(output, scores)`` with scores shaped ``(..., H, n_q, n_kv)``.
    """
    Wq, Wk, Wv, Wo = (params[f"{prefix}.{w}"] for w in ("Wq", "Wk", "Wv", "Wo"))
    if x_q.shape[-1] != Wq.shape[0] or x_kv.shape[-1] != Wk.shape[0]:
        raise ValueError("input width does not match d_model")
    q = _split_heads(x_q @ Wq, n_heads)
    k = _split_heads(x_kv @ Wk, n_heads)
    v = _split_heads(x_kv @ Wv, n_heads)
    if allowed is not None:
        allowed = np.expand_dims(allowed, -3)
    ctx, scores = attention(q, k, v, causal=causal, allowed=allowed)
    cat = _merge_heads(ctx)
    out = cat @ Wo
    if cache is not None:
        cache.update(x_q=x_q, x_kv=x_kv, q=q, k=k, v=v, scores=scores, cat=cat)
    return out, scores


def _multi_head_bwd(dout, cache, params, prefix, grads, dscores_extra=None):
    d = dout.shape[-1]
    Wq, Wk, Wv, Wo = (params[f"{prefix}.{w}"] for w in ("Wq", "Wk", "Wv", "Wo"))
    x_q, x_kv = cache["x_q"], cache["x_kv"]
    _acc(grads, f"{prefix}.Wo", cache["cat"].reshape(-1, d).T @ dout.reshape(-1, d))
    dctx = _split_heads(dout @ Wo.T, cache["q"].shape[-3])
    dq, dk, dv = _attention_bwd(dctx, cache["q"], cache["k"], cache["v"], cache["scores"], dscores_extra)
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    _acc(grads, f"{prefix}.Wq", x_q.reshape(-1, d).T @ dq.reshape(-1, d))
    _acc(grads, f"{prefix}.Wk", x_kv.reshape(-1, d).T @ dk.reshape(-1, d))
    _acc(grads, f"{prefix}.Wv", x_kv.reshape(-1, d).T @ dv.reshape(-1, d))
    dx_q = dq @ Wq.T
    dx_kv = dk @ Wk.T + dv @ Wv.T
    return dx_q, dx_kv


def ffn(x, params, prefix, cache=None):
    """ReLU feed-forward: ``max(0, x W1 + b1) W2 + b2``."""
    pre = x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"]
    hid = np.maximum(pre, 0.0)
    if cache is not None:
        cache.update(x=x, pre=pre, hid=hid)
    return hid @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]


def _ffn_bwd(dout, cache, params, prefix, grads):
    d, f = params[f"{prefix}.W1"].shape
    hid = cache["hid"]
    _acc(grads, f"{prefix}.W2", hid.reshape(-1, f).T @ dout.reshape(-1, d))
    _acc(grads, f"{prefix}.b2", dout.reshape(-1, d).sum(0))
    dpre = (dout @ params[f"{prefix}.W2"].T) * (cache["pre"] > 0)
    _acc(grads, f"{prefix}.W1", cache["x"].reshape(-1, d).T @ dpre.reshape(-1, f))
    _acc(grads, f"{prefix}.b1", dpre.reshape(-1, f).sum(0))
    return dpre @ params[f"{prefix}.W1"].T


def _layer_norm(x, params, prefix, cache=None):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    if cache is not None:
        cache.update(xhat=xhat, rstd=rstd)
    return xhat * params[f"{prefix}.g"] + params[f"{prefix}.b"]


def _layer_norm_bwd(dy, cache, params, prefix, grads):
    d = dy.shape[-1]
    xhat, rstd = cache["xhat"], cache["rstd"]
    _acc(grads, f"{prefix}.g", (dy * xhat).reshape(-1, d).sum(0))
    _acc(grads, f"{prefix}.b", dy.reshape(-1, d).sum(0))
    dxhat = dy * params[f"{prefix}.g"]
    return rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                   - xhat * (dxhat * xhat).mean(-1, keepdims=True))


def _dropout(x, rate, rng, cache=None, key="drop"):
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    if cache is not None:
        cache[key] = keep
    return x * keep


def _dropout_bwd(dy, cache, key="drop"):
    keep = cache.get(key)
    return dy if keep is None else dy * keep


def _acc(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


# ---------------------------------------------------------------- model

@dataclass
class ForwardTrace:
    """Decoder-side results of one forward pass.

    ``self_scores[b]`` has shape ``(N, H, n, n)`` over the decoder input
    (BOS-prefixed). ``cache`` is only populated when gradients are needed.
    """
    self_scores: list[np.ndarray]
    o_hierarchy: np.ndarray
    logits: np.ndarray
    cache: dict | None = field(default=None, repr=False)


def _key_mask(mask, n_q):
    # (N, m) key validity -> (N, n_q, m)
    return np.broadcast_to(mask[:, None, :], (mask.shape[0], n_q, mask.shape[1]))


def encoder_forward(params, cfg: ModelConfig, src, src_mask=None, rng=None, cache=None):
    """Encode ``src`` ids of shape ``(N, n)`` (or ``(n,)``) into ``O_text``."""
    src = np.asarray(src)
    single = src.ndim == 1
    if single:
        src = src[None]
    N, n = src.shape
    if n > cfg.max_src_len:
        raise ValueError(f"source length {n} exceeds max_src_len={cfg.max_src_len}")
    if src_mask is None:
        src_mask = np.ones((N, n), dtype=bool)
    allowed = _key_mask(src_mask, n)
    x = params["tok_emb"][src] + params["pos_src"][:n]
    blocks = []
    if cache is not None:
        cache.update(src=src, blocks=blocks, emb={})
    x = _dropout(x, cfg.dropout, rng, cache["emb"] if cache is not None else None)
    for b in range(cfg.n_blocks):
        c = {k: {} for k in ("ln1", "attn", "ln2", "ffn", "d1", "d2")} if cache is not None else None
        g = (lambda k: c[k]) if c is not None else (lambda k: None)
        h = _layer_norm(x, params, f"enc.{b}.ln1", g("ln1"))
        a, _ = multi_head(h, h, params, f"enc.{b}.attn", cfg.n_heads, allowed=allowed, cache=g("attn"))
        x = x + _dropout(a, cfg.dropout, rng, g("d1"))
        h = _layer_norm(x, params, f"enc.{b}.ln2", g("ln2"))
        x = x + _dropout(ffn(h, params, f"enc.{b}.ffn", g("ffn")), cfg.dropout, rng, g("d2"))
        if c is not None:
            blocks.append(c)
    return x[0] if single else x


def decoder_forward(params, cfg: ModelConfig, tgt, o_text, src_mask=None, tgt_mask=None,
                    rng=None, cache=None) -> ForwardTrace:
    """Run the decoder over BOS-prefixed ids ``tgt`` against ``o_text``."""
    tgt = np.asarray(tgt)
    single = tgt.ndim == 1
    if single:
        tgt, o_text = tgt[None], o_text[None]
    N, n = tgt.shape
    if n > cfg.max_tgt_len + 1:
        raise ValueError(f"target length {n - 1} exceeds max_tgt_len={cfg.max_tgt_len}")
    if src_mask is None:
        src_mask = np.ones(o_text.shape[:2], dtype=bool)
    if tgt_mask is None:
        tgt_mask = np.ones((N, n), dtype=bool)
    self_allowed = _key_mask(tgt_mask, n) & np.tril(np.ones((n, n), dtype=bool))
    cross_allowed = _key_mask(src_mask, n)
    y = params["tok_emb"][tgt] + params["pos_tgt"][:n]
    blocks = []
    if cache is not None:
        cache.update(tgt=tgt, blocks=blocks, emb={}, ln_f={})
    y = _dropout(y, cfg.dropout, rng, cache["emb"] if cache is not None else None)
    scores = []
    for b in range(cfg.n_blocks):
        names = ("ln1", "self", "ln2", "cross", "ln3", "ffn", "d1", "d2", "d3")
        c = {k: {} for k in names} if cache is not None else None
        g = (lambda k: c[k]) if c is not None else (lambda k: None)
        h = _layer_norm(y, params, f"dec.{b}.ln1", g("ln1"))
        a, s = multi_head(h, h, params, f"dec.{b}.self", cfg.n_heads, allowed=self_allowed, cache=g("self"))
        scores.append(s)
        y = y + _dropout(a, cfg.dropout, rng, g("d1"))
        h = _layer_norm(y, params, f"dec.{b}.ln2", g("ln2"))
        a, _ = multi_head(h, o_text, params, f"dec.{b}.cross", cfg.n_heads, allowed=cross_allowed, cache=g("cross"))
        y = y + _dropout(a, cfg.dropout, rng, g("d2"))
        h = _layer_norm(y, params, f"dec.{b}.ln3", g("ln3"))
        y = y + _dropout(ffn(h, params, f"dec.{b}.ffn", g("ffn")), cfg.dropout, rng, g("d3"))
        if c is not None:
            blocks.append(c)
    o_h = _layer_norm(y, params, "dec.ln_f", cache["ln_f"] if cache is not None else None)
    logits = project_logits(o_h, params)
    if cache is not None:
        cache["o_h"] = o_h
    if single:
        return ForwardTrace([s[0] for s in scores], o_h[0], logits[0], cache)
    return ForwardTrace(scores, o_h, logits, cache)


def project_logits(o_hierarchy, params):
    """Affine output head; softmax is left to the loss and the decoder."""
    return o_hierarchy @ params["out.W"] + params["out.b"]


def forward(params, cfg: ModelConfig, src, tgt, src_mask=None, tgt_mask=None,
            rng=None, keep_cache=False) -> ForwardTrace:
    """Full teacher-forced pass. Pass ``rng`` to enable dropout."""
    enc_cache = {} if keep_cache else None
    dec_cache = {} if keep_cache else None
    o_text = encoder_forward(params, cfg, src, src_mask, rng, enc_cache)
    trace = decoder_forward(params, cfg, tgt, o_text, src_mask, tgt_mask, rng, dec_cache)
    if keep_cache:
        trace.cache = {"enc": enc_cache, "dec": dec_cache, "o_text": o_text}
    return trace


def backward(params, cfg: ModelConfig, trace: ForwardTrace, dlogits,
             dscores=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given ``dL/dlogits`` and optional ``dL/dScore``.

    ``dscores[b]`` (same shape as ``trace.self_scores[b]``) is added to the
    score gradient of decoder block ``b`` before the softmax backward.
    """
    if trace.cache is None:
        raise ValueError("trace was produced without keep_cache=True")
    enc, dec = trace.cache["enc"], trace.cache["dec"]
    d = cfg.d_model
    grads: dict[str, np.ndarray] = {}

    o_h = dec["o_h"]
    _acc(grads, "out.W", o_h.reshape(-1, d).T @ dlogits.reshape(-1, cfg.n_out))
    _acc(grads, "out.b", dlogits.reshape(-1, cfg.n_out).sum(0))
    dy = _layer_norm_bwd(dlogits @ params["out.W"].T, dec["ln_f"], params, "dec.ln_f", grads)
    do_text = np.zeros_like(trace.cache["o_text"])
    for b in reversed(range(cfg.n_blocks)):
        c = dec["blocks"][b]
        dh = _ffn_bwd(_dropout_bwd(dy, c["d3"]), c["ffn"], params, f"dec.{b}.ffn", grads)
        dy = dy + _layer_norm_bwd(dh, c["ln3"], params, f"dec.{b}.ln3", grads)
        dq, dkv = _multi_head_bwd(_dropout_bwd(dy, c["d2"]), c["cross"], params, f"dec.{b}.cross", grads)
        do_text += dkv
        dy = dy + _layer_norm_bwd(dq, c["ln2"], params, f"dec.{b}.ln2", grads)
        extra = None if dscores is None else dscores[b]
        dq, dkv = _multi_head_bwd(_dropout_bwd(dy, c["d1"]), c["self"], params, f"dec.{b}.self", grads, extra)
        dy = dy + _layer_norm_bwd(dq + dkv, c["ln1"], params, f"dec.{b}.ln1", grads)
    dy = _dropout_bwd(dy, dec["emb"])
    tgt = dec["tgt"]
    grad_emb = np.zeros_like(params["tok_emb"])
    np.add.at(grad_emb, tgt, dy)
    grad_pos_tgt = np.zeros_like(params["pos_tgt"])
    grad_pos_tgt[:tgt.shape[1]] = dy.sum(0)

    dx = do_text
    for b in reversed(range(cfg.n_blocks)):
        c = enc["blocks"][b]
        dh = _ffn_bwd(_dropout_bwd(dx, c["d2"]), c["ffn"], params, f"enc.{b}.ffn", grads)
        dx = dx + _layer_norm_bwd(dh, c["ln2"], params, f"enc.{b}.ln2", grads)
        dq, dkv = _multi_head_bwd(_dropout_bwd(dx, c["d1"]), c["attn"], params, f"enc.{b}.attn", grads)
        dx = dx + _layer_norm_bwd(dq + dkv, c["ln1"], params, f"enc.{b}.ln1", grads)
    dx = _dropout_bwd(dx, enc["emb"])
    src = enc["src"]
    np.add.at(grad_emb, src, dx)
    grad_pos_src = np.zeros_like(params["pos_src"])
    grad_pos_src[:src.shape[1]] = dx.sum(0)
    grads["tok_emb"] = grad_emb
    grads["pos_tgt"] = grad_pos_tgt
    grads["pos_src"] = grad_pos_src
    for name, value in params.items():
        if name not in grads:
            grads[name] = np.zeros_like(value)
    return grads


class IncrementalDecoder:
    """Step-by-step decoder with cached self-attention keys/values.

    Produces the same logits as :func:`decoder_forward` on the growing prefix,
    one position at a time.
    """

    def __init__(self, params, cfg: ModelConfig, o_text, src_mask=None):
        self.params, self.cfg = params, cfg
        N = o_text.shape[0]
        self.src_allowed = (np.ones(o_text.shape[:2], dtype=bool) if src_mask is None
                            else np.asarray(src_mask, dtype=bool))[:, None, None, :]
        self.cross = []
        for b in range(cfg.n_blocks):
            pre = f"dec.{b}.cross"
            self.cross.append((_split_heads(o_text @ params[f"{pre}.Wk"], cfg.n_heads),
                               _split_heads(o_text @ params[f"{pre}.Wv"], cfg.n_heads)))
        self.keys: list[np.ndarray | None] = [None] * cfg.n_blocks
        self.values: list[np.ndarray | None] = [None] * cfg.n_blocks
        self.t = 0
        self.N = N

    def step(self, ids) -> np.ndarray:
        """Feed one token per sample; returns next-token logits ``(N, n_out)``."""
        p, cfg = self.params, self.cfg
        if self.t > cfg.max_tgt_len:
            raise ValueError(f"decoder input exceeds max_tgt_len={cfg.max_tgt_len}")
        y = p["tok_emb"][np.asarray(ids)][:, None, :] + p["pos_tgt"][self.t]
        for b in range(cfg.n_blocks):
            pre = f"dec.{b}.self"
            h = _layer_norm(y, p, f"dec.{b}.ln1")
            q = _split_heads(h @ p[f"{pre}.Wq"], cfg.n_heads)
            k = _split_heads(h @ p[f"{pre}.Wk"], cfg.n_heads)
            v = _split_heads(h @ p[f"{pre}.Wv"], cfg.n_heads)
            if self.keys[b] is None:
                self.keys[b], self.values[b] = k, v
            else:
                self.keys[b] = np.concatenate([self.keys[b], k], axis=-2)
                self.values[b] = np.concatenate([self.values[b], v], axis=-2)
            ctx, _ = attention(q, self.keys[b], self.values[b])
            y = y + _merge_heads(ctx) @ p[f"{pre}.Wo"]
            h = _layer_norm(y, p, f"dec.{b}.ln2")
            pre = f"dec.{b}.cross"
            q = _split_heads(h @ p[f"{pre}.Wq"], cfg.n_heads)
            ck, cv = self.cross[b]
            ctx, _ = attention(q, ck, cv, allowed=self.src_allowed)
            y = y + _merge_heads(ctx) @ p[f"{pre}.Wo"]
            h = _layer_norm(y, p, f"dec.{b}.ln3")
            y = y + ffn(h, p, f"dec.{b}.ffn")
        self.t += 1
        return project_logits(_layer_norm(y, p, "dec.ln_f"), p)[:, 0]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, cfg: ModelConfig, params, vocab_tokens=None, n_decoder=None, meta=None) -> None:
    """Write an uncompressed ``.npz`` with a JSON header; round-trips bit-exactly."""
    header = {"config": asdict(cfg), "meta": meta or {}}
    if vocab_tokens is not None:
        header["vocab"] = list(vocab_tokens)
        header["n_decoder"] = n_decoder
    arrays = {f"param/{k}": v for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        params = {k.split("/", 1)[1]: data[k].copy() for k in data.files if k.startswith("param/")}
    return ModelConfig(**header["config"]), params, header
