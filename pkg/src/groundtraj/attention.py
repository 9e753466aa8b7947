"""Multi-head attention with hand-written backward passes.

One kernel, :func:`attend`, serves self-attention, global cross-attention and
location-aware cross-attention (LACA).  LACA is masked attention over the
concatenation of all candidate sources: each query token may only see the rows
of its own source, and the Gaussian weight of an owned cell scales that
source's keys and values.  Because projections carry no bias,
``K'(w F) = w K'(F)``, so the weight is applied to the logits and to the head
output instead of re-projecting a scaled copy of ``F`` per token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .grounding import AssignmentField, conditioning_sources
from .trajectory import LocalText


@dataclass
class AttentionWeights:
    """Packed per-head projections: column block ``m`` of ``wq`` is head ``m``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ValueError(f"width {d} not divisible by {self.heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {m.shape}")
            if not np.isfinite(m).all():
                raise ValueError(f"{name} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def random(cls, dim: int, heads: int, rng: np.random.Generator, scale: float | None = None,
               dtype=np.float64) -> "AttentionWeights":
        scale = dim ** -0.5 if scale is None else scale
        mats = [(rng.standard_normal((dim, dim)) * scale).astype(dtype) for _ in range(4)]
        return cls(*mats, heads=heads)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"q": self.wq, "k": self.wk, "v": self.wv, "o": self.wo}


@dataclass(frozen=True)
class BlendConfig:
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def _split(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, m, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, m * dh)


def attend(zq: np.ndarray, src: np.ndarray, w: Mapping[str, np.ndarray], heads: int,
           mask: np.ndarray | None = None, scale: np.ndarray | None = None):
    """Batched multi-head attention.

    Args:
        zq: queries, ``(B, L, D)``.
        src: key/value rows, ``(B, S, D)``.
        w: projection matrices ``q, k, v, o``.
        mask: boolean ``(B, L or 1, S)``; ``False`` entries are excluded.
        scale: per-query source weight ``(B, L)`` multiplying keys and values.

    Returns:
        ``(out, cache)`` with ``out`` of shape ``(B, L, D)``.
    """
    d = zq.shape[-1]
    dh = d // heads
    q = _split(zq @ w["q"], heads)
    k = _split(src @ w["k"], heads)
    v = _split(src @ w["v"], heads)
    logits = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dh).astype(zq.dtype)
    if scale is not None:
        logits = logits * scale[:, None, :, None]
    if mask is not None:
        logits = np.where(mask[:, None], logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    h = p @ v
    if scale is not None:
        h = h * scale[:, None, :, None]
    hc = _merge(h)
    out = hc @ w["o"]
    cache = (zq, src, q, k, v, p, hc, scale, heads, dh)
    return out, cache


def attend_backward(dout: np.ndarray, cache, w: Mapping[str, np.ndarray]):
    """Gradients of :func:`attend` w.r.t. queries, sources and the four weights."""
    zq, src, q, k, v, p, hc, scale, heads, dh = cache
    b, n, d = zq.shape
    grads = {"o": hc.reshape(-1, d).T @ dout.reshape(-1, d)}
    dh_ = _split(dout @ w["o"].T, heads)
    if scale is not None:
        dh_ = dh_ * scale[:, None, :, None]
    dv = p.transpose(0, 1, 3, 2) @ dh_
    dp = dh_ @ v.transpose(0, 1, 3, 2)
    dlog = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    if scale is not None:
        dlog = dlog * scale[:, None, :, None]
    dlog /= np.sqrt(dh).astype(zq.dtype)
    dq = _merge(dlog @ k)
    dk = _merge(dlog.transpose(0, 1, 3, 2) @ q)
    dv = _merge(dv)
    grads["q"] = zq.reshape(-1, d).T @ dq.reshape(-1, d)
    grads["k"] = src.reshape(-1, d).T @ dk.reshape(-1, d)
    grads["v"] = src.reshape(-1, d).T @ dv.reshape(-1, d)
    dzq = dq @ w["q"].T
    dsrc = dk @ w["k"].T + dv @ w["v"].T
    return dzq, dsrc, grads


def attention_probs(cache) -> np.ndarray:
    """Per-head attention rows ``(B, M, L, S)`` from a forward cache."""
    return cache[5]


def cross_attention(z: np.ndarray, f: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """``[H_1 || ... || H_M] W_O`` with ``H_m = softmax(Q K^T / sqrt(D_h)) V``."""
    if z.ndim != 2 or f.ndim != 2 or z.shape[1] != w.dim or f.shape[1] != w.dim:
        raise ValueError(f"expected (L, {w.dim}) tokens and (L_text, {w.dim}) text")
    out, _ = attend(z[None], f[None], w.as_dict(), w.heads)
    return out[0]


@dataclass(frozen=True)
class LacaInputs:
    """Packed sources, mask and weights for one or more samples."""

    src: np.ndarray
    mask: np.ndarray
    scale: np.ndarray


def pack_laca(fields: Sequence[AssignmentField | None], locals_: Sequence[Sequence[LocalText] | None],
              globals_: Sequence[np.ndarray], dtype=np.float64) -> LacaInputs:
    """Concatenate each sample's global and referenced local features.

    Tokens follow row-major ``(t, row, col)`` order.  A ``None`` field (no local
    condition) sends every token to the global feature.
    """
    bsz = len(globals_)
    segs_all, owners_all, weights_all = [], [], []
    for b in range(bsz):
        g = np.asarray(globals_[b])
        fld = fields[b]
        segs = [g]
        if fld is None or fld.is_all_global():
            n = None if fld is None else fld.num_tokens
            owners_all.append((None, n))
            weights_all.append(None)
            segs_all.append(segs)
            continue
        smap = conditioning_sources(fld, locals_[b], g)
        idx = smap.index.reshape(-1)
        seg_of = np.zeros(idx.max() + 1, dtype=np.int64)
        for k in fld.referenced():
            seg_of[k + 1] = len(segs)
            segs.append(smap.features[k + 1])
        owners_all.append((seg_of[idx], idx.size))
        weights_all.append(smap.weight.reshape(-1))
        segs_all.append(segs)

    ntok = {n for _, n in owners_all if n is not None}
    if len(ntok) > 1:
        raise ValueError("assignment fields disagree on token count")
    if not ntok:
        raise ValueError("token count unknown: pass at least one assignment field")
    L = ntok.pop()
    S = max(sum(s.shape[0] for s in segs) for segs in segs_all)
    D = np.asarray(globals_[0]).shape[1]
    src = np.zeros((bsz, S, D), dtype=dtype)
    mask = np.zeros((bsz, L, S), dtype=bool)
    scale = np.ones((bsz, L), dtype=dtype)
    for b in range(bsz):
        starts = np.cumsum([0] + [s.shape[0] for s in segs_all[b]])
        src[b, :starts[-1]] = np.concatenate(segs_all[b], axis=0)
        seg_idx, _ = owners_all[b]
        if seg_idx is None:
            mask[b, :, :starts[1]] = True
            continue
        cols = np.arange(S)
        lo = starts[seg_idx][:, None]
        hi = starts[seg_idx + 1][:, None]
        mask[b] = (cols >= lo) & (cols < hi)
        scale[b] = weights_all[b]
    return LacaInputs(src, mask, scale)


def laca(z: np.ndarray, field: AssignmentField, locals_: Sequence[LocalText],
         global_feat: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """Location-aware cross-attention for one sample.

    Each token attends only to its own source: the Gaussian-weighted local text
    feature of the trajectory that owns its cell, or the global caption.
    """
    if z.shape[0] != field.num_tokens:
        raise ValueError(f"{z.shape[0]} tokens but field has {field.num_tokens} cells")
    packed = pack_laca([field], [locals_], [global_feat], dtype=z.dtype)
    out, _ = attend(z[None], packed.src, w.as_dict(), w.heads, mask=packed.mask, scale=packed.scale)
    return out[0]


def blend(cross_out: np.ndarray, laca_out: np.ndarray, cfg: BlendConfig | float) -> np.ndarray:
    lam = cfg.lam if isinstance(cfg, BlendConfig) else float(cfg)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if cross_out.shape != laca_out.shape:
        raise ValueError(f"shape mismatch {cross_out.shape} vs {laca_out.shape}")
    return (1.0 - lam) * cross_out + lam * laca_out


def finite_difference(f: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)`` with a floor for all-zero gradients."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(num / den)


def grad_check(op: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
               params: Mapping[str, np.ndarray], eps: float = 1e-6,
               names: Sequence[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op()`` reads the current contents of ``params`` and returns
    ``(loss, grads)``.  Each parameter is compared as a whole tensor; the result
    is the worst tensor.
    """
    loss, grads = op()
    if not np.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    worst = 0.0
    for name in (names if names is not None else list(grads)):
        ga = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(ga).all():
            raise FloatingPointError(f"analytic gradient of {name} is not finite")
        gn = finite_difference(lambda: op()[0], params[name], eps)
        if not np.isfinite(gn).all():
            raise FloatingPointError(f"numeric gradient of {name} is not finite")
        worst = max(worst, relative_error(ga, gn))
    return worst
