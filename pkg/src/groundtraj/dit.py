"""A small diffusion transformer over latent video tokens.

Each block runs modulated self-attention, the blended global/LACA
cross-attention update ``(1 - lam) * CrossAttn + lam * LACA`` and a modulated
feed-forward layer.  All backward passes are written out by hand; the model is
dtype-agnostic so the same code trains in float32 and is gradient-checked in
float64.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attention import attend, attend_backward, pack_laca
from .grounding import AssignmentField
from .trajectory import LocalText

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_GELU_K = np.sqrt(2.0 / np.pi)
_LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 2
    patch: tuple[int, int, int] = (2, 2, 2)
    channels: int = 1
    frames: int = 8
    height: int = 16
    width: int = 16
    time_dim: int = 64
    mlp_ratio: int = 4
    pos_encoding: str = "sincos3d"
    lam: float = 0.5
    laca: bool = True

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.pos_encoding not in ("sincos3d", "none"):
            raise ValueError(f"unknown positional encoding {self.pos_encoding!r}")
        for size, p, name in zip(self.volume[:3], self.patch, ("frames", "height", "width")):
            if size % p:
                raise ValueError(f"{name}={size} not divisible by patch {p}")

    @property
    def volume(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)

    @property
    def token_grid(self) -> tuple[int, int, int]:
        pt, ph, pw = self.patch
        return (self.frames // pt, self.height // ph, self.width // pw)

    @property
    def num_tokens(self) -> int:
        t, h, w = self.token_grid
        return t * h * w

    @property
    def patch_dim(self) -> int:
        pt, ph, pw = self.patch
        return pt * ph * pw * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if "patch" in d:
            d["patch"] = tuple(d["patch"])
        return cls(**d)


# ---------------------------------------------------------------- tokens


@dataclass(frozen=True)
class TokenVolume:
    tokens: np.ndarray
    grid: tuple[int, int, int]
    patch: tuple[int, int, int]
    channels: int

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]


def _patch_reshape(x: np.ndarray, patch) -> np.ndarray:
    b, T, H, W, C = x.shape
    pt, ph, pw = patch
    if T % pt or H % ph or W % pw:
        raise ValueError(f"volume {(T, H, W)} not divisible by patch {tuple(patch)}")
    x = x.reshape(b, T // pt, pt, H // ph, ph, W // pw, pw, C)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, (T // pt) * (H // ph) * (W // pw), pt * ph * pw * C)


def _unpatch_reshape(tokens: np.ndarray, grid, patch, channels) -> np.ndarray:
    b = tokens.shape[0]
    gt, gh, gw = grid
    pt, ph, pw = patch
    x = tokens.reshape(b, gt, gh, gw, pt, ph, pw, channels)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, gt * pt, gh * ph, gw * pw, channels)


def patchify(latent: np.ndarray, cfg: ModelConfig, embed: np.ndarray | None = None) -> TokenVolume:
    """Cut a ``(T, H, W, C)`` volume (or a batch of them) into row-major patch tokens.

    ``embed`` is an optional ``(patch_dim, D)`` linear embedding; without it the
    tokens are the raw patch vectors.
    """
    batched = latent.ndim == 5
    x = latent if batched else latent[None]
    tok = _patch_reshape(x, cfg.patch)
    if embed is not None:
        tok = tok @ embed
    grid = tuple(s // p for s, p in zip(x.shape[1:4], cfg.patch))
    return TokenVolume(tok if batched else tok[0], grid, cfg.patch, x.shape[4])


def unpatchify(tv: TokenVolume, embed: np.ndarray | None = None) -> np.ndarray:
    tok = tv.tokens
    if embed is not None:
        tok = tok @ np.linalg.pinv(embed)
    batched = tok.ndim == 3
    out = _unpatch_reshape(tok if batched else tok[None], tv.grid, tv.patch, tv.channels)
    return out if batched else out[0]


def _sincos(pos: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    if half == 0:
        return np.zeros((len(pos), 0))
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = pos[:, None] * freqs[None]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


def positional_encoding(cfg: ModelConfig) -> np.ndarray:
    """Fixed sinusoidal code over the ``(t, row, col)`` token coordinates."""
    if cfg.pos_encoding == "none":
        return np.zeros((cfg.num_tokens, cfg.dim))
    d = cfg.dim
    dsp = (d // 3) // 2 * 2
    dt = d - 2 * dsp
    gt, gh, gw = cfg.token_grid
    t, r, c = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    return np.concatenate(
        [_sincos(t.reshape(-1).astype(float), dt), _sincos(r.reshape(-1).astype(float), dsp),
         _sincos(c.reshape(-1).astype(float), dsp)], axis=1)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    return _sincos(np.asarray(t, dtype=float) * 1000.0, dim)


# ---------------------------------------------------------------- conditions


@dataclass(frozen=True)
class LocalCondition:
    texts: tuple[LocalText, ...]
    field: AssignmentField


@dataclass(frozen=True)
class ConditionBundle:
    """Global caption feature and/or grounded local texts; ``None`` means dropped."""

    global_feat: np.ndarray | None = None
    locals: LocalCondition | None = None

    @classmethod
    def null(cls) -> "ConditionBundle":
        return cls()

    def without_global(self) -> "ConditionBundle":
        return replace(self, global_feat=None)

    def without_locals(self) -> "ConditionBundle":
        return replace(self, locals=None)

    @property
    def is_null(self) -> bool:
        return self.global_feat is None and self.locals is None


def condition_dropout(cond: ConditionBundle, p_glob: float, p_loc: float,
                      rng: np.random.Generator) -> ConditionBundle:
    """Null the global and local components independently."""
    for p in (p_glob, p_loc):
        if not 0.0 <= p <= 1.0:
            raise ValueError("dropout probabilities must lie in [0, 1]")
    drop_g = rng.random() < p_glob
    drop_l = rng.random() < p_loc
    if drop_g:
        cond = cond.without_global()
    if drop_l:
        cond = cond.without_locals()
    return cond


# ---------------------------------------------------------------- parameters


def _block_names(i: int, laca: bool) -> list[str]:
    names = [f"blocks.{i}.mod.w", f"blocks.{i}.mod.b"]
    branches = ("attn", "cross", "laca") if laca else ("attn", "cross")
    for br in branches:
        names += [f"blocks.{i}.{br}.{p}" for p in "qkvo"]
    names += [f"blocks.{i}.ff.w1", f"blocks.{i}.ff.b1", f"blocks.{i}.ff.w2", f"blocks.{i}.ff.b2"]
    return names


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, p, e, hid = cfg.dim, cfg.patch_dim, cfg.time_dim, cfg.dim * cfg.mlp_ratio
    shapes = {
        "patch.w": (p, d), "patch.b": (d,),
        "time.w1": (e, d), "time.b1": (d,), "time.w2": (d, d), "time.b2": (d,),
        "null_glob": (1, d),
    }
    for i in range(cfg.depth):
        for n in _block_names(i, cfg.laca):
            leaf = n.split(".", 2)[2]
            shapes[n] = {
                "mod.w": (d, 6 * d), "mod.b": (6 * d,),
                "ff.w1": (d, hid), "ff.b1": (hid,), "ff.w2": (hid, d), "ff.b2": (d,),
            }.get(leaf, (d, d))
    shapes.update({"final.mod.w": (d, 2 * d), "final.mod.b": (2 * d,),
                   "final.w": (d, p), "final.b": (p,)})
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, zero_init: bool = True,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Random initialization.

    With ``zero_init`` the modulation, final projection and LACA output
    projection start at zero, so an untrained block is the identity and an
    untrained LACA branch does not perturb the base path.
    """
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            w = np.zeros(shape) if zero_init else rng.standard_normal(shape) * 0.1
        elif name == "null_glob":
            w = rng.standard_normal(shape)
        else:
            w = rng.standard_normal(shape) / np.sqrt(shape[0])
            if zero_init and (name.endswith("mod.w") or name == "final.w" or name.endswith("laca.o")):
                w = np.zeros(shape)
        out[name] = np.ascontiguousarray(w, dtype=dtype)
    return out


def trainable_names(cfg: ModelConfig, mode: str) -> list[str]:
    """``"all"`` trains everything; ``"laca"`` only the LACA projections."""
    names = list(param_shapes(cfg))
    if mode == "all":
        return names
    if mode == "laca":
        if not cfg.laca:
            raise ValueError("model has no LACA branch to train")
        return [n for n in names if ".laca." in n]
    raise ValueError(f"unknown trainable mode {mode!r}")


# ---------------------------------------------------------------- layers


def _ln(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xh = xc * inv
    return xh, (xh, inv)


def _ln_back(dxh, cache):
    xh, inv = cache
    return inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                  - xh * (dxh * xh).mean(axis=-1, keepdims=True))


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _silu_back(dy, x, s):
    return dy * s * (1.0 + x * (1.0 - s))


def _gelu(x):
    th = np.tanh(_GELU_K * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + th), th


def _gelu_back(dy, x, th):
    dth = (1.0 - th * th) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * dth)


def _attn_w(params, prefix):
    return {k: params[f"{prefix}.{k}"] for k in "qkvo"}


# ---------------------------------------------------------------- model


class DiT:
    """Parameters, forward pass and hand-derived backward pass."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        shapes = param_shapes(cfg)
        missing = set(shapes) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:5]}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = params
        self._pos = positional_encoding(cfg)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, zero_init: bool = True,
               dtype=np.float32) -> "DiT":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), zero_init, dtype))

    @property
    def dtype(self):
        return self.params["patch.w"].dtype

    def without_laca(self) -> "DiT":
        """Same weights with the LACA branch removed."""
        cfg = replace(self.cfg, laca=False)
        keep = param_shapes(cfg)
        return DiT(cfg, {k: v for k, v in self.params.items() if k in keep})

    def with_lam(self, lam: float) -> "DiT":
        return DiT(replace(self.cfg, lam=lam), self.params)

    # -- conditions

    def _check_cond(self, cond: ConditionBundle):
        if cond.locals is not None and cond.locals.field.grid != self.cfg.token_grid:
            raise ValueError(f"condition grid {cond.locals.field.grid} does not match "
                             f"model token grid {self.cfg.token_grid}")
        if cond.global_feat is not None and np.asarray(cond.global_feat).shape[1] != self.cfg.dim:
            raise ValueError("global feature width does not match model dim")

    def _pack(self, conds: Sequence[ConditionBundle]):
        dt = self.dtype
        null = self.params["null_glob"]
        globs, null_rows = [], []
        for b, c in enumerate(conds):
            self._check_cond(c)
            if c.global_feat is None:
                globs.append(null)
                null_rows.append(b)
            else:
                globs.append(np.asarray(c.global_feat, dtype=dt))
        lg = max(g.shape[0] for g in globs)
        bsz = len(conds)
        gsrc = np.zeros((bsz, lg, self.cfg.dim), dtype=dt)
        gmask = np.zeros((bsz, 1, lg), dtype=bool)
        for b, g in enumerate(globs):
            gsrc[b, :g.shape[0]] = g
            gmask[b, 0, :g.shape[0]] = True
        if gmask.all():
            gmask = None
        lpack = None
        if self.cfg.laca:
            fields = [c.locals.field if c.locals is not None else
                      AssignmentField.all_global(self.cfg.token_grid) for c in conds]
            texts = [c.locals.texts if c.locals is not None else () for c in conds]
            lpack = pack_laca(fields, texts, globs, dtype=dt)
        return gsrc, gmask, lpack, null_rows

    # -- forward

    def forward(self, x: np.ndarray, t, conds: Sequence[ConditionBundle] | ConditionBundle,
                return_cache: bool = False):
        """Velocity prediction for a batch ``x`` of shape ``(B, T, H, W, C)``.

        A single volume with a single bundle is accepted as well.
        """
        p, cfg = self.params, self.cfg
        single = x.ndim == 4
        if single:
            x = x[None]
        if isinstance(conds, ConditionBundle):
            conds = [conds] * x.shape[0]
        if x.shape[1:] != cfg.volume:
            raise ValueError(f"input volume {x.shape[1:]} does not match config {cfg.volume}")
        if len(conds) != x.shape[0]:
            raise ValueError("need one condition bundle per batch element")
        dt = self.dtype
        x = x.astype(dt, copy=False)
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        d = cfg.dim
        gsrc, gmask, lpack, null_rows = self._pack(conds)

        tok = _patch_reshape(x, cfg.patch)
        z = tok @ p["patch.w"] + p["patch.b"] + self._pos.astype(dt)
        temb = timestep_embedding(t, cfg.time_dim).astype(dt)
        h1 = temb @ p["time.w1"] + p["time.b1"]
        a1, s1 = _silu(h1)
        c = a1 @ p["time.w2"] + p["time.b2"]
        sc, ssc = _silu(c)

        caches = []
        lam = cfg.lam
        for i in range(cfg.depth):
            pre = f"blocks.{i}"
            m = sc @ p[f"{pre}.mod.w"] + p[f"{pre}.mod.b"]
            sh1, sc1, g1, sh2, sc2, g2 = (m[:, k * d:(k + 1) * d][:, None] for k in range(6))
            n1, ln1 = _ln(z)
            u1 = n1 * (1 + sc1) + sh1
            a, ac = attend(u1, u1, _attn_w(p, f"{pre}.attn"), cfg.heads)
            z1 = z + g1 * a
            n2, ln2 = _ln(z1)
            co, cc = attend(n2, gsrc, _attn_w(p, f"{pre}.cross"), cfg.heads, mask=gmask)
            if cfg.laca:
                lo, lc = attend(n2, lpack.src, _attn_w(p, f"{pre}.laca"), cfg.heads,
                                mask=lpack.mask, scale=lpack.scale)
                z2 = z1 + ((1.0 - lam) * co + lam * lo)
            else:
                lo, lc = None, None
                z2 = z1 + co
            n3, ln3 = _ln(z2)
            u3 = n3 * (1 + sc2) + sh2
            f1 = u3 @ p[f"{pre}.ff.w1"] + p[f"{pre}.ff.b1"]
            gf, th = _gelu(f1)
            f = gf @ p[f"{pre}.ff.w2"] + p[f"{pre}.ff.b2"]
            z = z2 + g2 * f
            if return_cache:
                caches.append(dict(n1=n1, ln1=ln1, sc1=sc1, u1=u1, a=a, ac=ac, g1=g1, ln2=ln2,
                                   co=co, cc=cc, lo=lo, lc=lc, n3=n3, ln3=ln3, sc2=sc2, u3=u3,
                                   f1=f1, th=th, gf=gf, f=f, g2=g2))

        mf = sc @ p["final.mod.w"] + p["final.mod.b"]
        shf, scf = mf[:, :d][:, None], mf[:, d:][:, None]
        nf, lnf = _ln(z)
        uf = nf * (1 + scf) + shf
        out_tok = uf @ p["final.w"] + p["final.b"]
        out = _unpatch_reshape(out_tok, cfg.token_grid, cfg.patch, cfg.channels)
        if single:
            out = out[0]
        if not return_cache:
            return out
        cache = dict(tok=tok, temb=temb, h1=h1, s1=s1, a1=a1, c=c, ssc=ssc, sc=sc, blocks=caches,
                     nf=nf, lnf=lnf, scf=scf, uf=uf, null_rows=null_rows, gsrc=gsrc, lpack=lpack,
                     single=single)
        return out, cache

    # -- backward

    def backward(self, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
        """Parameter gradients given ``dL/d(out)``."""
        p, cfg = self.params, self.cfg
        d = cfg.dim
        if cache["single"]:
            dout = dout[None]
        g: dict[str, np.ndarray] = {}
        dtok = _patch_reshape(dout.astype(self.dtype, copy=False), cfg.patch)
        uf = cache["uf"]
        bsz = uf.shape[0]
        g["final.w"] = uf.reshape(-1, d).T @ dtok.reshape(-1, dtok.shape[-1])
        g["final.b"] = dtok.sum(axis=(0, 1))
        duf = dtok @ p["final.w"].T
        dscf = (duf * cache["nf"]).sum(axis=1)
        dshf = duf.sum(axis=1)
        dz = _ln_back(duf * (1 + cache["scf"]), cache["lnf"])
        dmf = np.concatenate([dshf, dscf], axis=1)
        sc = cache["sc"]
        g["final.mod.w"] = sc.T @ dmf
        g["final.mod.b"] = dmf.sum(axis=0)
        dsc = dmf @ p["final.mod.w"].T

        dgsrc = np.zeros_like(cache["gsrc"])
        dlsrc = None if cache["lpack"] is None else np.zeros_like(cache["lpack"].src)
        lam = cfg.lam
        for i in reversed(range(cfg.depth)):
            pre = f"blocks.{i}"
            k = cache["blocks"][i]
            # feed-forward
            dz2 = dz.copy()
            dfo = dz * k["g2"]
            dg2 = (dz * k["f"]).sum(axis=1)
            g[f"{pre}.ff.w2"] = k["gf"].reshape(-1, k["gf"].shape[-1]).T @ dfo.reshape(-1, d)
            g[f"{pre}.ff.b2"] = dfo.sum(axis=(0, 1))
            dgf = dfo @ p[f"{pre}.ff.w2"].T
            df1 = _gelu_back(dgf, k["f1"], k["th"])
            g[f"{pre}.ff.w1"] = k["u3"].reshape(-1, d).T @ df1.reshape(-1, df1.shape[-1])
            g[f"{pre}.ff.b1"] = df1.sum(axis=(0, 1))
            du3 = df1 @ p[f"{pre}.ff.w1"].T
            dsc2 = (du3 * k["n3"]).sum(axis=1)
            dsh2 = du3.sum(axis=1)
            dz2 += _ln_back(du3 * (1 + k["sc2"]), k["ln3"])
            # blended cross-attention
            dz1 = dz2.copy()
            if cfg.laca:
                dco = (1.0 - lam) * dz2
                dlo = lam * dz2
                dn2_l, dls, gl = attend_backward(dlo, k["lc"], _attn_w(p, f"{pre}.laca"))
                for q in "qkvo":
                    g[f"{pre}.laca.{q}"] = gl[q]
                dlsrc += dls
            else:
                dco = dz2
                dn2_l = 0.0
            dn2_c, dgs, gc = attend_backward(dco, k["cc"], _attn_w(p, f"{pre}.cross"))
            for q in "qkvo":
                g[f"{pre}.cross.{q}"] = gc[q]
            dgsrc += dgs
            dz1 += _ln_back(dn2_c + dn2_l, k["ln2"])
            # self-attention
            dz0 = dz1.copy()
            da = dz1 * k["g1"]
            dg1 = (dz1 * k["a"]).sum(axis=1)
            dq_in, dkv_in, ga = attend_backward(da, k["ac"], _attn_w(p, f"{pre}.attn"))
            for q in "qkvo":
                g[f"{pre}.attn.{q}"] = ga[q]
            du1 = dq_in + dkv_in
            dsc1 = (du1 * k["n1"]).sum(axis=1)
            dsh1 = du1.sum(axis=1)
            dz0 += _ln_back(du1 * (1 + k["sc1"]), k["ln1"])
            dz = dz0
            dm = np.concatenate([dsh1, dsc1, dg1, dsh2, dsc2, dg2], axis=1)
            g[f"{pre}.mod.w"] = sc.T @ dm
            g[f"{pre}.mod.b"] = dm.sum(axis=0)
            dsc = dsc + dm @ p[f"{pre}.mod.w"].T

        g["patch.w"] = cache["tok"].reshape(-1, cache["tok"].shape[-1]).T @ dz.reshape(-1, d)
        g["patch.b"] = dz.sum(axis=(0, 1))
        dc = _silu_back(dsc, cache["c"], cache["ssc"])
        g["time.w2"] = cache["a1"].T @ dc
        g["time.b2"] = dc.sum(axis=0)
        dh1 = _silu_back(dc @ p["time.w2"].T, cache["h1"], cache["s1"])
        g["time.w1"] = cache["temb"].T @ dh1
        g["time.b1"] = dh1.sum(axis=0)

        dnull = np.zeros_like(p["null_glob"])
        for b in cache["null_rows"]:
            dnull += dgsrc[b, :1]
            if dlsrc is not None:
                dnull += dlsrc[b, :1]
        g["null_glob"] = dnull
        return {name: g[name].astype(self.dtype, copy=False) for name in param_shapes(cfg)}


# ---------------------------------------------------------------- objective


def interpolate(x1: np.ndarray, x0: np.ndarray, t) -> np.ndarray:
    """``X_t = t X1 + (1 - t) X0`` with ``t`` scalar or per batch element."""
    t = np.asarray(t, dtype=x1.dtype)
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x1.ndim - 1))
    return t * x1 + (1 - t) * x0


def flow_matching_loss(model, x1: np.ndarray, x0: np.ndarray, t, cond) -> float:
    """Mean squared error between the model velocity and ``X1 - X0``.

    ``model`` is a :class:`DiT` or any callable ``(x_t, t, cond) -> velocity``.
    """
    if x1.shape != x0.shape:
        raise ValueError(f"shape mismatch {x1.shape} vs {x0.shape}")
    xt = interpolate(x1, x0, t)
    fwd = model.forward if isinstance(model, DiT) else model
    v = fwd(xt, t, cond)
    return float(np.mean((np.asarray(v, dtype=np.float64) - (x1 - x0)) ** 2))


def loss_and_grads(model: DiT, x1: np.ndarray, x0: np.ndarray, t, conds):
    if x1.shape != x0.shape:
        raise ValueError(f"shape mismatch {x1.shape} vs {x0.shape}")
    xt = interpolate(x1, x0, t)
    v, cache = model.forward(xt, t, conds, return_cache=True)
    r = v - (x1 - x0).astype(v.dtype)
    loss = float(np.mean(r.astype(np.float64) ** 2))
    grads = model.backward((2.0 / r.size) * r, cache)
    return loss, grads


# ---------------------------------------------------------------- training


@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
               names: Iterable[str]):
        self.step += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step
        c2 = 1 - b2 ** self.step
        for n in names:
            gr = grads[n]
            m = self.m.setdefault(n, np.zeros_like(params[n]))
            v = self.v.setdefault(n, np.zeros_like(params[n]))
            m *= b1
            m += (1 - b1) * gr
            v *= b2
            v += (1 - b2) * gr * gr
            if self.lr == 0:
                continue
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[n] -= (self.lr * (upd + self.weight_decay * params[n])).astype(params[n].dtype)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    p_drop_glob: float = 0.8
    p_drop_loc: float = 0.1
    trainable: str = "all"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Example:
    """One training pair: clean latent and its full condition."""

    x1: np.ndarray
    cond: ConditionBundle


def clip_by_global_norm(grads: dict[str, np.ndarray], names: Sequence[str], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(grads[n].astype(np.float64) ** 2)) for n in names)))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for n in names:
            grads[n] = grads[n] * np.asarray(s, dtype=grads[n].dtype)
    return norm


def train_step(model: DiT, batch: Sequence[Example], opt: AdamW, hyper: TrainHyper,
               rng: np.random.Generator) -> dict:
    """One flow-matching update; only ``hyper.trainable`` parameters move."""
    names = trainable_names(model.cfg, hyper.trainable)
    x1 = np.stack([ex.x1 for ex in batch]).astype(model.dtype)
    t = rng.random(len(batch))
    x0 = rng.standard_normal(x1.shape).astype(model.dtype)
    conds = [condition_dropout(ex.cond, hyper.p_drop_glob, hyper.p_drop_loc, rng) for ex in batch]
    loss, grads = loss_and_grads(model, x1, x0, t, conds)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {opt.step + 1}")
    norm = clip_by_global_norm(grads, names, hyper.grad_clip)
    opt.lr = hyper.lr
    opt.weight_decay = hyper.weight_decay
    opt.update(model.params, grads, names)
    return {"loss": loss, "grad_norm": norm, "step": opt.step}


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: DiT, extra: Mapping | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(), "extra": dict(extra or {})}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)),
                 **{f"param/{k}": v for k, v in model.params.items()})


def load_checkpoint(path: str | Path) -> tuple[DiT, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    cfg = ModelConfig.from_dict(meta["config"])
    return DiT(cfg, params), meta.get("extra", {})
