"""The surface transformer encoder: patch embedding, positional embedding,
prediction token, pre-norm MHSA/FFN blocks, prediction head, masked-patch
machinery, and the confound embedder.

All forward passes have hand-derived backward counterparts operating on
batched (B, T, D) arrays; the public single-example API wraps batch size 1.
Linear layers carry no bias (LayerNorm affines provide the shifts), which
is what reconciles instantiated parameter totals with the published model
sizes. The masked-patch decoder and mask token are pretraining accessories,
created on demand and excluded from the headline parameter count.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ParseError, ShapeError, StateError, ValidationError
from .patching import PatchSequence

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class SiTConfig:
    layers: int = 12
    heads: int = 3
    dim: int = 192
    mlp: int = 768
    patches: int = 320
    patch_vertices: int = 153
    channels: int = 4
    dropout_embed: float = 0.0
    dropout_attn: float = 0.0
    dropout_ffn: float = 0.0
    head_kind: str = "regression"      # "regression" | "classification"
    n_classes: int = 2
    head_hidden: int = 0               # 0 = linear head
    deconfound: bool = False

    def __post_init__(self):
        if min(self.layers, self.heads, self.dim, self.mlp, self.patches,
               self.patch_vertices, self.channels) <= 0:
            raise ValidationError("all config dimensions must be positive")
        if self.dim % self.heads:
            raise ValidationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.head_kind not in ("regression", "classification"):
            raise ValidationError(f"unknown head_kind {self.head_kind!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_width(self) -> int:
        return self.patch_vertices * self.channels

    @property
    def tokens(self) -> int:
        return self.patches + 1

    @property
    def n_outputs(self) -> int:
        return 1 if self.head_kind == "regression" else self.n_classes


# built-in profiles; dropout values for the hcp profile follow the
# regularisation used for the 115-channel task
PROFILES: dict[str, SiTConfig] = {
    "sit-tiny-ico": SiTConfig(),
    "sit-small-ico": SiTConfig(heads=6, dim=384, mlp=1536),
    "sit-tiny-hcp": SiTConfig(channels=115, dropout_embed=0.5, dropout_ffn=0.3),
    "sit-tiny-quad": SiTConfig(patches=177, patch_vertices=50,
                               head_kind="classification", n_classes=2),
    "sit-tiny-narrow": SiTConfig(layers=4, heads=2, dim=64, mlp=256, channels=1),
}


def param_shapes(config: SiTConfig, include_mpp: bool = False) -> dict[str, tuple]:
    """Registry of parameter names and shapes, in checkpoint order."""
    d, w = config.dim, config.patch_width
    shapes: dict[str, tuple] = {
        "embed.w": (d, w),
        "token": (d,),
        "pos": (config.tokens, d),
    }
    for l in range(config.layers):
        p = f"layer{l}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn1.w"] = (config.mlp, d)
        shapes[p + "ffn2.w"] = (d, config.mlp)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    if config.head_hidden:
        shapes["head.hidden.w"] = (config.head_hidden, d)
        shapes["head.w"] = (config.n_outputs, config.head_hidden)
    else:
        shapes["head.w"] = (config.n_outputs, d)
    if config.deconfound:
        shapes["deconfound.fc.w"] = (d, 1)
        shapes["deconfound.fc.b"] = (d,)
    if include_mpp:
        shapes["mask_token"] = (d,)
        shapes["mpp_decoder.w"] = (w, d)
        shapes["mpp_decoder.b"] = (w,)
    return shapes


def parameter_count(config: SiTConfig, include_mpp: bool = False) -> int:
    """Exact arithmetic total; matches the instantiated model."""
    return sum(int(np.prod(s)) for s in param_shapes(config, include_mpp).values())


@dataclass
class SiTModel:
    config: SiTConfig
    params: dict[str, np.ndarray]
    # confound batch-norm running statistics (state, not parameters)
    bn_mean: float = 0.0
    bn_var: float = 1.0
    bn_initialized: bool = False

    @property
    def has_mpp(self) -> bool:
        return "mask_token" in self.params

    @property
    def dtype(self):
        return self.params["embed.w"].dtype

    def param_total(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "SiTModel":
        clone = SiTModel(self.config,
                         {k: v.astype(dtype) for k, v in self.params.items()},
                         self.bn_mean, self.bn_var, self.bn_initialized)
        return clone

    def copy(self) -> "SiTModel":
        return SiTModel(self.config,
                        {k: v.copy() for k, v in self.params.items()},
                        self.bn_mean, self.bn_var, self.bn_initialized)


def init_model(config: SiTConfig, rng: np.random.Generator,
               dtype=nn.DEFAULT_DTYPE, with_mpp: bool = False) -> SiTModel:
    """Truncated-normal weights (std 0.02, clipped at 2 std); LayerNorm
    gains start at 1, shifts and all bias vectors at 0."""
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config, include_mpp=with_mpp).items():
        if name.endswith(("ln1.g", "ln2.g", "final_ln.g")):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith((".b", "ln1.b", "ln2.b")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = nn.trunc_normal(shape, rng, dtype=dtype)
    return SiTModel(config, params)


def ensure_mpp(model: SiTModel, rng: np.random.Generator) -> None:
    """Lazily attach the mask token and reconstruction decoder."""
    if model.has_mpp:
        return
    d, w = model.config.dim, model.config.patch_width
    dt = model.dtype
    model.params["mask_token"] = nn.trunc_normal((d,), rng, dtype=dt)
    model.params["mpp_decoder.w"] = nn.trunc_normal((w, d), rng, dtype=dt)
    model.params["mpp_decoder.b"] = np.zeros(w, dtype=dt)


def reset_head(model: SiTModel, rng: np.random.Generator) -> None:
    """Re-initialize the prediction head (warm start from pretraining keeps
    encoder and embeddings)."""
    for name in model.params:
        if name.startswith("head."):
            model.params[name] = nn.trunc_normal(model.params[name].shape, rng,
                                                 dtype=model.dtype)


@dataclass
class AttentionStack:
    """Per-layer per-head attention matrices, shape (L, heads, T, T); every
    row is a softmax output and sums to 1."""
    matrices: np.ndarray

    @property
    def layers(self) -> int:
        return self.matrices.shape[0]

    @property
    def heads(self) -> int:
        return self.matrices.shape[1]

    def matrix(self, layer: int, head: int) -> np.ndarray:
        return self.matrices[layer, head]


# ---------------------------------------------------------------------------
# confound embedding


def deconfound_embed_batch(confounds: np.ndarray, model: SiTModel,
                           training: bool):
    """Batch-normalize the scalar confound, project 1 -> D. Returns the
    (B, D) embedding and the normalized scalars (needed for backward)."""
    cfg = model.config
    if not cfg.deconfound:
        raise StateError("model config has deconfound disabled")
    c = np.asarray(confounds, dtype=np.float64).reshape(-1)
    if training:
        mu = float(c.mean())
        var = float(c.var())
        model.bn_mean = ((1 - BN_MOMENTUM) * model.bn_mean + BN_MOMENTUM * mu
                         if model.bn_initialized else mu)
        model.bn_var = ((1 - BN_MOMENTUM) * model.bn_var + BN_MOMENTUM * var
                        if model.bn_initialized else var)
        model.bn_initialized = True
    else:
        if not model.bn_initialized:
            raise StateError("confound batch-norm statistics not initialized")
        mu, var = model.bn_mean, model.bn_var
    z = ((c - mu) / np.sqrt(var + BN_EPS)).astype(model.dtype)
    w = model.params["deconfound.fc.w"]   # (D, 1)
    b = model.params["deconfound.fc.b"]
    return z[:, None] * w[:, 0][None, :] + b, z


def deconfound_embed(confound: float, model: SiTModel,
                     training: bool = False) -> np.ndarray:
    """Single-scalar view; a training batch of one normalizes to zero, so
    the result is exactly the bias vector."""
    vec, _ = deconfound_embed_batch(np.array([confound]), model, training)
    return vec[0]


# ---------------------------------------------------------------------------
# masked patch corruption


@dataclass
class MppCorruption:
    """Outcome of corrupting one embedded sequence.

    kind[i]: 0 = untouched or kept, 1 = replaced by the mask token,
    2 = swapped for original embedding source[i]. mask marks every selected
    position (loss is computed there regardless of corruption kind).
    """
    corrupted: np.ndarray
    mask: np.ndarray
    kind: np.ndarray
    source: np.ndarray


def mpp_corrupt(embedded: np.ndarray, ratio: float = 0.5,
                rng: np.random.Generator | None = None) -> MppCorruption:
    """Corrupt round(ratio*N) patch embeddings: 80% mask token, 10% random
    original embedding from the sequence, 10% kept unchanged."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"corruption ratio {ratio} outside (0, 1]")
    n = embedded.shape[0]
    count = int(np.floor(ratio * n + 0.5))
    if count == 0:
        raise ValueError(f"corruption ratio {ratio} selects zero of {n} patches")
    selected = rng.choice(n, size=count, replace=False)
    u = rng.random(count)
    swap_src = rng.integers(0, n, size=count)

    mask = np.zeros(n, dtype=bool)
    mask[selected] = True
    kind = np.zeros(n, dtype=np.int8)
    source = np.arange(n, dtype=np.int64)
    kind[selected[u < 0.8]] = 1
    swap_pos = selected[(u >= 0.8) & (u < 0.9)]
    kind[swap_pos] = 2
    source[swap_pos] = swap_src[(u >= 0.8) & (u < 0.9)]

    corrupted = embedded.copy()
    corrupted[kind == 2] = embedded[source[kind == 2]]
    return MppCorruption(corrupted, mask, kind, source)


def _apply_mask_token(corr: MppCorruption, mask_token: np.ndarray) -> np.ndarray:
    out = corr.corrupted
    out[corr.kind == 1] = mask_token
    return out


def mpp_loss(decoded: np.ndarray, target: PatchSequence | np.ndarray,
             mask: np.ndarray) -> float:
    """MSE over masked rows only, averaged over those rows' V*C entries."""
    t = target.data if isinstance(target, PatchSequence) else target
    if decoded.shape != t.shape:
        raise ShapeError(f"decoded {decoded.shape} vs target {t.shape}")
    if not mask.any():
        raise ValueError("mpp_loss: empty mask")
    diff = decoded[mask] - t[mask]
    return float(np.mean(diff.astype(np.float64) ** 2))


# ---------------------------------------------------------------------------
# forward / backward


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _block_forward(x, l, model, rng, training, cache_out):
    cfg = model.config
    p = model.params
    pre = f"layer{l}."
    y1 = nn.layernorm_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    q = _split_heads(y1 @ p[pre + "wq"].T, cfg.heads)
    k = _split_heads(y1 @ p[pre + "wk"].T, cfg.heads)
    v = _split_heads(y1 @ p[pre + "wv"].T, cfg.heads)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    att = nn.softmax_rows(q @ k.transpose(0, 1, 3, 2) * scale)
    att_d, mask_a = nn.dropout(att, cfg.dropout_attn, rng, training)
    o = _merge_heads(att_d @ v)
    z = o @ p[pre + "wo"].T + x
    y2 = nn.layernorm_forward(z, p[pre + "ln2.g"], p[pre + "ln2.b"])
    a1 = y2 @ p[pre + "ffn1.w"].T
    g = nn.gelu(a1)
    gd, mask_f = nn.dropout(g, cfg.dropout_ffn, rng, training)
    out = gd @ p[pre + "ffn2.w"].T + z
    if cache_out is not None:
        cache_out.append(dict(x=x, y1=y1, q=q, k=k, v=v, att=att, mask_a=mask_a,
                              o=o, z=z, y2=y2, a1=a1, gd=gd, mask_f=mask_f))
    return out, att


def _block_backward(dout, l, model, c, grads):
    cfg = model.config
    p = model.params
    pre = f"layer{l}."
    d = cfg.dim

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    # FFN branch
    dgd = dout @ p[pre + "ffn2.w"]
    grads[pre + "ffn2.w"] = flat(dout).T @ flat(c["gd"])
    dg = nn.dropout_backward(c["mask_f"], cfg.dropout_ffn, dgd)
    da1 = nn.gelu_backward(c["a1"], dg)
    dy2 = da1 @ p[pre + "ffn1.w"]
    grads[pre + "ffn1.w"] = flat(da1).T @ flat(c["y2"])
    dz, dg2, db2 = nn.layernorm_backward(c["z"], p[pre + "ln2.g"], dy2)
    grads[pre + "ln2.g"] = dg2
    grads[pre + "ln2.b"] = db2
    dz = dz + dout                                  # residual

    # attention branch
    do = dz @ p[pre + "wo"]
    grads[pre + "wo"] = flat(dz).T @ flat(c["o"])
    doh = _split_heads(do, cfg.heads)
    att_d_mask = c["mask_a"]
    datt_d = doh @ c["v"].transpose(0, 1, 3, 2)
    att_d = (c["att"] * att_d_mask / (1.0 - cfg.dropout_attn)
             if att_d_mask is not None else c["att"])
    dv = att_d.transpose(0, 1, 3, 2) @ doh
    datt = nn.dropout_backward(att_d_mask, cfg.dropout_attn, datt_d)
    ds = nn.softmax_rows_backward(c["att"], datt) * (1.0 / np.sqrt(cfg.head_dim))
    dq = ds @ c["k"]
    dk = ds.transpose(0, 1, 3, 2) @ c["q"]
    dqm, dkm, dvm = (_merge_heads(a) for a in (dq, dk, dv))
    dy1 = dqm @ p[pre + "wq"] + dkm @ p[pre + "wk"] + dvm @ p[pre + "wv"]
    grads[pre + "wq"] = flat(dqm).T @ flat(c["y1"])
    grads[pre + "wk"] = flat(dkm).T @ flat(c["y1"])
    grads[pre + "wv"] = flat(dvm).T @ flat(c["y1"])
    dx, dg1, db1 = nn.layernorm_backward(c["x"], p[pre + "ln1.g"], dy1)
    grads[pre + "ln1.g"] = dg1
    grads[pre + "ln1.b"] = db1
    return dx + dz                                   # residual


def _encode(emb: np.ndarray, data: np.ndarray, model: SiTModel, confounds,
            rng, training: bool, corruptions, want_cache: bool):
    """Shared trunk: dropout + confound + token/pos, then all blocks and the
    final LayerNorm. emb is the (possibly corrupted) (B, N, D) embedding."""
    cfg = model.config
    p = model.params
    b = emb.shape[0]
    emb_d, mask_e = nn.dropout(emb, cfg.dropout_embed, rng, training)
    zc = None
    if confounds is not None:
        dvec, zc = deconfound_embed_batch(confounds, model, training)
        emb_d = emb_d + dvec[:, None, :]
    token = np.broadcast_to(p["token"], (b, 1, cfg.dim))
    seq = np.concatenate([token, emb_d], axis=1) + p["pos"]

    cache = dict(data=data, mask_e=mask_e, zc=zc, blocks=[],
                 corruptions=corruptions) if want_cache else None
    stacks = np.empty((b, cfg.layers, cfg.heads, cfg.tokens, cfg.tokens),
                      dtype=model.dtype)
    h = seq
    for l in range(cfg.layers):
        h, att = _block_forward(h, l, model, rng, training,
                                cache["blocks"] if want_cache else None)
        stacks[:, l] = att
    final = nn.layernorm_forward(h, p["final_ln.g"], p["final_ln.b"])
    if want_cache:
        cache["pre_final"] = h
        cache["final"] = final
    return final, stacks, cache


def _check_batch(data: np.ndarray, cfg: SiTConfig) -> None:
    if data.ndim != 3 or data.shape[1] != cfg.patches \
            or data.shape[2] != cfg.patch_width:
        raise ShapeError(f"batch {data.shape} does not match config "
                         f"({cfg.patches}, {cfg.patch_width})")


def forward_batch(data: np.ndarray, model: SiTModel,
                  confounds: np.ndarray | None = None,
                  rng: np.random.Generator | None = None,
                  training: bool = False,
                  want_cache: bool = False):
    """Run the encoder + head on a (B, N, V*C) batch.

    Returns (head_output, stacks, cache); head_output is (B,) for
    regression, (B, k) logits for classification. stacks is (B, L, h, T, T).
    """
    cfg = model.config
    p = model.params
    _check_batch(data, cfg)
    x = data.astype(model.dtype, copy=False)
    emb = x @ p["embed.w"].T                      # (B, N, D)
    final, stacks, cache = _encode(emb, x, model, confounds, rng, training,
                                   None, want_cache)
    row0 = final[:, 0, :]
    if cfg.head_hidden:
        hh_in = row0 @ p["head.hidden.w"].T
        hh = nn.gelu(hh_in)
        out = hh @ p["head.w"].T
        if want_cache:
            cache["hh_in"] = hh_in
            cache["hh"] = hh
    else:
        out = row0 @ p["head.w"].T
    if cfg.head_kind == "regression":
        out = out[:, 0]
    return out, stacks, cache


def mpp_forward_batch(data: np.ndarray, model: SiTModel, ratio: float,
                      rng: np.random.Generator,
                      training: bool = True,
                      want_cache: bool = False):
    """Corrupt each example's patch embeddings, encode, and decode the
    reconstructions. Returns (decoded (B, N, V*C), corruptions, stacks,
    cache)."""
    cfg = model.config
    p = model.params
    _check_batch(data, cfg)
    if not model.has_mpp:
        raise StateError("model has no mask token / decoder; call ensure_mpp")
    x = data.astype(model.dtype, copy=False)
    emb = x @ p["embed.w"].T
    corrs = [mpp_corrupt(emb[i], ratio, rng) for i in range(emb.shape[0])]
    emb_c = np.stack([_apply_mask_token(c, p["mask_token"]) for c in corrs])
    final, stacks, cache = _encode(emb_c, x, model, None, rng, training,
                                   corrs, want_cache)
    decoded = final[:, 1:, :] @ p["mpp_decoder.w"].T + p["mpp_decoder.b"]
    return decoded, corrs, stacks, cache


def backward_batch(dout: np.ndarray, model: SiTModel, cache: dict) -> dict:
    """Gradients of a scalar loss for every parameter, given d(head output)
    or, in masked-pretraining mode, d(decoded)."""
    cfg = model.config
    p = model.params
    grads: dict[str, np.ndarray] = {}
    final = cache["final"]
    b = final.shape[0]

    if cache["corruptions"] is not None:
        ddec = dout                                   # (B, N, W)
        grads["mpp_decoder.w"] = ddec.reshape(-1, cfg.patch_width).T \
            @ final[:, 1:, :].reshape(-1, cfg.dim)
        grads["mpp_decoder.b"] = ddec.reshape(-1, cfg.patch_width).sum(axis=0)
        dfinal = np.zeros_like(final)
        dfinal[:, 1:, :] = ddec @ p["mpp_decoder.w"]
    else:
        if cfg.head_kind == "regression":
            dout = dout[:, None]
        row0 = final[:, 0, :]
        if cfg.head_hidden:
            dhh = dout @ p["head.w"]
            grads["head.w"] = dout.T @ cache["hh"]
            dhh_in = nn.gelu_backward(cache["hh_in"], dhh)
            grads["head.hidden.w"] = dhh_in.T @ row0
            drow0 = dhh_in @ p["head.hidden.w"]
        else:
            grads["head.w"] = dout.T @ row0
            drow0 = dout @ p["head.w"]
        dfinal = np.zeros_like(final)
        dfinal[:, 0, :] = drow0

    dh, dgF, dbF = nn.layernorm_backward(cache["pre_final"], p["final_ln.g"],
                                         dfinal)
    grads["final_ln.g"] = dgF
    grads["final_ln.b"] = dbF
    for l in range(cfg.layers - 1, -1, -1):
        dh = _block_backward(dh, l, model, cache["blocks"][l], grads)

    grads["pos"] = dh.sum(axis=0)
    grads["token"] = dh[:, 0, :].sum(axis=0)
    demb_d = dh[:, 1:, :]

    if cache["zc"] is not None:
        gvec = demb_d.sum(axis=1)                     # (B, D)
        zc = cache["zc"]
        grads["deconfound.fc.w"] = (gvec * zc[:, None]).sum(axis=0)[:, None]
        grads["deconfound.fc.b"] = gvec.sum(axis=0)
    demb = nn.dropout_backward(cache["mask_e"], cfg.dropout_embed, demb_d)

    corrs = cache["corruptions"]
    if corrs is not None:
        dmask_token = np.zeros(cfg.dim, dtype=demb.dtype)
        dorig = np.zeros_like(demb)
        for i, c in enumerate(corrs):
            keep = c.kind == 0
            dorig[i, keep] = demb[i, keep]
            dmask_token += demb[i, c.kind == 1].sum(axis=0)
            swap = c.kind == 2
            np.add.at(dorig[i], c.source[swap], demb[i, swap])
        grads["mask_token"] = dmask_token
        demb = dorig

    grads["embed.w"] = demb.reshape(-1, cfg.dim).T \
        @ cache["data"].reshape(-1, cfg.patch_width)
    # parameters untouched by this pass still get zero-filled gradients
    for name, par in p.items():
        if name not in grads:
            grads[name] = np.zeros_like(par)
    return grads


# ---------------------------------------------------------------------------
# public single-example ops


def embed_sequence(seq: PatchSequence, model: SiTModel,
                   confound: float | None = None,
                   rng: np.random.Generator | None = None,
                   training: bool = False) -> np.ndarray:
    """Token row stacked over embedded patches, plus positional embedding;
    returns (N+1, D)."""
    cfg = model.config
    p = model.params
    if seq.data.shape != (cfg.patches, cfg.patch_width):
        raise ShapeError(f"sequence {seq.data.shape} does not match config")
    emb = seq.data.astype(model.dtype) @ p["embed.w"].T
    emb, _ = nn.dropout(emb, cfg.dropout_embed, rng, training)
    if confound is not None:
        vec, _ = deconfound_embed_batch(np.array([confound]), model, training)
        emb = emb + vec[0]
    return np.concatenate([p["token"][None, :], emb], axis=0) + p["pos"]


def mhsa_forward(x: np.ndarray, model: SiTModel, layer: int):
    """One pre-norm multi-head self-attention sublayer with residual
    (eval mode). Returns (Z, A) where A is (heads, T, T)."""
    cfg = model.config
    p = model.params
    pre = f"layer{layer}."
    xb = x[None, :, :]
    y1 = nn.layernorm_forward(xb, p[pre + "ln1.g"], p[pre + "ln1.b"])
    q = _split_heads(y1 @ p[pre + "wq"].T, cfg.heads)
    k = _split_heads(y1 @ p[pre + "wk"].T, cfg.heads)
    v = _split_heads(y1 @ p[pre + "wv"].T, cfg.heads)
    att = nn.softmax_rows(q @ k.transpose(0, 1, 3, 2) / np.sqrt(cfg.head_dim))
    z = _merge_heads(att @ v) @ p[pre + "wo"].T + xb
    return z[0], att[0]


def ffn_forward(z: np.ndarray, model: SiTModel, layer: int) -> np.ndarray:
    """Pre-norm feed-forward sublayer with residual (eval mode)."""
    p = model.params
    pre = f"layer{layer}."
    y2 = nn.layernorm_forward(z, p[pre + "ln2.g"], p[pre + "ln2.b"])
    return nn.gelu(y2 @ p[pre + "ffn1.w"].T) @ p[pre + "ffn2.w"].T + z


def forward(seq: PatchSequence, model: SiTModel,
            confound: float | None = None,
            rng: np.random.Generator | None = None,
            training: bool = False):
    """Full encoder on one sequence. Returns (prediction, AttentionStack);
    prediction is a scalar for regression, a (k,) logit vector otherwise."""
    conf = None if confound is None else np.array([confound])
    out, stacks, _ = forward_batch(seq.data[None, :, :], model, conf, rng,
                                   training)
    pred = float(out[0]) if model.config.head_kind == "regression" else out[0]
    return pred, AttentionStack(stacks[0])


# ---------------------------------------------------------------------------
# checkpoints: <stem>.manifest (text) + <stem>.bin (little-endian float32
# in registry order)


def _config_items(cfg: SiTConfig):
    for f_ in ("layers", "heads", "dim", "mlp", "patches", "patch_vertices",
               "channels", "dropout_embed", "dropout_attn", "dropout_ffn",
               "head_kind", "n_classes", "head_hidden", "deconfound"):
        yield f_, getattr(cfg, f_)


def save_checkpoint(model: SiTModel, stem) -> None:
    stem = str(stem)
    blob = io.BytesIO()
    lines = ["SITCHECKPOINT v1"]
    for key, val in _config_items(model.config):
        lines.append(f"config.{key} = {val}")
    lines.append(f"bn.initialized = {int(model.bn_initialized)}")
    lines.append(f"bn.mean = {model.bn_mean!r}")
    lines.append(f"bn.var = {model.bn_var!r}")
    offset = 0
    for name, par in model.params.items():
        raw = np.ascontiguousarray(par, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in par.shape)
        lines.append(f"tensor {name} {shape} {offset} {len(raw)}")
        blob.write(raw)
        offset += len(raw)
    with open(stem + ".manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(stem + ".bin", "wb") as fh:
        fh.write(blob.getvalue())


def _parse_config(kv: dict[str, str]) -> SiTConfig:
    def conv(key, cast):
        if key not in kv:
            raise ParseError(f"checkpoint manifest missing config.{key}")
        return cast(kv[key])

    return SiTConfig(
        layers=conv("layers", int), heads=conv("heads", int),
        dim=conv("dim", int), mlp=conv("mlp", int),
        patches=conv("patches", int),
        patch_vertices=conv("patch_vertices", int),
        channels=conv("channels", int),
        dropout_embed=conv("dropout_embed", float),
        dropout_attn=conv("dropout_attn", float),
        dropout_ffn=conv("dropout_ffn", float),
        head_kind=conv("head_kind", str),
        n_classes=conv("n_classes", int),
        head_hidden=conv("head_hidden", int),
        deconfound=conv("deconfound", lambda s: s == "True"),
    )


def load_checkpoint(stem) -> SiTModel:
    stem = str(stem)
    with open(stem + ".manifest", "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "SITCHECKPOINT v1":
        raise ParseError(f"{stem}.manifest: bad header")
    kv: dict[str, str] = {}
    tensors: list[tuple[str, tuple, int, int]] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("tensor "):
            _, name, shape_s, off_s, len_s = line.split()
            shape = tuple(int(s) for s in shape_s.split(","))
            tensors.append((name, shape, int(off_s), int(len_s)))
        else:
            key, _, val = line.partition(" = ")
            kv[key.strip()] = val.strip()
    cfg = _parse_config({k[7:]: v for k, v in kv.items()
                         if k.startswith("config.")})
    has_mpp = any(name == "mask_token" for name, *_ in tensors)
    expected = param_shapes(cfg, include_mpp=has_mpp)
    listed = {name: shape for name, shape, _, _ in tensors}
    if listed != expected:
        missing = set(expected) ^ set(listed)
        bad = {n for n in set(expected) & set(listed)
               if expected[n] != listed[n]}
        raise ValidationError(f"checkpoint registry mismatch: "
                              f"missing/extra={sorted(missing)} badshape={sorted(bad)}")
    with open(stem + ".bin", "rb") as fh:
        raw = fh.read()
    params: dict[str, np.ndarray] = {}
    for name, shape, off, nbytes in tensors:
        n_vals = int(np.prod(shape))
        if nbytes != n_vals * 4 or off + nbytes > len(raw):
            raise ValidationError(f"checkpoint tensor {name}: bad extent")
        params[name] = np.frombuffer(raw, dtype="<f4", count=n_vals,
                                     offset=off).reshape(shape).copy()
    model = SiTModel(cfg, params)
    model.bn_initialized = kv.get("bn.initialized", "0") == "1"
    model.bn_mean = float(kv.get("bn.mean", "0.0"))
    model.bn_var = float(kv.get("bn.var", "1.0"))
    return model
