"""Context-gated hybrid regressor: parallel CNN + CNN-ViT branch + clinical enrichment.

The image and its lung mask each pass through a trainable convolution and
are multiplied elementwise (the context gate), so masking mistakes can be
recovered rather than hard-deleting subpleural detail. A parallel CNN
produces a local feature vector; a sequential CNN feeding a small vision
transformer produces a global one. The four clinical values are enriched
by a sparsemax-attentive step encoder, and a two-layer MLP regresses the
concatenation to a standardized decline slope.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore

CLINICAL_DIM = 4
PRIOR_RELAXATION = 1.3
HU_WINDOW = (-1000.0, 400.0)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    gate_channels: int = 8
    gate_kernel: int = 3
    cnn_channels: tuple[int, ...] = (16, 32, 64)
    vit_embed: int = 64
    vit_heads: int = 4
    vit_depth: int = 2
    token_grid: int = 8
    clinical_steps: int = 2
    clinical_hidden: int = 16
    clinical_out: int = 32
    fusion_hidden: int = 64

    def __post_init__(self) -> None:
        down = 2 ** len(self.cnn_channels)
        if self.image_size % down != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by "
                             f"total downsampling {down}")
        if self.image_size // down != self.token_grid:
            raise ValueError(f"token_grid {self.token_grid} inconsistent with "
                             f"image_size/{down} = {self.image_size // down}")
        if self.vit_embed % self.vit_heads != 0:
            raise ValueError(f"vit_embed {self.vit_embed} not divisible by "
                             f"heads {self.vit_heads}")
        if self.gate_kernel % 2 != 1:
            raise ValueError("gate_kernel must be odd")
        if self.clinical_steps < 1 or self.vit_depth < 1:
            raise ValueError("clinical_steps and vit_depth must be >= 1")

    @property
    def n_tokens(self) -> int:
        return self.token_grid ** 2

    @property
    def fused_dim(self) -> int:
        return self.cnn_channels[-1] + self.vit_embed + self.clinical_out

    def to_json(self) -> str:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["cnn_channels"] = tuple(d["cnn_channels"])
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def layer_class(name: str) -> str:
    """Coarse layer family of a parameter, for per-class gradient checks."""
    if name.startswith(("gate.", "local", "seq")):
        return "conv"
    if name.startswith("vit."):
        return "vit"
    if name.startswith("clin."):
        return "clinical"
    if name.startswith("fusion."):
        return "fusion"
    return "other"


# ---------------------------------------------------------------------------
# parameter initialization


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Fresh parameter store for the full model, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    ps = ParamStore()

    def conv(name: str, c_out: int, c_in: int, k: int) -> None:
        std = math.sqrt(2.0 / (c_in * k * k))
        ps.register(f"{name}.w", rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype))
        ps.register(f"{name}.b", np.zeros(c_out, dtype=dtype))

    def dense(name: str, d_in: int, d_out: int) -> None:
        std = math.sqrt(1.0 / d_in)
        ps.register(f"{name}.w", rng.normal(0.0, std, size=(d_in, d_out)).astype(dtype))
        ps.register(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def norm(name: str, dim: int) -> None:
        ps.register(f"{name}.g", np.ones(dim, dtype=dtype))
        ps.register(f"{name}.b", np.zeros(dim, dtype=dtype))

    conv("gate.img", config.gate_channels, 1, config.gate_kernel)
    conv("gate.mask", config.gate_channels, 1, config.gate_kernel)

    c_in = config.gate_channels
    for i, c_out in enumerate(config.cnn_channels):
        conv(f"local{i}", c_out, c_in, 3)
        conv(f"seq{i}", c_out, c_in, 3)
        c_in = c_out

    e = config.vit_embed
    dense("vit.proj", config.cnn_channels[-1], e)
    ps.register("vit.pos", rng.normal(0.0, 0.02, size=(config.n_tokens, e)).astype(dtype))
    for i in range(config.vit_depth):
        p = f"vit.b{i}"
        norm(f"{p}.ln1", e)
        dense(f"{p}.attn.q", e, e)
        dense(f"{p}.attn.k", e, e)
        dense(f"{p}.attn.v", e, e)
        dense(f"{p}.attn.o", e, e)
        norm(f"{p}.ln2", e)
        dense(f"{p}.mlp1", e, 4 * e)
        dense(f"{p}.mlp2", 4 * e, e)
    norm("vit.ln", e)

    for s in range(config.clinical_steps):
        p = f"clin.s{s}"
        # near-zero attentive logits start the sparsemax masks uniform, so
        # every feature keeps gradient until the selection sharpens
        ps.register(f"{p}.att.w",
                    rng.normal(0.0, 0.01, size=(CLINICAL_DIM, CLINICAL_DIM)).astype(dtype))
        ps.register(f"{p}.att.b", np.zeros(CLINICAL_DIM, dtype=dtype))
        dense(f"{p}.ft1", CLINICAL_DIM, 2 * config.clinical_hidden)
        dense(f"{p}.ft2", config.clinical_hidden, 2 * config.clinical_out)

    dense("fusion.l1", config.fused_dim, config.fusion_hidden)
    dense("fusion.l2", config.fusion_hidden, 1)

    # slope standardization stats travel with the weights
    ps.register("target_mean", np.zeros((), dtype=dtype), trainable=False)
    ps.register("target_sd", np.ones((), dtype=dtype), trainable=False)
    return ps


def set_target_stats(params: ParamStore, mean: float, sd: float) -> None:
    """Record training-fold slope statistics used to de-standardize outputs."""
    if not sd > 0:
        raise ValueError(f"target sd must be positive, got {sd}")
    dtype = params["target_mean"].data.dtype
    params["target_mean"].data = np.asarray(mean, dtype=dtype)
    params["target_sd"].data = np.asarray(sd, dtype=dtype)


def set_gate_identity(params: ParamStore) -> None:
    """Make both gate convolutions pass their input through unchanged.

    Sets the center tap of every output channel to 1 (bias 0), reducing the
    gate to a direct image*mask product; handy for tests and inspection.
    """
    for branch in ("gate.img", "gate.mask"):
        w = params[f"{branch}.w"].data
        w[:] = 0.0
        k = w.shape[-1]
        w[:, 0, k // 2, k // 2] = 1.0
        params[f"{branch}.b"].data[:] = 0.0


# ---------------------------------------------------------------------------
# input preparation


def hu_window_normalize(hu: np.ndarray) -> np.ndarray:
    """Map HU through the lung window [-1000, 400] onto [0, 1]."""
    lo, hi = HU_WINDOW
    return np.clip((np.asarray(hu, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


@lru_cache(maxsize=32)
def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic area-overlap weights mapping n_in pixels to n_out."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(math.floor(lo)), int(math.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            weights[i, j] = min(hi, j + 1) - max(lo, j)
    return weights / scale


def area_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-average resize of a 2D raster."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    return _overlap_matrix(h, out_h) @ image @ _overlap_matrix(w, out_w).T


def prepare_slice(slice_hu: np.ndarray, mask: np.ndarray, image_size: int,
                  dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Window, resize and channel the slice and its mask for the model."""
    img = area_resize(hu_window_normalize(slice_hu), image_size, image_size)
    msk = area_resize(np.asarray(mask, dtype=np.float64), image_size, image_size)
    return img[None].astype(dtype), msk[None].astype(dtype)


# ---------------------------------------------------------------------------
# forward graph


def context_gate(params: ParamStore, image, mask) -> Tensor:
    """Conv(image) * Conv(mask), elementwise over the gate channels."""
    img = image if isinstance(image, Tensor) else Tensor(image)
    msk = mask if isinstance(mask, Tensor) else Tensor(mask)
    if img.data.shape != msk.data.shape:
        raise ValueError(f"image/mask shape mismatch: "
                         f"{img.data.shape} vs {msk.data.shape}")
    pad = params["gate.img.w"].data.shape[-1] // 2
    gi = ad.conv2d(img, params["gate.img.w"], params["gate.img.b"], stride=1, padding=pad)
    gm = ad.conv2d(msk, params["gate.mask.w"], params["gate.mask.b"], stride=1, padding=pad)
    return ad.mul(gi, gm)


def _cnn_stack(params: ParamStore, prefix: str, x: Tensor, n_stages: int) -> Tensor:
    for i in range(n_stages):
        x = ad.gelu(ad.conv2d(x, params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"],
                              stride=2, padding=1))
    return x


def _attention(params: ParamStore, prefix: str, x: Tensor, heads: int) -> Tensor:
    n, t, e = x.data.shape
    d = e // heads

    def heads_split(v: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(v, (n, t, heads, d)), (0, 2, 1, 3))

    q = heads_split(ad.linear(x, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"]))
    k = heads_split(ad.linear(x, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"]))
    v = heads_split(ad.linear(x, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"]))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v)  # (n, heads, t, d)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (n, t, e))
    return ad.linear(out, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])


def encode_tokens(params: ParamStore, tokens: Tensor, config: ModelConfig,
                  use_positions: bool = True) -> Tensor:
    """Transformer encoder over (n, tokens, embed); mean-pooled output."""
    x = ad.add(tokens, params["vit.pos"]) if use_positions else tokens
    for i in range(config.vit_depth):
        p = f"vit.b{i}"
        h = ad.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        x = ad.add(x, _attention(params, f"{p}.attn", h, config.vit_heads))
        h = ad.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        h = ad.linear(ad.gelu(ad.linear(h, params[f"{p}.mlp1.w"], params[f"{p}.mlp1.b"])),
                      params[f"{p}.mlp2.w"], params[f"{p}.mlp2.b"])
        x = ad.add(x, h)
    x = ad.layer_norm(x, params["vit.ln.g"], params["vit.ln.b"])
    return ad.tmean(x, axis=1)


def forward_image_branches(params: ParamStore, gated: Tensor,
                           config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Parallel CNN (local) and sequential CNN->ViT (global) feature vectors."""
    n_stages = len(config.cnn_channels)
    local = _cnn_stack(params, "local", gated, n_stages)
    local_vec = ad.tmean(local, axis=(2, 3))  # global average pool

    seq = _cnn_stack(params, "seq", gated, n_stages)
    n, c, th, tw = seq.data.shape
    tokens = ad.transpose(ad.reshape(seq, (n, c, th * tw)), (0, 2, 1))
    tokens = ad.linear(tokens, params["vit.proj.w"], params["vit.proj.b"])
    global_vec = encode_tokens(params, tokens, config)
    return local_vec, global_vec


def enrich_clinical(params: ParamStore, clin, config: ModelConfig,
                    return_masks: bool = False):
    """Sparsemax-attentive step encoder over the 4 clinical values."""
    x = clin if isinstance(clin, Tensor) else Tensor(clin)
    if x.data.ndim != 2 or x.data.shape[1] != CLINICAL_DIM:
        raise ValueError(f"expected (n, {CLINICAL_DIM}) clinical input, "
                         f"got {x.data.shape}")
    prior = Tensor(np.ones_like(x.data))
    out = None
    masks = []
    for s in range(config.clinical_steps):
        p = f"clin.s{s}"
        logits = ad.linear(x, params[f"{p}.att.w"], params[f"{p}.att.b"])
        feat_mask = ad.sparsemax(ad.mul(logits, prior), axis=-1)
        masks.append(feat_mask)
        prior = ad.mul(prior, ad.add(PRIOR_RELAXATION, ad.mul(feat_mask, -1.0)))
        h = ad.glu(ad.linear(ad.mul(x, feat_mask),
                             params[f"{p}.ft1.w"], params[f"{p}.ft1.b"]))
        contrib = ad.glu(ad.linear(h, params[f"{p}.ft2.w"], params[f"{p}.ft2.b"]))
        out = contrib if out is None else ad.add(out, contrib)
    if return_masks:
        return out, masks
    return out


def forward_model(params: ParamStore, image, mask, clin,
                  config: ModelConfig) -> Tensor:
    """Standardized slope prediction, shape (n,)."""
    gated = context_gate(params, image, mask)
    local_vec, global_vec = forward_image_branches(params, gated, config)
    enriched = enrich_clinical(params, clin, config)
    fused = ad.concat([local_vec, global_vec, enriched], axis=-1)
    h = ad.gelu(ad.linear(fused, params["fusion.l1.w"], params["fusion.l1.b"]))
    z = ad.linear(h, params["fusion.l2.w"], params["fusion.l2.b"])
    return ad.reshape(z, (z.data.shape[0],))


def predict_slope(params: ParamStore, image, mask, clin,
                  config: ModelConfig) -> np.ndarray:
    """De-standardized slope predictions (mL/week), shape (n,)."""
    z = forward_model(params, image, mask, clin, config)
    mean = float(params["target_mean"].data)
    sd = float(params["target_sd"].data)
    out = z.data * sd + mean
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite slope prediction")
    return out
