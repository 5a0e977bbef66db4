"""EAViT: a Vision Transformer whose attention attends to learned memories.

Images are cut into square patches, linearly embedded, prefixed with a class
token and given learned 1-D position embeddings.  Each pre-norm encoder block
mixes tokens with multi-head external attention (or, as a baseline, ordinary
self-attention) followed by a GELU MLP.  The final class token is layer-normed
and fed to an MLP classification head.

Tensors carry a leading batch axis: token sequences are ``[B, N+1, D]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 256
    patch_size: int = 64
    channels: int = 1
    projection_dim: int = 32
    layers: int = 16
    heads: int = 8
    memory_size: int = 64
    mlp_encoder_hidden: int | None = None
    head_hidden: list[int] = field(default_factory=lambda: [2048, 1024])
    classes: int = 10
    attention_kind: str = "external"

    def __post_init__(self):
        if self.mlp_encoder_hidden is None:
            self.mlp_encoder_hidden = 2 * self.projection_dim
        self.head_hidden = [int(h) for h in self.head_hidden]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.projection_dim % self.heads:
            raise ValueError(f"projection_dim {self.projection_dim} not divisible by heads {self.heads}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.attention_kind not in ("external", "self"):
            raise ValueError(f"attention_kind must be 'external' or 'self', got {self.attention_kind!r}")
        if any(h <= 0 for h in self.head_hidden):
            raise ValueError("head_hidden widths must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.projection_dim // self.heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in serialisation order."""
    D, S, dh, M = cfg.projection_dim, cfg.memory_size, cfg.head_dim, cfg.mlp_encoder_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj": (cfg.patch_dim, D),
        "class_token": (D,),
        "pos_embed": (cfg.num_patches + 1, D),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        shapes[p + "ln1.gain"] = (D,)
        shapes[p + "ln1.bias"] = (D,)
        if cfg.attention_kind == "external":
            shapes[p + "attn.mem_k"] = (S, dh)
            shapes[p + "attn.mem_v"] = (S, dh)
        else:
            shapes[p + "attn.w_q"] = (D, D)
            shapes[p + "attn.w_k"] = (D, D)
            shapes[p + "attn.w_v"] = (D, D)
        shapes[p + "attn.w_o"] = (D, D)
        shapes[p + "ln2.gain"] = (D,)
        shapes[p + "ln2.bias"] = (D,)
        shapes[p + "mlp.w1"] = (D, M)
        shapes[p + "mlp.b1"] = (M,)
        shapes[p + "mlp.w2"] = (M, D)
        shapes[p + "mlp.b2"] = (D,)
    shapes["ln_final.gain"] = (D,)
    shapes["ln_final.bias"] = (D,)
    widths = [D, *cfg.head_hidden, cfg.classes]
    for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"head.{j}.w"] = (a, b)
        shapes[f"head.{j}.b"] = (b,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form count of learnable scalars.

    embedding  P*P*C*D + D + (N+1)*D
    per block  4D (two norms) + attention + (D*M + M + M*D + D)
               attention = 2*S*(D/H) + D*D (external) or 4*D*D (self)
    final norm 2D
    head       sum over consecutive widths (a*b + b) for [D, *hidden, classes]
    """
    D, S, H, M = cfg.projection_dim, cfg.memory_size, cfg.heads, cfg.mlp_encoder_hidden
    N = cfg.num_patches
    attn = 2 * S * (D // H) + D * D if cfg.attention_kind == "external" else 4 * D * D
    block = 4 * D + attn + (D * M + M + M * D + D)
    widths = [D, *cfg.head_hidden, cfg.classes]
    head = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    return cfg.patch_dim * D + D + (N + 1) * D + cfg.layers * block + 2 * D + head


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _xavier(rng: np.random.Generator, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, shape)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("class_token", "pos_embed") or leaf in ("bias", "b", "b1", "b2"):
            value = np.zeros(shape)
        elif leaf == "gain":
            value = np.ones(shape)
        elif name == "patch_proj":
            value = _trunc_normal(rng, shape, 0.02)
        elif leaf.startswith("mem_"):
            # unit-variance affinities for layer-normed inputs; at 0.02 the
            # class token receives almost no signal and training stalls
            value = _trunc_normal(rng, shape, 1.0 / np.sqrt(shape[1]))
        else:
            value = _xavier(rng, shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W(, C)]`` uint8 image(s) -> ``[..., N, P*P*C]`` floats in [0, 1].

    Patches are taken row-major; each is flattened with the channel varying
    fastest.
    """
    x = np.asarray(pixels)
    if x.ndim == 2 or (x.ndim == 3 and x.shape[-1] not in (1, 3)):
        x = x[..., None]
    *lead, h, w, c = x.shape
    P = patch_size
    if h % P or w % P:
        raise ValueError(f"image {h}x{w} not divisible by patch size {P}")
    x = x.reshape(*lead, h // P, P, w // P, P, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    x = x.reshape(*lead, (h // P) * (w // P), P * P * c)
    return x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int, channels: int = 1) -> np.ndarray:
    P = patch_size
    gh, gw = height // P, width // P
    x = patches.reshape(gh, gw, P, P, channels).transpose(0, 2, 1, 3, 4).reshape(height, width, channels)
    return x[..., 0] if channels == 1 else x


def embed(patches: Tensor, params: dict[str, Tensor]) -> Tensor:
    """``[B, N, patch_dim]`` -> ``[B, N+1, D]``: project, prepend class token, add positions."""
    proj = params["patch_proj"]
    if patches.shape[-1] != proj.shape[0]:
        raise ValueError(f"patch_dim {patches.shape[-1]} does not match projection {proj.shape[0]}")
    tokens = T.prepend_token(params["class_token"], T.matmul(patches, proj))
    return T.add(tokens, params["pos_embed"])


def external_attention(F: Tensor, mem_k: Tensor, mem_v: Tensor) -> Tensor:
    """Attend ``F [..., N_t, d]`` to memories ``[S, d]``.

    The affinity map ``F mem_k^T`` is softmaxed over the token axis and then
    L1-normalised over the memory axis, so each token's weights over the ``S``
    memory slots sum to one.
    """
    if F.shape[-1] != mem_k.shape[-1] or mem_k.shape != mem_v.shape:
        raise ValueError(f"external_attention shape mismatch: F {F.shape}, M_k {mem_k.shape}, M_v {mem_v.shape}")
    A = attention_map(F, mem_k)
    return T.matmul(A, mem_v)


def attention_map(F: Tensor, mem_k: Tensor) -> Tensor:
    raw = T.matmul(F, T.transpose(mem_k))
    return T.l1_normalize_axis(T.softmax_axis(raw, axis=-2), axis=-1)


def multi_head_ea(F: Tensor, mem_k: Tensor, mem_v: Tensor, w_o: Tensor, heads: int) -> Tensor:
    D = F.shape[-1]
    if D % heads:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    dh = D // heads
    outs = [external_attention(T.slice_last(F, h * dh, (h + 1) * dh), mem_k, mem_v) for h in range(heads)]
    return T.matmul(T.concat_last_axis(outs), w_o)


def self_attention(F: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention."""
    D = F.shape[-1]
    if D % heads or w_q.shape != (D, D):
        raise ValueError(f"self_attention shape mismatch: F {F.shape}, heads {heads}, W_q {w_q.shape}")
    dh = D // heads
    q, k, v = T.matmul(F, w_q), T.matmul(F, w_k), T.matmul(F, w_v)
    scale = 1.0 / np.sqrt(dh)
    outs = []
    for h in range(heads):
        qh, kh, vh = (T.slice_last(t, h * dh, (h + 1) * dh) for t in (q, k, v))
        scores = T.mul_scalar(T.matmul(qh, T.transpose(kh)), scale)
        outs.append(T.matmul(T.softmax_axis(scores, axis=-1), vh))
    return T.matmul(T.concat_last_axis(outs), w_o)


def mixing(z: Tensor, params: dict[str, Tensor], prefix: str, cfg: ModelConfig) -> Tensor:
    if cfg.attention_kind == "external":
        return multi_head_ea(z, params[prefix + "mem_k"], params[prefix + "mem_v"],
                             params[prefix + "w_o"], cfg.heads)
    return self_attention(z, params[prefix + "w_q"], params[prefix + "w_k"], params[prefix + "w_v"],
                          params[prefix + "w_o"], cfg.heads)


def encoder_block(z: Tensor, params: dict[str, Tensor], index: int, cfg: ModelConfig) -> Tensor:
    p = f"blocks.{index}."
    if z.shape[-1] != cfg.projection_dim:
        raise ValueError(f"token width {z.shape[-1]} != projection_dim {cfg.projection_dim}")
    h = T.layer_norm(z, params[p + "ln1.gain"], params[p + "ln1.bias"])
    z = T.add(z, mixing(h, params, p + "attn.", cfg))
    h = T.layer_norm(z, params[p + "ln2.gain"], params[p + "ln2.bias"])
    h = T.gelu(T.add(T.matmul(h, params[p + "mlp.w1"]), params[p + "mlp.b1"]))
    h = T.add(T.matmul(h, params[p + "mlp.w2"]), params[p + "mlp.b2"])
    return T.add(z, h)


def encode(patches: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    z = embed(patches, params)
    for i in range(cfg.layers):
        z = encoder_block(z, params, i, cfg)
    return z


def head(z: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    y = T.layer_norm(T.slice_tokens(z, 0), params["ln_final.gain"], params["ln_final.bias"])
    n = len(cfg.head_hidden) + 1
    for j in range(n):
        y = T.add(T.matmul(y, params[f"head.{j}.w"]), params[f"head.{j}.b"])
        if j < n - 1:
            y = T.gelu(y)
    return y


class EAViT:
    """Parameters plus the forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(config, seed, self.dtype)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def patches(self, images: np.ndarray) -> Tensor:
        cfg = self.config
        x = np.asarray(images)
        img_shape = (cfg.image_size, cfg.image_size) + (() if cfg.channels == 1 else (cfg.channels,))
        if x.shape[-len(img_shape):] != img_shape:
            raise ValueError(f"expected image shape {img_shape}, got {x.shape}")
        if x.ndim == len(img_shape):
            x = x[None]
        return Tensor(patchify(x, cfg.patch_size).astype(self.dtype, copy=False))

    def forward(self, images: np.ndarray) -> Tensor:
        """Logits ``[B, classes]`` for a batch (or single image) of uint8 pixels."""
        return self.forward_patches(self.patches(images))

    __call__ = forward

    def forward_patches(self, patches: Tensor) -> Tensor:
        return head(encode(patches, self.params, self.config), self.params, self.config)

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        logits = self.forward(images).data.astype(np.float64)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
