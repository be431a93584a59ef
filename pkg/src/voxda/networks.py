"""The six-network disentanglement model plus the segmentation head.

All forwards are pure functions of (parameter group, input); parameters live
in a ModelBundle as named tensors so the optimizer, checkpoints, and the
alternating schedule can address them by group.  Content encoders map into a
shared space: codes from either domain are accepted by either decoder and by
the segmentation head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .engine import ShapeError, Tensor, ops

GROUPS = (
    "enc_content_X",
    "enc_content_Y",
    "enc_style_X",
    "enc_style_Y",
    "dec_X",
    "dec_Y",
    "critic_X",
    "critic_Y",
    "content_disc",
    "seg_head",
)

_RES_BLOCKS = 2  # residual blocks in encoders/decoders
_ADAIN_PER_BLOCK = 2


@dataclass(frozen=True)
class NetConfig:
    """Architecture geometry; desk-scale defaults, every width <= 32."""

    patch: tuple = (5, 32, 32)  # (D, H, W)
    in_channels: int = 1
    content_channels: int = 8
    style_dim: int = 8
    base_width: int = 8
    leaky_slope: float = 0.2
    growth: int = 4
    seg_blocks: int = 2
    seg_layers: int = 3
    seg_width: int = 16
    seg_kernel_depth: int = 3
    seg_input: str = "content"  # "content" or "image"
    critic_kind: str = "conv"  # "conv" or "linear"
    dtype: str = "float64"

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def with_dtype(self, dtype: str) -> "NetConfig":
        return replace(self, dtype=dtype)


@dataclass
class LatentPair:
    """Content code (spatial) and style code (global) for one batch."""

    content: Tensor
    style: Tensor


@dataclass
class ModelBundle:
    """Named parameter groups for the whole model."""

    config: NetConfig
    groups: dict = field(default_factory=dict)

    def parameters(self, group_names=None) -> dict:
        """Flat {\"group/name\": Tensor} map over the requested groups."""
        names = GROUPS if group_names is None else tuple(group_names)
        out = {}
        for g in names:
            for name, t in self.groups[g].items():
                out[f"{g}/{name}"] = t
        return out

    def set_parameters(self, flat: dict) -> None:
        """Replace parameters by flat name; unknown names are rejected."""
        unknown = [
            key
            for key in flat
            if "/" not in key or key.split("/", 1)[0] not in self.groups or key.split("/", 1)[1] not in self.groups[key.split("/", 1)[0]]
        ]
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        for key, t in flat.items():
            g, name = key.split("/", 1)
            self.groups[g][name] = t


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with redraws outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2.0 * std, 2.0 * std).astype(dtype)


class _Init:
    def __init__(self, rng, dtype, std=0.02):
        self.rng = rng
        self.dtype = dtype
        self.std = std
        self.params: dict = {}

    def conv(self, name, f, c, k):
        self.params[f"{name}.k"] = Tensor(
            truncated_normal(self.rng, (f, c) + tuple(k), self.std, self.dtype),
            requires_grad=True,
        )
        self.params[f"{name}.b"] = Tensor(np.zeros(f, dtype=self.dtype), requires_grad=True)

    def norm(self, name, c):
        self.params[f"{name}.scale"] = Tensor(np.ones(c, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}.shift"] = Tensor(np.zeros(c, dtype=self.dtype), requires_grad=True)

    def dense(self, name, k, m):
        self.params[f"{name}.w"] = Tensor(
            truncated_normal(self.rng, (k, m), self.std, self.dtype), requires_grad=True
        )
        self.params[f"{name}.b"] = Tensor(np.zeros(m, dtype=self.dtype), requires_grad=True)


def _content_encoder_params(init: _Init, cfg: NetConfig):
    w1, w2 = cfg.base_width, cfg.base_width * 2
    init.conv("c0", w1, cfg.in_channels, (3, 3, 3))
    init.norm("in0", w1)
    init.conv("c1", w2, w1, (3, 3, 3))
    init.norm("in1", w2)
    for i in range(_RES_BLOCKS):
        init.conv(f"res{i}.c0", w2, w2, (3, 3, 3))
        init.norm(f"res{i}.in0", w2)
        init.conv(f"res{i}.c1", w2, w2, (3, 3, 3))
        init.norm(f"res{i}.in1", w2)
    init.conv("proj", cfg.content_channels, w2, (1, 1, 1))


def _style_encoder_params(init: _Init, cfg: NetConfig):
    w1, w2 = cfg.base_width, cfg.base_width * 2
    init.conv("c0", w1, cfg.in_channels, (3, 3, 3))
    init.conv("c1", w2, w1, (3, 3, 3))
    init.dense("head", w2, cfg.style_dim)


def _decoder_params(init: _Init, cfg: NetConfig):
    w1, w2 = cfg.base_width, cfg.base_width * 2
    init.conv("proj", w2, cfg.content_channels, (1, 1, 1))
    for i in range(_RES_BLOCKS):
        init.conv(f"res{i}.c0", w2, w2, (3, 3, 3))
        init.conv(f"res{i}.c1", w2, w2, (3, 3, 3))
    n_affine = 2 * _RES_BLOCKS * _ADAIN_PER_BLOCK * w2
    init.dense("mlp0", cfg.style_dim, 4 * cfg.base_width)
    init.dense("mlp1", 4 * cfg.base_width, n_affine)
    init.conv("up0", w1, w2, (3, 3, 3))
    init.norm("up0.in", w1)
    init.conv("up1", w1, w1, (3, 3, 3))
    init.norm("up1.in", w1)
    init.conv("out", cfg.in_channels, w1, (3, 3, 3))


def _critic_params(init: _Init, cfg: NetConfig):
    if cfg.critic_kind == "linear":
        d, h, w = cfg.patch
        init.dense("w", cfg.in_channels * d * h * w, 1)
        del init.params["w.b"]  # pure dot product
        return
    w1, w2 = cfg.base_width, cfg.base_width * 2
    init.conv("c0", w1, cfg.in_channels, (3, 3, 3))
    init.conv("c1", w2, w1, (3, 3, 3))
    init.conv("c2", w2, w2, (3, 3, 3))
    init.conv("head", 1, w2, (3, 3, 3))


def _content_disc_params(init: _Init, cfg: NetConfig):
    w2 = cfg.base_width * 2
    init.conv("c0", w2, cfg.content_channels, (3, 3, 3))
    init.conv("c1", w2, w2, (3, 3, 3))
    init.conv("head", 1, w2, (3, 3, 3))


def _seg_params(init: _Init, cfg: NetConfig):
    kd = cfg.seg_kernel_depth
    in_ch = cfg.content_channels if cfg.seg_input == "content" else cfg.in_channels
    init.conv("stem", cfg.seg_width, in_ch, (kd, 3, 3))
    c = cfg.seg_width
    for b in range(cfg.seg_blocks):
        for l in range(cfg.seg_layers):
            init.norm(f"block{b}.layer{l}.in", c + l * cfg.growth)
            init.conv(f"block{b}.layer{l}", cfg.growth, c + l * cfg.growth, (kd, 3, 3))
        c += cfg.seg_layers * cfg.growth
        if b < cfg.seg_blocks - 1 or cfg.seg_input == "content":
            init.conv(f"trans{b}", cfg.seg_width, c, (1, 1, 1))
            c = cfg.seg_width
    init.conv("out", 2, c, (kd, 3, 3))


_BUILDERS = {
    "enc_content_X": _content_encoder_params,
    "enc_content_Y": _content_encoder_params,
    "enc_style_X": _style_encoder_params,
    "enc_style_Y": _style_encoder_params,
    "dec_X": _decoder_params,
    "dec_Y": _decoder_params,
    "critic_X": _critic_params,
    "critic_Y": _critic_params,
    "content_disc": _content_disc_params,
    "seg_head": _seg_params,
}


def build_model(config: NetConfig, seed: int = 0) -> ModelBundle:
    """Construct all parameter groups with truncated-normal init (std 0.02)."""
    dtype = config.np_dtype()
    groups = {}
    for idx, name in enumerate(GROUPS):
        init = _Init(np.random.default_rng([seed, idx]), dtype)
        _BUILDERS[name](init, config)
        groups[name] = init.params
    return ModelBundle(config=config, groups=groups)


# -- forward helpers ---------------------------------------------------------


def _domain_group(base: str, domain: str) -> str:
    d = domain.upper()
    if d not in ("X", "Y"):
        raise ValueError(f"domain must be X or Y, got {domain!r}")
    return f"{base}_{d}"


def _bias(p, name, x):
    b = p[f"{name}.b"]
    return ops.add(x, ops.reshape(b, (1, b.shape[0], 1, 1, 1)))


def _conv(p, name, x, stride=(1, 1, 1), padding=(1, 1, 1)):
    return _bias(p, name, ops.conv3d(x, p[f"{name}.k"], stride, padding))


def _inorm(p, name, x):
    scale = p[f"{name}.scale"]
    shift = p[f"{name}.shift"]
    target = (1, scale.shape[0], 1, 1, 1)
    normed = ops.instance_norm(x)
    return ops.add(ops.mul(normed, ops.reshape(scale, target)), ops.reshape(shift, target))


def _leaky(cfg, x):
    return ops.leaky_relu(x, cfg.leaky_slope)


def _check_patch_input(cfg: NetConfig, x: Tensor, what: str):
    if x.ndim != 5:
        raise ShapeError(f"{what} expects [N,C,D,H,W], got rank {x.ndim}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"{what} expects {cfg.in_channels} channels, got {x.shape[1]}")
    if x.shape[3] % 4 or x.shape[4] % 4:
        raise ShapeError(f"{what} needs H and W divisible by 4, got {x.shape[3:]} plane")


def encode_content(bundle: ModelBundle, domain: str, x: Tensor) -> Tensor:
    """Downsampling conv stack to the shared content space [N,Cc,D,H/4,W/4]."""
    cfg = bundle.config
    _check_patch_input(cfg, x, "encode_content")
    p = bundle.groups[_domain_group("enc_content", domain)]
    h = _leaky(cfg, _inorm(p, "in0", _conv(p, "c0", x, stride=(1, 2, 2))))
    h = _leaky(cfg, _inorm(p, "in1", _conv(p, "c1", h, stride=(1, 2, 2))))
    for i in range(_RES_BLOCKS):
        r = _leaky(cfg, _inorm(p, f"res{i}.in0", _conv(p, f"res{i}.c0", h)))
        r = _inorm(p, f"res{i}.in1", _conv(p, f"res{i}.c1", r))
        h = _leaky(cfg, ops.add(h, r))
    return _conv(p, "proj", h, padding=(0, 0, 0))


def encode_style(bundle: ModelBundle, domain: str, x: Tensor) -> Tensor:
    """Conv stack + global average pool + linear head to [N, Cs].

    No normalization inside: global intensity must reach the style code.
    """
    cfg = bundle.config
    _check_patch_input(cfg, x, "encode_style")
    p = bundle.groups[_domain_group("enc_style", domain)]
    h = _leaky(cfg, _conv(p, "c0", x, stride=(1, 2, 2)))
    h = _leaky(cfg, _conv(p, "c1", h, stride=(1, 2, 2)))
    pooled = ops.mean(h, axis=(2, 3, 4))  # [N, w2]
    return ops.linear(pooled, p["head.w"], p["head.b"])


def encode(bundle: ModelBundle, domain: str, x: Tensor) -> LatentPair:
    return LatentPair(content=encode_content(bundle, domain, x), style=encode_style(bundle, domain, x))


def _style_affines(cfg: NetConfig, p, style: Tensor) -> list:
    """Map a style vector to (scale, shift) pairs for every AdaIN site."""
    w2 = cfg.base_width * 2
    h = ops.relu(ops.linear(style, p["mlp0.w"], p["mlp0.b"]))
    raw = ops.linear(h, p["mlp1.w"], p["mlp1.b"])  # [N, 2*sites*w2]
    n = raw.shape[0]
    pairs = []
    for site in range(_RES_BLOCKS * _ADAIN_PER_BLOCK):
        off = site * 2 * w2
        raw_scale = ops.slice_nd(raw, (0, off), (n, off + w2))
        shift = ops.slice_nd(raw, (0, off + w2), (n, off + 2 * w2))
        pairs.append((ops.add(raw_scale, 1.0), shift))  # scale starts near identity
    return pairs


def decode(bundle: ModelBundle, domain: str, content: Tensor, style: Tensor) -> Tensor:
    """Residual blocks with style-conditioned adaptive instance norm, then
    two nearest-neighbour upsampling stages back to patch resolution (tanh)."""
    cfg = bundle.config
    if content.ndim != 5 or content.shape[1] != cfg.content_channels:
        raise ShapeError(f"decode expects content [N,{cfg.content_channels},D,h,w], got {content.shape}")
    if style.ndim != 2 or style.shape[1] != cfg.style_dim:
        raise ShapeError(f"decode expects style [N,{cfg.style_dim}], got {style.shape}")
    if style.shape[0] != content.shape[0]:
        raise ShapeError(f"decode: batch mismatch, content {content.shape[0]} vs style {style.shape[0]}")
    p = bundle.groups[_domain_group("dec", domain)]
    affines = _style_affines(cfg, p, style)
    h = _conv(p, "proj", content, padding=(0, 0, 0))
    for i in range(_RES_BLOCKS):
        s0, b0 = affines[2 * i]
        s1, b1 = affines[2 * i + 1]
        r = _leaky(cfg, ops.adaptive_instance_norm(_conv(p, f"res{i}.c0", h), s0, b0))
        r = ops.adaptive_instance_norm(_conv(p, f"res{i}.c1", r), s1, b1)
        h = _leaky(cfg, ops.add(h, r))
    h = ops.upsample3d_nearest(h, (1, 2, 2))
    h = _leaky(cfg, _inorm(p, "up0.in", _conv(p, "up0", h)))
    h = ops.upsample3d_nearest(h, (1, 2, 2))
    h = _leaky(cfg, _inorm(p, "up1.in", _conv(p, "up1", h)))
    return ops.tanh(_conv(p, "out", h))


def critic(bundle: ModelBundle, domain: str, image: Tensor) -> Tensor:
    """Wasserstein critic: conv stack + global mean, one unbounded real per
    sample.  Every op stays inside the certified double-backward set."""
    cfg = bundle.config
    p = bundle.groups[_domain_group("critic", domain)]
    if image.ndim != 5 or image.shape[1] != cfg.in_channels:
        raise ShapeError(f"critic expects [N,{cfg.in_channels},D,H,W], got {image.shape}")
    if cfg.critic_kind == "linear":
        n = image.shape[0]
        flat = ops.reshape(image, (n, int(np.prod(image.shape[1:]))))
        if flat.shape[1] != p["w.w"].shape[0]:
            raise ShapeError(
                f"linear critic sized for {p['w.w'].shape[0]} voxels, got {flat.shape[1]}"
            )
        return ops.reshape(ops.matmul(flat, p["w.w"]), (n,))
    _check_patch_input(cfg, image, "critic")
    h = _leaky(cfg, _conv(p, "c0", image, stride=(1, 2, 2)))
    h = _leaky(cfg, _conv(p, "c1", h, stride=(1, 2, 2)))
    h = _leaky(cfg, _conv(p, "c2", h))
    h = _conv(p, "head", h)
    return ops.mean(h, axis=(1, 2, 3, 4))


def content_discriminate(bundle: ModelBundle, content: Tensor) -> Tensor:
    """P(content code came from domain X), one probability per sample."""
    cfg = bundle.config
    if content.ndim != 5 or content.shape[1] != cfg.content_channels:
        raise ShapeError(
            f"content_discriminate expects [N,{cfg.content_channels},D,h,w], got {content.shape}"
        )
    p = bundle.groups["content_disc"]
    h = _leaky(cfg, _conv(p, "c0", content, stride=(1, 2, 2)))
    h = _leaky(cfg, _conv(p, "c1", h))
    h = _conv(p, "head", h)
    return ops.sigmoid(ops.mean(h, axis=(1, 2, 3, 4)))


def _seg_pad(kd: int):
    return (kd // 2, 1, 1)


def segment(bundle: ModelBundle, content: Tensor) -> Tensor:
    """DenseNet-style head: concatenative blocks, then upsampling to patch
    resolution; returns logits [N,2,D,H,W] (background, foreground)."""
    cfg = bundle.config
    p = bundle.groups["seg_head"]
    expect_c = cfg.content_channels if cfg.seg_input == "content" else cfg.in_channels
    if content.ndim != 5 or content.shape[1] != expect_c:
        raise ShapeError(f"segment expects [N,{expect_c},D,h,w], got {content.shape}")
    kd = cfg.seg_kernel_depth
    pad = _seg_pad(kd)
    h = _conv(p, "stem", content, padding=pad)
    for b in range(cfg.seg_blocks):
        for l in range(cfg.seg_layers):
            u = _leaky(cfg, _inorm(p, f"block{b}.layer{l}.in", h))
            u = _conv(p, f"block{b}.layer{l}", u, padding=pad)
            h = ops.concat([h, u], axis=1)
        if cfg.seg_input == "content":
            h = ops.upsample3d_nearest(h, (1, 2, 2))
            h = _leaky(cfg, _conv(p, f"trans{b}", h, padding=(0, 0, 0)))
        elif b < cfg.seg_blocks - 1:
            h = _leaky(cfg, _conv(p, f"trans{b}", h, padding=(0, 0, 0)))
    return _conv(p, "out", h, padding=pad)


def content_only_image(bundle: ModelBundle, domain: str, content: Tensor) -> Tensor:
    """Decode with the zero style vector (style-neutral export)."""
    cfg = bundle.config
    style = Tensor(np.zeros((content.shape[0], cfg.style_dim), dtype=cfg.np_dtype()))
    return decode(bundle, domain, content, style)


class BundleModel:
    """Method-style view over a ModelBundle.

    Loss functions depend only on this protocol (encode_content, encode_style,
    decode, critic, content_discriminate), so tests can substitute doubles.
    """

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle

    @property
    def config(self) -> NetConfig:
        return self.bundle.config

    def encode_content(self, domain: str, x: Tensor) -> Tensor:
        return encode_content(self.bundle, domain, x)

    def encode_style(self, domain: str, x: Tensor) -> Tensor:
        return encode_style(self.bundle, domain, x)

    def decode(self, domain: str, content: Tensor, style: Tensor) -> Tensor:
        return decode(self.bundle, domain, content, style)

    def critic(self, domain: str, image: Tensor) -> Tensor:
        return critic(self.bundle, domain, image)

    def content_discriminate(self, content: Tensor) -> Tensor:
        return content_discriminate(self.bundle, content)

    def segment(self, content: Tensor) -> Tensor:
        return segment(self.bundle, content)


def as_model(model):
    """Accept either a ModelBundle or any object speaking the model protocol."""
    if isinstance(model, ModelBundle):
        return BundleModel(model)
    return model


def zero_group(bundle: ModelBundle, group: str) -> None:
    """Replace every parameter of a group with zeros (test configurations)."""
    for name, t in bundle.groups[group].items():
        bundle.groups[group][name] = Tensor(np.zeros_like(t.data), requires_grad=True)


def copy_group(bundle: ModelBundle, src: str, dst: str) -> None:
    """Copy parameter values from one group into an identically shaped one."""
    for name, t in bundle.groups[src].items():
        bundle.groups[dst][name] = Tensor(t.data.copy(), requires_grad=True)
