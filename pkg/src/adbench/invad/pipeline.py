"""Desk-scale reference of the feature-inversion anomaly-detection pipeline.

A small frozen convolutional encoder stands in for a pretrained backbone;
the trainable side (re-scaling upsampler, style translator, and a
style-modulated decoder reconstructing from a learnable constant query)
is optimized with MSE against the frozen encoder features.  At inference
the per-location cosine distance between encoder and decoder features is
the anomaly map.

Everything runs in float64 on the hand-rolled tape in `autodiff`, so the
analytic gradients can be checked against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datamodel import DataModelError
from . import autodiff as ad
from .autodiff import Var

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ConvParams:
    """Weights (C_out, C_in, kH, kW), bias (C_out,), stride, padding."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise DataModelError(f"bad conv parameter shapes {w.shape} / {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DataModelError("conv parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class PipelineConfig:
    """Architecture knobs; the stock configuration is 1/1/2 stacks with
    64 re-scaled and 16 style channels over 3 stages."""

    n_b: int = 1  # fusion bottleneck convs
    n_c: int = 1  # convs after each up-sampling conv
    n_l: int = 2  # style-modulation modules per stage
    n_r: int = 64  # re-scaled feature channels
    n_s: int = 16  # style feature channels
    stages: int = 3
    use_style: bool = True
    use_ssm: bool = True
    epsilon: float = 1e-5
    image_size: int = 32
    image_channels: int = 3
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    fusion_channels: int = 64

    def __post_init__(self):
        if min(self.n_b, self.n_c, self.n_l, self.n_r, self.n_s, self.stages) < 1:
            raise DataModelError("all stack/channel counts must be >= 1")
        if self.epsilon <= 0:
            raise DataModelError("epsilon must be positive")
        if len(self.encoder_channels) != self.stages:
            raise DataModelError("encoder channel plan must list one entry per stage")
        if self.image_size % (2**self.stages) != 0:
            raise DataModelError(
                f"image size {self.image_size} not divisible by 2^{self.stages}"
            )

    @property
    def style_channels(self) -> int:
        return self.n_s if self.use_style else self.n_r

    @property
    def deepest_hw(self) -> int:
        return self.image_size // (2**self.stages)


@dataclass
class InvadState:
    """Frozen encoder/fusion parameters plus all trainable tensors.

    The encoder side never changes after construction; training touches
    only ``params`` (and the optimizer moments)."""

    config: PipelineConfig
    encoder: list[ConvParams]
    neck_down: list[list[ConvParams]]
    neck_bottleneck: list[ConvParams]
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0

    def encoder_snapshot(self) -> list[np.ndarray]:
        out = []
        for p in self.encoder + [q for c in self.neck_down for q in c] + self.neck_bottleneck:
            out.append(p.weight.copy())
            out.append(p.bias.copy())
        return out


def _init_conv(rng, c_out, c_in, k, stride=1, padding=None, bias_scale=0.0) -> ConvParams:
    fan_in = c_in * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
    b = rng.normal(0.0, bias_scale, size=c_out) if bias_scale else np.zeros(c_out)
    return ConvParams(weight=w, bias=b, stride=stride, padding=k // 2 if padding is None else padding)


def build_state(config: PipelineConfig, seed: int = 0) -> InvadState:
    """Seeded construction of the frozen encoder and all trainable tensors."""
    rng = np.random.default_rng(seed)
    chans = config.encoder_channels

    encoder = []
    c_prev = config.image_channels
    for c in chans:
        encoder.append(_init_conv(rng, c, c_prev, 3, stride=2, bias_scale=0.1))
        c_prev = c

    # fusion: bring every stage to the deepest resolution, concat, bottleneck
    neck_down = []
    for s in range(config.stages):
        downs = [
            _init_conv(rng, chans[s], chans[s], 3, stride=2, bias_scale=0.1)
            for _ in range(config.stages - 1 - s)
        ]
        neck_down.append(downs)
    neck_bottleneck = []
    c_prev = sum(chans)
    for _ in range(config.n_b):
        neck_bottleneck.append(_init_conv(rng, config.fusion_channels, c_prev, 3, bias_scale=0.1))
        c_prev = config.fusion_channels

    params: dict[str, np.ndarray] = {}

    def reg(name, c_out, c_in, k):
        fan_in = c_in * k * k
        params[f"{name}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
        params[f"{name}_b"] = np.zeros(c_out)

    # upsampler: one block per decoder stage (deepest first)
    for d in range(config.stages):
        c_in = config.fusion_channels if d == 0 else config.n_r
        reg(f"up{d}_entry", config.n_r, c_in, 3)  # d == 0 is k3s1, others transposed k3s2
        for j in range(config.n_c):
            reg(f"up{d}_conv{j}", config.n_r, config.n_r, 3)

    if config.use_style:
        for d in range(config.stages):
            reg(f"style{d}_conv0", config.n_s, config.n_r, 3)
            reg(f"style{d}_conv1", config.n_s, config.n_s, 3)

    dec_chans = list(reversed(chans))  # decoder works deepest -> shallowest
    params["f_const"] = rng.normal(0.0, 1.0, size=(1, dec_chans[0], config.deepest_hw, config.deepest_hw))
    for d in range(config.stages):
        if d > 0:
            reg(f"dec{d}_up", dec_chans[d], dec_chans[d - 1], 3)  # transposed k3s2
        if config.use_ssm:
            reg(f"dec{d}_scale", dec_chans[d], config.style_channels, 3)
            reg(f"dec{d}_shift", dec_chans[d], config.style_channels, 3)
        else:
            for j in range(config.n_l):
                reg(f"dec{d}_mix{j}", dec_chans[d], dec_chans[d] + config.style_channels, 3)

    return InvadState(
        config=config,
        encoder=encoder,
        neck_down=neck_down,
        neck_bottleneck=neck_bottleneck,
        params=params,
        adam_m={k: np.zeros_like(v) for k, v in params.items()},
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
    )


# ---------------------------------------------------------------------------
# Operation surface (plain numpy, forward only)
# ---------------------------------------------------------------------------


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Direct cross-correlation; output spatial extent floor((H+2p-k)/s)+1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != params.weight.shape[1]:
        raise DataModelError(
            f"conv2d input {x.shape} incompatible with weight {params.weight.shape}"
        )
    return ad.conv_forward(x, params.weight, params.bias, params.stride, params.padding)


def deconv_k3s2(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Transposed 3x3 stride-2 convolution doubling the spatial extent."""
    x = np.asarray(x, dtype=np.float64)
    if params.stride != 2 or params.weight.shape[2:] != (3, 3):
        raise DataModelError("deconv_k3s2 needs kernel 3 and stride 2")
    if x.ndim != 4 or x.shape[1] != params.weight.shape[1]:
        raise DataModelError(
            f"deconv input {x.shape} incompatible with weight {params.weight.shape}"
        )
    out = _deconv_var(Var(x), Var(params.weight), Var(params.bias))
    return out.value


def instance_stats(x: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Spatial mean and sqrt(population variance + epsilon) per (n, c)."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = np.square(x - mu).mean(axis=(2, 3), keepdims=True)
    return mu, np.sqrt(var + epsilon)


def ssm_apply(
    f_o: np.ndarray,
    style: np.ndarray,
    scale_conv: ConvParams,
    shift_conv: ConvParams,
    epsilon: float,
    upsample_conv: ConvParams | None = None,
) -> np.ndarray:
    """One style-modulation step: standardize f_o per (n, c), then apply
    spatially varying scale and shift convolved out of the style feature.

    When ``upsample_conv`` is given, f_o first goes through a transposed
    k3s2 convolution so its spatial dims match the style's.
    """
    out = _ssm_var(
        Var(np.asarray(f_o, dtype=np.float64)),
        Var(np.asarray(style, dtype=np.float64)),
        (Var(scale_conv.weight), Var(scale_conv.bias)),
        (Var(shift_conv.weight), Var(shift_conv.bias)),
        epsilon,
        None if upsample_conv is None else (Var(upsample_conv.weight), Var(upsample_conv.bias)),
    )
    return out.value


def loss_mse(f_i: list[np.ndarray], f_o: list[np.ndarray]) -> float:
    """Mean over stages of the per-element mean squared difference."""
    if len(f_i) != len(f_o):
        raise DataModelError("stage lists differ in length")
    total = 0.0
    for a, b in zip(f_i, f_o):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise DataModelError(f"stage shape mismatch {a.shape} vs {b.shape}")
        total += float(np.mean(np.square(a - b)))
    return total / len(f_i)


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------


def _conv_var(x: Var, w: Var, b: Var, stride=1, pad=1) -> Var:
    return ad.conv2d_op(x, w, b, stride, pad)


def _deconv_var(x: Var, w: Var, b: Var) -> Var:
    return ad.conv_transpose2d_op(x, w, b, stride=2, pad=1, output_pad=1)


def _standardize_var(x: Var, epsilon: float) -> Var:
    mu = ad.spatial_mean(x)
    centered = ad.sub(x, mu)
    var = ad.spatial_mean(ad.mul(centered, centered))
    sigma = ad.sqrt(ad.add_scalar(var, epsilon))
    return ad.div(centered, sigma)


def _ssm_var(f_o: Var, style: Var, scale_wb, shift_wb, epsilon: float, upsample_wb=None) -> Var:
    if upsample_wb is not None:
        f_o = _deconv_var(f_o, *upsample_wb)
    if style.value.shape[2:] != f_o.value.shape[2:]:
        raise DataModelError(
            f"style spatial dims {style.value.shape[2:]} != f_o {f_o.value.shape[2:]}"
        )
    scale = _conv_var(style, *scale_wb)
    shift = _conv_var(style, *shift_wb)
    return ad.add(ad.mul(scale, _standardize_var(f_o, epsilon)), shift)


def encoder_features(image: np.ndarray, state: InvadState) -> list[np.ndarray]:
    """Frozen multi-scale features, one per stage (shallow to deep)."""
    feats = []
    x = np.asarray(image, dtype=np.float64)
    for p in state.encoder:
        x = ad.conv_forward(x, p.weight, p.bias, p.stride, p.padding)
        x = x / (1.0 + np.exp(-x))  # silu, matching the trainable blocks
        feats.append(x)
    return feats


def _fusion_feature(feats: list[np.ndarray], state: InvadState) -> np.ndarray:
    pooled = []
    for s, f in enumerate(feats):
        x = f
        for p in state.neck_down[s]:
            x = ad.conv_forward(x, p.weight, p.bias, p.stride, p.padding)
            x = x / (1.0 + np.exp(-x))
        pooled.append(x)
    x = np.concatenate(pooled, axis=1)
    for p in state.neck_bottleneck:
        x = ad.conv_forward(x, p.weight, p.bias, p.stride, p.padding)
        x = x / (1.0 + np.exp(-x))
    return x


def _decoder_graph(
    fusion: np.ndarray, state: InvadState, vars_: dict[str, Var]
) -> list[Var]:
    """Build the trainable graph from the (constant) fusion feature.

    Returns decoder outputs per stage, deepest first.
    """
    cfg = state.config

    def wb(name):
        return vars_[f"{name}_w"], vars_[f"{name}_b"]

    # re-scaling upsampler
    rescaled = []
    x = Var(fusion)
    for d in range(cfg.stages):
        if d == 0:
            x = ad.silu(_conv_var(x, *wb("up0_entry")))
        else:
            x = ad.silu(_deconv_var(x, *wb(f"up{d}_entry")))
        for j in range(cfg.n_c):
            x = ad.silu(_conv_var(x, *wb(f"up{d}_conv{j}")))
        rescaled.append(x)

    # style translator (or raw re-scaled features when disabled)
    styles = []
    for d in range(cfg.stages):
        if cfg.use_style:
            y = ad.silu(_conv_var(rescaled[d], *wb(f"style{d}_conv0")))
            y = _conv_var(y, *wb(f"style{d}_conv1"))
            styles.append(y)
        else:
            styles.append(rescaled[d])

    # decoder from the constant query
    n = fusion.shape[0]
    out = ad.broadcast_batch(vars_["f_const"], n)
    decoded = []
    for d in range(cfg.stages):
        for j in range(cfg.n_l):
            up = wb(f"dec{d}_up") if (d > 0 and j == 0) else None
            if cfg.use_ssm:
                out = _ssm_var(
                    out, styles[d], wb(f"dec{d}_scale"), wb(f"dec{d}_shift"), cfg.epsilon, up
                )
            else:
                if up is not None:
                    out = _deconv_var(out, *up)
                out = ad.silu(
                    _conv_var(ad.concat_channels(out, styles[d]), *wb(f"dec{d}_mix{j}"))
                )
        decoded.append(out)
    return decoded


def pipeline_forward(
    image: np.ndarray, state: InvadState, config: PipelineConfig | None = None
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Run the full pipeline; returns (encoder features, decoder features),
    both shallow-to-deep with matching shapes stage for stage."""
    cfg = config or state.config
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 4 or image.shape[2] % (2**cfg.stages) or image.shape[3] % (2**cfg.stages):
        raise DataModelError(
            f"image {image.shape} must be NCHW with dims divisible by 2^{cfg.stages}"
        )
    f_i = encoder_features(image, state)
    fusion = _fusion_feature(f_i, state)
    vars_ = {k: Var(v) for k, v in state.params.items()}
    decoded = _decoder_graph(fusion, state, vars_)
    f_o = [d.value for d in reversed(decoded)]
    return f_i, f_o


def _loss_graph(images: np.ndarray, state: InvadState) -> tuple[Var, dict[str, Var]]:
    f_i = encoder_features(images, state)
    fusion = _fusion_feature(f_i, state)
    vars_ = {k: Var(v) for k, v in state.params.items()}
    decoded = _decoder_graph(fusion, state, vars_)
    terms = None
    for target, out in zip(reversed(f_i), decoded):
        diff = ad.sub(out, Var(target))
        term = ad.mean_all(ad.mul(diff, diff))
        terms = term if terms is None else ad.add(terms, term)
    loss = ad.mul(terms, Var(np.asarray(1.0 / len(decoded))))
    return loss, vars_


def backward_and_step(
    state: InvadState,
    images: np.ndarray,
    lr: float = 1e-4,
    weight_decay: float = 1e-4,
) -> float:
    """One optimization step: reverse-mode gradients of the reconstruction
    loss, then a decoupled-weight-decay adaptive-moment update.

    Updates ``state`` in place (frozen encoder untouched) and returns the
    loss.  Raises DivergenceError on a non-finite loss.
    """
    loss, vars_ = _loss_graph(np.asarray(images, dtype=np.float64), state)
    value = float(loss.value)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}")
    loss.backward()
    state.step += 1
    t = state.step
    for name, var in vars_.items():
        g = var.grad
        if g is None:
            continue
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        p = state.params[name]
        p -= lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + weight_decay * p)
    return value


def grad_check(
    state: InvadState,
    images: np.ndarray,
    probes_per_group: int = 8,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central finite differences.

    Probes ``probes_per_group`` randomly chosen entries in every trainable
    tensor and returns the max relative error
    |ga - gn| / max(|ga|, |gn|, 1e-8).

    The finite differences carry rounding noise about eps * loss / h, so
    for decisive results probe a state whose loss is small (e.g. after a
    short training run); near-zero gradients are then still resolvable
    against the 1e-8 floor.
    """
    images = np.asarray(images, dtype=np.float64)
    loss, vars_ = _loss_graph(images, state)
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, var in vars_.items():
        flat_param = state.params[name].ravel()
        flat_grad = var.grad.ravel()
        n = flat_param.size
        idx = rng.choice(n, size=min(probes_per_group, n), replace=False)
        for i in idx:
            keep = flat_param[i]
            flat_param[i] = keep + h
            up = float(_loss_graph(images, state)[0].value)
            flat_param[i] = keep - h
            down = float(_loss_graph(images, state)[0].value)
            flat_param[i] = keep
            numeric = (up - down) / (2.0 * h)
            analytic = float(flat_grad[i])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-aligned bilinear resize of a 2-D map."""
    h, w = img.shape
    rows = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    cols = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bottom = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bottom * fr


def stage_distance_maps(f_i: list[np.ndarray], f_o: list[np.ndarray]) -> list[np.ndarray]:
    """Per-stage cosine distance (1 - similarity) per spatial location.

    Zero channel vectors on either side count as distance 1.  Output per
    stage has shape (N, H_s, W_s) with values in [0, 2].
    """
    maps = []
    for a, b in zip(f_i, f_o):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise DataModelError(f"stage shape mismatch {a.shape} vs {b.shape}")
        dot = np.sum(a * b, axis=1)
        na = np.sqrt(np.sum(a * a, axis=1))
        nb = np.sqrt(np.sum(b * b, axis=1))
        denom = na * nb
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = np.where(denom > 0.0, dot / denom, 0.0)
        maps.append(np.clip(1.0 - sim, 0.0, 2.0))
    return maps


def anomaly_map(
    f_i: list[np.ndarray],
    f_o: list[np.ndarray],
    output_dims: tuple[int, int],
    reduce: str = "mean",
) -> np.ndarray:
    """Average (or sum) the per-stage distance maps, bilinearly upsampled
    to ``output_dims``.  Returns (N, H, W)."""
    if reduce not in ("mean", "sum"):
        raise DataModelError(f"unknown map reduction {reduce!r}")
    stage_maps = stage_distance_maps(f_i, f_o)
    n = stage_maps[0].shape[0]
    out_h, out_w = output_dims
    acc = np.zeros((n, out_h, out_w))
    for m in stage_maps:
        for i in range(n):
            acc[i] += _resize_bilinear(m[i], out_h, out_w)
    if reduce == "mean":
        acc /= len(stage_maps)
    return acc
