"""Shared mask-conditioned predictor: masked montage in, full montage out.

Three small backbone families share one interface (init / forward / backward
/ save / load), so the rollout and training code never branch on the
architecture:

* ``mlp``  - per-timestep channel mixing with a linear skip path, followed by
  a per-channel temporal refinement whose hidden features carry additive
  learned per-channel positional encodings.
* ``conv`` - two depthwise-separable 1-d convolution blocks plus a pointwise
  output head.
* ``attn`` - one token per channel (a learned temporal projection plus a
  per-channel positional encoding) through a single-head self-attention block
  with layernorm and a feedforward, then a temporal decode.

With ``input_mode == "mask_appended"`` the binary visibility mask is appended
as extra input channels, so the backbone can tell true zeros from hidden
channels; ``masked_only`` feeds just the zero-masked tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields
from fractions import Fraction

import numpy as np

from . import numerics as nm
from .montage import GroupSchedule, LayoutSpec, Montage
from .signals import ChannelStats, FormatError, SignalBlock

BACKBONE_KINDS = ("mlp", "conv", "attn")
INPUT_MODES = ("mask_appended", "masked_only")

MODEL_MAGIC = "CAFEMODEL"
MODEL_VERSION = 1


@dataclass(frozen=True)
class PredictorHyper:
    """Backbone widths; defaults keep every backbone well under 0.5M params."""

    hidden: int = 64  # mlp channel-mixing width
    feat: int = 32  # temporal feature width (mlp refinement, attn tokens)
    conv_width: int = 32
    kernel: int = 5
    ff: int = 64  # attn feedforward width

    def __post_init__(self):
        if min(self.hidden, self.feat, self.conv_width, self.ff) < 1:
            raise ValueError("hyper widths must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd and positive")


@dataclass
class PredictorParams:
    backbone_kind: str
    input_mode: str
    c_h: int
    t: int
    hyper: PredictorHyper
    tensors: dict[str, np.ndarray]

    @property
    def c_in(self) -> int:
        return 2 * self.c_h if self.input_mode == "mask_appended" else self.c_h

    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "PredictorParams":
        return PredictorParams(
            backbone_kind=self.backbone_kind,
            input_mode=self.input_mode,
            c_h=self.c_h,
            t=self.t,
            hyper=self.hyper,
            tensors={k: v.copy() for k, v in self.tensors.items()},
        )


@dataclass
class PredictorOutput:
    estimate: SignalBlock
    cache: tuple


def _tensor_specs(backbone_kind, c_in, c_h, t, hyper):
    """Ordered (name, shape, fan_in) triples; fan_in None means init zero,
    fan_in -1 means init one (normalization gains)."""
    h, d, f, k, ff = hyper.hidden, hyper.feat, hyper.conv_width, hyper.kernel, hyper.ff
    if backbone_kind == "mlp":
        return [
            ("mix_w1", (c_in, h), c_in),
            ("mix_b1", (h,), None),
            ("mix_w2", (h, c_h), h),
            ("mix_b2", (c_h,), None),
            ("skip_w", (c_in, c_h), c_in),
            ("tem_w1", (t, d), t),
            ("pos", (c_h, d), d),
            ("tem_w2", (d, t), d),
            ("tem_b2", (t,), None),
        ]
    if backbone_kind == "conv":
        return [
            ("dw1", (c_in, k), k),
            ("pw1", (c_in, f), c_in),
            ("pb1", (f,), None),
            ("dw2", (f, k), k),
            ("pw2", (f, f), f),
            ("pb2", (f,), None),
            ("pw3", (f, c_h), f),
            ("pb3", (c_h,), None),
        ]
    if backbone_kind == "attn":
        return [
            ("emb_w", (t, d), t),
            ("emb_b", (d,), None),
            ("pos", (c_in, d), d),
            ("ln1_g", (d,), -1),
            ("ln1_b", (d,), None),
            ("wq", (d, d), d),
            ("wk", (d, d), d),
            ("wv", (d, d), d),
            ("ln2_g", (d,), -1),
            ("ln2_b", (d,), None),
            ("ff_w1", (d, ff), d),
            ("ff_b1", (ff,), None),
            ("ff_w2", (ff, d), ff),
            ("ff_b2", (d,), None),
            ("out_w", (d, t), d),
            ("out_b", (t,), None),
        ]
    raise ValueError(f"unknown backbone kind {backbone_kind!r}")


def init_params(
    backbone_kind: str,
    c_h: int,
    t: int,
    hyper: PredictorHyper | None = None,
    seed: int = 0,
    input_mode: str = "mask_appended",
) -> PredictorParams:
    """Fan-in scaled-uniform weights, zero biases, unit norm gains."""
    if backbone_kind not in BACKBONE_KINDS:
        raise ValueError(f"backbone must be one of {BACKBONE_KINDS}")
    if input_mode not in INPUT_MODES:
        raise ValueError(f"input_mode must be one of {INPUT_MODES}")
    if c_h < 2 or t < 1:
        raise ValueError("need c_h >= 2 and t >= 1")
    hyper = hyper or PredictorHyper()
    c_in = 2 * c_h if input_mode == "mask_appended" else c_h
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in _tensor_specs(backbone_kind, c_in, c_h, t, hyper):
        if fan_in is None:
            tensors[name] = np.zeros(shape)
        elif fan_in == -1:
            tensors[name] = np.ones(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return PredictorParams(backbone_kind, input_mode, c_h, t, hyper, tensors)


# ---------------------------------------------------------------------------
# forward / backward (batched core)


def _assemble_input(params, contexts, masks):
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.shape[1:] != (params.c_h, params.t):
        raise ValueError(
            f"context shape {contexts.shape[1:]} != ({params.c_h},{params.t})"
        )
    if params.input_mode == "masked_only":
        return contexts
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape != contexts.shape[:2]:
        raise ValueError(f"mask shape {masks.shape} != {contexts.shape[:2]}")
    mask_rows = np.repeat(masks[:, :, None], params.t, axis=2)
    return np.concatenate([contexts, mask_rows], axis=1)


def forward_many(params: PredictorParams, contexts, masks):
    """Batched forward: contexts (B,C_H,T), masks (B,C_H) -> (B,C_H,T), cache."""
    x = _assemble_input(params, contexts, masks)
    if params.backbone_kind == "mlp":
        return _mlp_forward(params, x)
    if params.backbone_kind == "conv":
        return _conv_forward(params, x)
    return _attn_forward(params, x)


def backward_many(params: PredictorParams, cache, upstream) -> dict[str, np.ndarray]:
    """Parameter gradients for a batched forward; upstream is (B,C_H,T)."""
    kind, payload = cache
    if kind != params.backbone_kind:
        raise ValueError(f"cache from backbone {kind!r}, params are {params.backbone_kind!r}")
    upstream = np.asarray(upstream, dtype=np.float64)
    if params.backbone_kind == "mlp":
        return _mlp_backward(params, payload, upstream)
    if params.backbone_kind == "conv":
        return _conv_backward(params, payload, upstream)
    return _attn_backward(params, payload, upstream)


def relu_kink_margin(cache) -> float:
    """Smallest |pre-activation| across the relu layers of a forward cache.

    Finite-difference oracles are only valid where the network is
    differentiable; this lets them reject draws too close to a relu kink.
    """
    kind, payload = cache
    if kind in ("mlp", "conv"):
        relu_caches = (payload[2], payload[5])
    else:
        relu_caches = (payload[5],)
    return float(min(np.abs(c).min() for c in relu_caches))


def forward(params: PredictorParams, context, mask) -> PredictorOutput:
    """Single-sample forward; context may be a SignalBlock or a (C_H,T) array."""
    rate = 1.0
    if isinstance(context, SignalBlock):
        rate = context.sample_rate_hz
        context = context.data
    est, cache = forward_many(params, context[None], np.asarray(mask)[None])
    return PredictorOutput(
        estimate=SignalBlock(data=est[0], sample_rate_hz=rate), cache=cache
    )


def backward(params: PredictorParams, cache, upstream) -> dict[str, np.ndarray]:
    """Single-sample backward; upstream is (C_H,T)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 2:
        upstream = upstream[None]
    return backward_many(params, cache, upstream)


# -- mlp ---------------------------------------------------------------------


def _mlp_forward(p, x):
    t_ = p.tensors
    b, cin, t = x.shape
    c_h = p.c_h
    cols = np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(b * t, cin)
    h1, c_lin1 = nm.linear_forward(cols, t_["mix_w1"], t_["mix_b1"])
    a1, c_relu1 = nm.relu_forward(h1)
    h2, c_lin2 = nm.linear_forward(a1, t_["mix_w2"], t_["mix_b2"])
    mix = h2 + cols @ t_["skip_w"]
    u = mix.reshape(b, t, c_h).transpose(0, 2, 1)
    rows = np.ascontiguousarray(u).reshape(b * c_h, t)
    z = rows @ t_["tem_w1"] + np.tile(t_["pos"], (b, 1))
    f, c_relu2 = nm.relu_forward(z)
    out2, c_lin3 = nm.linear_forward(f, t_["tem_w2"], t_["tem_b2"])
    y = u + out2.reshape(b, c_h, t)
    cache = ("mlp", (cols, c_lin1, c_relu1, c_lin2, rows, c_relu2, c_lin3, (b, cin, t)))
    return y, cache


def _mlp_backward(p, payload, gy):
    t_ = p.tensors
    cols, c_lin1, c_relu1, c_lin2, rows, c_relu2, c_lin3, (b, cin, t) = payload
    c_h = p.c_h
    grads = {}
    g_out2 = gy.reshape(b * c_h, t)
    lg3 = nm.linear_backward(c_lin3, g_out2)
    grads["tem_w2"] = lg3.params["w"]
    grads["tem_b2"] = lg3.params["b"]
    g_z = nm.relu_backward(c_relu2, lg3.x).x
    grads["pos"] = g_z.reshape(b, c_h, -1).sum(axis=0)
    grads["tem_w1"] = rows.T @ g_z
    g_rows = g_z @ t_["tem_w1"].T
    g_u = gy + g_rows.reshape(b, c_h, t)
    g_mix = np.ascontiguousarray(g_u.transpose(0, 2, 1)).reshape(b * t, c_h)
    grads["skip_w"] = cols.T @ g_mix
    lg2 = nm.linear_backward(c_lin2, g_mix)
    grads["mix_w2"] = lg2.params["w"]
    grads["mix_b2"] = lg2.params["b"]
    g_h1 = nm.relu_backward(c_relu1, lg2.x).x
    lg1 = nm.linear_backward(c_lin1, g_h1)
    grads["mix_w1"] = lg1.params["w"]
    grads["mix_b1"] = lg1.params["b"]
    return grads


# -- conv --------------------------------------------------------------------


def _conv_forward(p, x):
    t_ = p.tensors
    d1, cdw1 = nm.conv1d_depthwise_forward(x, t_["dw1"])
    p1, cpw1 = nm.conv1d_pointwise_forward(d1, t_["pw1"])
    p1b, _ = nm.channel_bias_forward(p1, t_["pb1"])
    a1, cr1 = nm.relu_forward(p1b)
    d2, cdw2 = nm.conv1d_depthwise_forward(a1, t_["dw2"])
    p2, cpw2 = nm.conv1d_pointwise_forward(d2, t_["pw2"])
    p2b, _ = nm.channel_bias_forward(p2, t_["pb2"])
    a2, cr2 = nm.relu_forward(p2b)
    y0, cpw3 = nm.conv1d_pointwise_forward(a2, t_["pw3"])
    y, _ = nm.channel_bias_forward(y0, t_["pb3"])
    cache = ("conv", (cdw1, cpw1, cr1, cdw2, cpw2, cr2, cpw3))
    return y, cache


def _conv_backward(p, payload, gy):
    cdw1, cpw1, cr1, cdw2, cpw2, cr2, cpw3 = payload
    grads = {"pb3": gy.sum(axis=(0, 2))}
    lg = nm.conv1d_pointwise_backward(cpw3, gy)
    grads["pw3"] = lg.params["w"]
    g = nm.relu_backward(cr2, lg.x).x
    grads["pb2"] = g.sum(axis=(0, 2))
    lg = nm.conv1d_pointwise_backward(cpw2, g)
    grads["pw2"] = lg.params["w"]
    lg2 = nm.conv1d_depthwise_backward(cdw2, lg.x)
    grads["dw2"] = lg2.params["k"]
    g = nm.relu_backward(cr1, lg2.x).x
    grads["pb1"] = g.sum(axis=(0, 2))
    lg = nm.conv1d_pointwise_backward(cpw1, g)
    grads["pw1"] = lg.params["w"]
    lg2 = nm.conv1d_depthwise_backward(cdw1, lg.x)
    grads["dw1"] = lg2.params["k"]
    return grads


# -- attn --------------------------------------------------------------------


def _attn_forward(p, x):
    t_ = p.tensors
    b, cin, t = x.shape
    c_h = p.c_h
    e, cl_e = nm.linear_forward(x.reshape(b * cin, t), t_["emb_w"], t_["emb_b"])
    h0 = e.reshape(b, cin, -1) + t_["pos"][None, :, :]
    n1, cln1 = nm.layernorm_forward(h0, t_["ln1_g"], t_["ln1_b"])
    att, catt = nm.attention_channels_forward(n1, t_["wq"], t_["wk"], t_["wv"])
    h1 = h0 + att
    n2, cln2 = nm.layernorm_forward(h1, t_["ln2_g"], t_["ln2_b"])
    d = n2.shape[-1]
    ff1, cf1 = nm.linear_forward(n2.reshape(b * cin, d), t_["ff_w1"], t_["ff_b1"])
    fa, crf = nm.relu_forward(ff1)
    ff2, cf2 = nm.linear_forward(fa, t_["ff_w2"], t_["ff_b2"])
    h2 = h1 + ff2.reshape(b, cin, d)
    sel = h2[:, :c_h, :]
    y2d, cl_o = nm.linear_forward(np.ascontiguousarray(sel).reshape(b * c_h, d), t_["out_w"], t_["out_b"])
    y = y2d.reshape(b, c_h, t)
    cache = ("attn", (cl_e, cln1, catt, cln2, cf1, crf, cf2, cl_o, (b, cin, t, d)))
    return y, cache


def _attn_backward(p, payload, gy):
    cl_e, cln1, catt, cln2, cf1, crf, cf2, cl_o, (b, cin, t, d) = payload
    c_h = p.c_h
    grads = {}
    lgo = nm.linear_backward(cl_o, gy.reshape(b * c_h, t))
    grads["out_w"] = lgo.params["w"]
    grads["out_b"] = lgo.params["b"]
    g_h2 = np.zeros((b, cin, d))
    g_h2[:, :c_h, :] = lgo.x.reshape(b, c_h, d)
    lg_f2 = nm.linear_backward(cf2, g_h2.reshape(b * cin, d))
    grads["ff_w2"] = lg_f2.params["w"]
    grads["ff_b2"] = lg_f2.params["b"]
    g_ff1 = nm.relu_backward(crf, lg_f2.x).x
    lg_f1 = nm.linear_backward(cf1, g_ff1)
    grads["ff_w1"] = lg_f1.params["w"]
    grads["ff_b1"] = lg_f1.params["b"]
    lg_ln2 = nm.layernorm_backward(cln2, lg_f1.x.reshape(b, cin, d))
    grads["ln2_g"] = lg_ln2.params["gain"]
    grads["ln2_b"] = lg_ln2.params["bias"]
    g_h1 = g_h2 + lg_ln2.x
    lg_att = nm.attention_channels_backward(catt, g_h1)
    grads["wq"] = lg_att.params["wq"]
    grads["wk"] = lg_att.params["wk"]
    grads["wv"] = lg_att.params["wv"]
    lg_ln1 = nm.layernorm_backward(cln1, lg_att.x)
    grads["ln1_g"] = lg_ln1.params["gain"]
    grads["ln1_b"] = lg_ln1.params["bias"]
    g_h0 = g_h1 + lg_ln1.x
    grads["pos"] = g_h0.sum(axis=0)
    lg_e = nm.linear_backward(cl_e, g_h0.reshape(b * cin, d))
    grads["emb_w"] = lg_e.params["w"]
    grads["emb_b"] = lg_e.params["b"]
    return grads


# ---------------------------------------------------------------------------
# model artifact serialization


@dataclass
class ModelArtifact:
    """Self-describing trained model: parameters plus everything needed to
    reproduce the reconstruction (layout, schedule, normalization, config)."""

    params: PredictorParams
    stats: ChannelStats
    schedule: GroupSchedule
    layout: LayoutSpec
    sample_rate_hz: float = 1.0
    config_echo: dict[str, str] = field(default_factory=dict)

    @property
    def montage_hash(self) -> str:
        return self.layout.montage_ref


def save_model(artifact: ModelArtifact, path) -> None:
    p = artifact.params
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION}"]
    lines.append(f"backbone = {p.backbone_kind}")
    lines.append(f"input_mode = {p.input_mode}")
    lines.append(f"c_h = {p.c_h}")
    lines.append(f"t = {p.t}")
    for f_ in dc_fields(PredictorHyper):
        lines.append(f"hyper.{f_.name} = {getattr(p.hyper, f_.name)}")
    lines.append(f"montage_hash = {artifact.montage_hash}")
    lines.append(f"observed = {','.join(map(str, artifact.layout.observed))}")
    sch = artifact.schedule
    lines.append(f"order_kind = {sch.order_kind}")
    lines.append(f"order_seed = {'' if sch.order_seed is None else sch.order_seed}")
    lines.append(f"split_fractions = {','.join(str(fr) for fr in sch.split_fractions)}")
    lines.append(f"groups = {'|'.join(','.join(map(str, g)) for g in sch.groups)}")
    lines.append(f"sample_rate_hz = {artifact.sample_rate_hz!r}")
    for key in sorted(artifact.config_echo):
        lines.append(f"config.{key} = {artifact.config_echo[key]}")
    blobs = [
        np.asarray(artifact.stats.mean, dtype="<f8"),
        np.asarray(artifact.stats.std, dtype="<f8"),
    ]
    lines.append(f"stats_c = {artifact.stats.c}")
    for name, arr in p.tensors.items():
        lines.append(f"tensor.{name} = {','.join(map(str, arr.shape))}")
        blobs.append(np.asarray(arr, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n---BLOB---\n").encode("utf-8"))
        for blob in blobs:
            fh.write(np.ascontiguousarray(blob).tobytes())


def load_model(path, expect_montage: Montage | None = None, expect_backbone: str | None = None) -> ModelArtifact:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = b"\n---BLOB---\n"
    pos = raw.find(sep)
    if pos < 0:
        raise FormatError(f"{path}: missing blob separator")
    head = raw[:pos].decode("utf-8").splitlines()
    blob = raw[pos + len(sep) :]
    if not head or not head[0].startswith(MODEL_MAGIC):
        raise FormatError(f"{path}: not a model file")
    version = int(head[0].split()[1])
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    kv: dict[str, str] = {}
    tensor_shapes: list[tuple[str, tuple[int, ...]]] = []
    for line in head[1:]:
        key, _, val = line.partition(" = ")
        if key.startswith("tensor."):
            shape = tuple(int(s) for s in val.split(",") if s)
            tensor_shapes.append((key[len("tensor.") :], shape))
        else:
            kv[key] = val
    backbone = kv["backbone"]
    if expect_backbone is not None and backbone != expect_backbone:
        raise FormatError(
            f"{path}: backbone kind mismatch: file has {backbone!r}, expected {expect_backbone!r}"
        )
    if expect_montage is not None and kv["montage_hash"] != expect_montage.content_hash():
        raise FormatError(f"{path}: montage hash mismatch")
    hyper = PredictorHyper(**{
        f_.name: int(kv[f"hyper.{f_.name}"]) for f_ in dc_fields(PredictorHyper)
    })
    c_h, t = int(kv["c_h"]), int(kv["t"])
    stats_c = int(kv["stats_c"])
    off = 0

    def take(n):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off * 8).astype(np.float64)
        off += n
        return arr

    mean = take(stats_c)
    std = take(stats_c)
    tensors = {}
    for name, shape in tensor_shapes:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = take(n).reshape(shape)
    if off * 8 != len(blob):
        raise FormatError(f"{path}: blob size mismatch ({len(blob)} bytes, used {off * 8})")
    params = PredictorParams(backbone, kv["input_mode"], c_h, t, hyper, tensors)
    layout = LayoutSpec(
        observed=tuple(int(s) for s in kv["observed"].split(",") if s),
        montage_ref=kv["montage_hash"],
    )
    groups = tuple(
        tuple(int(s) for s in grp.split(",") if s) for grp in kv["groups"].split("|") if grp
    )
    fractions = tuple(Fraction(s) for s in kv["split_fractions"].split(",") if s)
    schedule = GroupSchedule(
        groups=groups,
        order_kind=kv["order_kind"],
        split_fractions=fractions,
        order_seed=None if kv.get("order_seed", "") == "" else int(kv["order_seed"]),
    )
    stats = ChannelStats(mean=mean, std=std)
    config_echo = {
        k[len("config.") :]: v for k, v in kv.items() if k.startswith("config.")
    }
    return ModelArtifact(
        params=params,
        stats=stats,
        schedule=schedule,
        layout=layout,
        sample_rate_hz=float(kv["sample_rate_hz"]),
        config_echo=config_echo,
    )
