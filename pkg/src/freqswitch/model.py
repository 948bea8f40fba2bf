"""Desk-scale multi-task model: a frozen random convolutional backbone with
task-agnostic low-rank adapters, task-specific frequency-switched adapters,
and a shared decoder whose main convolution is frequency-switched as well.

Every trainable tensor lives in a flat name -> array registry owned by the
model; the structured parameter containers alias the same arrays, so in-place
optimizer updates propagate everywhere. The frozen backbone is excluded from
the registry and never receives gradients.

All forward/backward internals are batched over a leading image axis for
speed; the public per-image entry points wrap them.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, asdict

import numpy as np

from .numerics import (
    ContractViolation,
    ConvKernel,
    RandomStream,
    as_tensor,
    conv2d_batched,
    conv2d_batched_input_grad,
    conv2d_batched_kernel_grad,
    downsample_mean_batched,
    downsample_mean_batched_grad,
    im2col_batched,
    upsample_nearest_batched,
    upsample_nearest_batched_grad,
)
from .adapters import (
    ClockNetParams,
    FusedKernel,
    LowRankFactors,
    MidKernel,
    TaskToken,
    clocknet_backward,
    clocknet_forward,
    fuse_awb,
    fuse_backward,
    kernel4d_to_matrix_view,
    linear_scale,
    linear_scale_backward,
    lowpass_backward,
    sine_backward,
    sine_modulate,
)

VARIANTS = ("sine", "linear-scale", "no-modulation", "independent-base", "independent-decoder")

_STREAM_BACKBONE = 11
_STREAM_PARAMS = 12

_TASK_SEGMENT = re.compile(r"^t\d+$")


def is_task_specific(name: str) -> bool:
    """A parameter is task-specific iff a name segment is t<digits>."""
    return any(_TASK_SEGMENT.match(seg) for seg in name.split("."))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and variant switches for the desk-scale model."""

    task_channels: tuple[int, ...]
    input_channels: int = 3
    image_size: int = 32
    stage_widths: tuple[int, ...] = (8, 8, 8, 8)
    stage_downsample: tuple[int, ...] = (1, 2, 2, 2)
    layers_per_stage: int = 2
    backbone_kernel: int = 3
    ta_rank: int = 2
    ts_rank: int = 2
    ts_kernel: int = 3
    token_dim: int = 8
    proj_channels: int = 4
    decoder_channels: int = 8
    tail_kernel: int = 1
    filter_k: int = 7
    filter_sigma: float = 1.0
    use_filter: bool = True
    variant: str = "sine"
    norm_eps: float = 1e-5
    norm_momentum: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task_channels", tuple(int(c) for c in self.task_channels))
        object.__setattr__(self, "stage_widths", tuple(int(c) for c in self.stage_widths))
        object.__setattr__(self, "stage_downsample", tuple(int(c) for c in self.stage_downsample))
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.stage_widths) != len(self.stage_downsample):
            raise ContractViolation("stage_widths and stage_downsample length mismatch")
        if self.layers_per_stage < 2:
            raise ContractViolation("need >= 2 layers per stage (trailing layer is task-specific)")
        if len(self.task_channels) < 1:
            raise ContractViolation("at least one task required")
        size = self.image_size
        for f in self.stage_downsample:
            if size % f != 0:
                raise ContractViolation(f"downsample factor {f} does not divide feature size {size}")
            size //= f

    @property
    def num_tasks(self) -> int:
        return len(self.task_channels)

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    def feature_sizes(self) -> list[int]:
        sizes, size = [], self.image_size
        for f in self.stage_downsample:
            size //= f
            sizes.append(size)
        return sizes

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Parameter containers (alias the arrays in the model registry)
# ---------------------------------------------------------------------------


@dataclass
class FrozenLayer:
    kernel: ConvKernel
    is_ts: bool


@dataclass
class FrozenStage:
    downsample: int
    layers: list[FrozenLayer]


@dataclass
class FrozenBackbone:
    """Fixed convolutional stages; weights drawn once and never updated."""

    stages: list[FrozenStage]


@dataclass
class TAModuleParams:
    """Plain LoRA adapter: a per-pixel 1x1 update B A^T added to the frozen layer."""

    factors: LowRankFactors
    scaling: float = 1.0


@dataclass
class AWBBase:
    """One shared fused-kernel parameter set (low-rank factors + mid kernel)."""

    factors: LowRankFactors
    mid: MidKernel

    def param_count(self) -> int:
        f, w = self.factors, self.mid
        return f.m * f.r + f.n * f.r + w.r * w.r * w.kw * w.kw


@dataclass
class ClockState:
    """Mutable storage for clock-net parameters (scalars kept as [1] arrays)."""

    w_q: np.ndarray
    s: np.ndarray
    c: np.ndarray

    def view(self) -> ClockNetParams:
        return ClockNetParams(self.w_q, float(self.s[0]), float(self.c[0]))


@dataclass
class TSModuleParams:
    """Task-specific module: fused base(s), clock net, and the shared token bank.

    ``bases`` has exactly one entry in the shared-base regime (the sharing
    claim under test) or one per task in the independent-base ablation.
    """

    bases: list[AWBBase]
    clock: ClockState
    tokens: list[TaskToken]

    def base_for(self, task_id: int) -> AWBBase:
        return self.bases[task_id if len(self.bases) > 1 else 0]


@dataclass
class DecoderParams:
    """Per-task projections/bias/norm/tail around one shared main convolution."""

    proj: list[list[np.ndarray]]      # [task][stage] -> [P, W_i]
    bases: list[AWBBase]              # len 1 (shared) or T (independent)
    clock: ClockState
    bias: list[np.ndarray]            # [task] -> [D]
    norm_scale: list[np.ndarray]      # [task] -> [D]
    norm_shift: list[np.ndarray]      # [task] -> [D]
    running_mean: list[np.ndarray]    # state, not trained
    running_var: list[np.ndarray]
    tails: list[ConvKernel]           # [task] -> [C_t, D, kt, kt]

    def base_for(self, task_id: int) -> AWBBase:
        return self.bases[task_id if len(self.bases) > 1 else 0]


@dataclass
class GradientBundle:
    """Name -> gradient mapping matching the trainable parameters one-to-one."""

    grads: dict[str, np.ndarray]

    def accumulate(self, other: "GradientBundle", scale: float = 1.0) -> None:
        for name, g in other.grads.items():
            self.grads[name] += scale * g

    def scaled(self, scale: float) -> "GradientBundle":
        return GradientBundle({k: scale * v for k, v in self.grads.items()})

    def flat(self, names: list[str]) -> np.ndarray:
        """Concatenate the named gradients into one flat vector (fixed order)."""
        return np.concatenate([self.grads[n].ravel() for n in names]) if names else np.zeros(0)


# ---------------------------------------------------------------------------
# Modulation path shared by encoder TS layers and the decoder main conv
# ---------------------------------------------------------------------------


def _modulation_kind(variant: str) -> str:
    if variant == "linear-scale":
        return "linear"
    if variant == "no-modulation":
        return "none"
    return "sine"


def modulated_weights(base: AWBBase, clock: ClockState, token: TaskToken,
                      variant: str, filter_spec: tuple[int, float] | None):
    """Build the task kernel: fuse -> (sine | linear | identity) -> low-pass.

    Returns (weights [n,m,kw,kw], cache for the matching backward).
    """
    fused = fuse_awb(base.factors, base.mid)
    kind = _modulation_kind(variant)
    omega = 0.0
    if kind == "none":
        mod = fused.kernel4d.weights
    else:
        omega = clocknet_forward(clock.view(), token)
        mk = sine_modulate(fused, omega) if kind == "sine" else linear_scale(fused, omega)
        mod = mk.kernel.weights
    if filter_spec is not None:
        k, sigma = filter_spec
        mk_f = lowpass_filter_weights(mod, k, sigma)
    else:
        mk_f = mod
    cache = {"fused": fused, "omega": omega, "kind": kind, "filter_spec": filter_spec,
             "base": base, "clock": clock, "token": token}
    return mk_f, cache


def lowpass_filter_weights(weights: np.ndarray, k: int, sigma: float) -> np.ndarray:
    """Gaussian low-pass on raw 4-D kernel weights via their matrix view."""
    from .adapters import gauss_filter_grid, matrix_view_to_kernel4d
    n, _, _, kw = weights.shape
    filtered = gauss_filter_grid(kernel4d_to_matrix_view(weights), k, sigma)
    return matrix_view_to_kernel4d(filtered, n, kw)


def modulated_weights_backward(cache: dict, grad_weights: np.ndarray):
    """Backward through filter, modulation, fusion, and the clock net.

    Returns (param grad fragments keyed by role, token gradient or None).
    Roles: a, b, w for the base; wq, s, c for the clock.
    """
    if cache["filter_spec"] is not None:
        k, sigma = cache["filter_spec"]
        grad_weights = lowpass_backward(grad_weights, k, sigma)
    fused: FusedKernel = cache["fused"]
    kind = cache["kind"]
    if kind == "sine":
        grad_base, grad_omega = sine_backward(fused, cache["omega"], grad_weights)
    elif kind == "linear":
        grad_base, grad_omega = linear_scale_backward(fused, cache["omega"], grad_weights)
    else:
        grad_base, grad_omega = grad_weights, None
    base: AWBBase = cache["base"]
    ga, gb, gw = fuse_backward(base.factors, base.mid, grad_base)
    frags = {"a": ga, "b": gb, "w": gw}
    grad_token = None
    if grad_omega is not None:
        cg = clocknet_backward(cache["clock"].view(), cache["token"], grad_omega)
        frags.update({"wq": cg.w_q, "s": np.array([cg.s]), "c": np.array([cg.c])})
        grad_token = cg.token
    return frags, grad_token


# ---------------------------------------------------------------------------
# Layer forward/backward (batched)
# ---------------------------------------------------------------------------


def _ta_forward_batched(layer: FrozenLayer, params: TAModuleParams, xb: np.ndarray):
    phi = conv2d_batched(xb, layer.kernel)
    w1 = params.factors.b @ params.factors.a.T          # [n, m]
    up = np.einsum("nm,bmhw->bnhw", w1, xb)
    out = phi + params.scaling * up
    cache = {"x": xb, "layer": layer, "params": params, "w1": w1}
    return out, cache


def _ta_backward_batched(cache: dict, g: np.ndarray):
    params: TAModuleParams = cache["params"]
    xb = cache["x"]
    g1 = params.scaling * np.einsum("bnhw,bmhw->nm", g, xb)
    grad_b = g1 @ params.factors.a
    grad_a = g1.T @ params.factors.b
    dx = conv2d_batched_input_grad(g, cache["layer"].kernel) \
        + params.scaling * np.einsum("nm,bnhw->bmhw", cache["w1"], g)
    return dx, {"a": grad_a, "b": grad_b}


def _ts_forward_batched(layer: FrozenLayer, params: TSModuleParams, xb: np.ndarray,
                        task_id: int, variant: str, filter_spec):
    weights, mod_cache = modulated_weights(
        params.base_for(task_id), params.clock, params.tokens[task_id], variant, filter_spec)
    mod_kernel = ConvKernel(weights)
    phi = conv2d_batched(xb, layer.kernel)
    cols = im2col_batched(xb, mod_kernel.kh, mod_kernel.kw)
    delta = conv2d_batched(xb, mod_kernel, cols=cols)
    out = phi + delta
    cache = {"x": xb, "cols": cols, "layer": layer, "mod_kernel": mod_kernel,
             "mod_cache": mod_cache}
    return out, cache


def _ts_backward_batched(cache: dict, g: np.ndarray):
    mod_kernel: ConvKernel = cache["mod_kernel"]
    xb = cache["x"]
    dkernel = conv2d_batched_kernel_grad(g, cache["cols"], xb.shape[1],
                                         mod_kernel.kh, mod_kernel.kw)
    frags, grad_token = modulated_weights_backward(cache["mod_cache"], dkernel)
    dx = conv2d_batched_input_grad(g, cache["layer"].kernel) \
        + conv2d_batched_input_grad(g, mod_kernel)
    return dx, frags, grad_token


def _decoder_forward_batched(feats: list[np.ndarray], dec: DecoderParams, task_id: int,
                             token: TaskToken, variant: str, filter_spec,
                             image_size: int, norm_eps: float, mode: str):
    n_img = feats[0].shape[0]
    ups, projected = [], []
    for i, f in enumerate(feats):
        p = np.einsum("pc,bchw->bphw", dec.proj[task_id][i], f)
        projected.append(p)
        ups.append(upsample_nearest_batched(p, image_size, image_size))
    xcat = np.concatenate(ups, axis=1)

    weights, mod_cache = modulated_weights(dec.base_for(task_id), dec.clock, token,
                                           variant, filter_spec)
    mod_kernel = ConvKernel(weights)
    cols = im2col_batched(xcat, mod_kernel.kh, mod_kernel.kw)
    h = conv2d_batched(xcat, mod_kernel, cols=cols) + dec.bias[task_id][None, :, None, None]

    # Normalize against the running statistics (frozen within a step): they
    # are constants for the gradient, which keeps every parameter, including
    # the pre-norm bias, genuinely load-bearing. The trainer folds each
    # batch's statistics into the running ones after its optimizer step.
    mu = dec.running_mean[task_id][None, :, None, None]
    inv_std = 1.0 / np.sqrt(dec.running_var[task_id][None, :, None, None] + norm_eps)
    xhat = (h - mu) * inv_std
    z = dec.norm_scale[task_id][None, :, None, None] * xhat \
        + dec.norm_shift[task_id][None, :, None, None]
    a = np.maximum(z, 0.0)
    tail = dec.tails[task_id]
    tail_cols = im2col_batched(a, tail.kh, tail.kw)
    pred = conv2d_batched(a, tail, cols=tail_cols)

    cache = {"feats": feats, "projected": projected, "xcat": xcat, "cols": cols,
             "mod_kernel": mod_kernel, "mod_cache": mod_cache, "xhat": xhat,
             "inv_std": inv_std, "z": z, "a": a, "tail_cols": tail_cols,
             "task_id": task_id, "dec": dec, "mode": mode, "n_img": n_img,
             "batch_mu": h.mean(axis=(2, 3)), "batch_var": h.var(axis=(2, 3))}
    return pred, cache


def _decoder_backward_batched(cache: dict, g: np.ndarray):
    dec: DecoderParams = cache["dec"]
    t = cache["task_id"]
    if cache["mode"] != "train":
        raise ContractViolation("backward requires a cache from a train-mode forward")
    tail = dec.tails[t]
    grad_tail = conv2d_batched_kernel_grad(g, cache["tail_cols"], tail.in_channels,
                                           tail.kh, tail.kw)
    da = conv2d_batched_input_grad(g, tail)
    dz = da * (cache["z"] > 0.0)
    xhat = cache["xhat"]
    grad_scale = np.einsum("bchw->c", dz * xhat)
    grad_shift = np.einsum("bchw->c", dz)
    dxhat = dz * dec.norm_scale[t][None, :, None, None]
    # Running statistics are constants, so the normalization is affine.
    dh = cache["inv_std"] * dxhat

    grad_bias = np.einsum("bchw->c", dh)
    mod_kernel: ConvKernel = cache["mod_kernel"]
    dkernel = conv2d_batched_kernel_grad(dh, cache["cols"], cache["xcat"].shape[1],
                                         mod_kernel.kh, mod_kernel.kw)
    frags, grad_token = modulated_weights_backward(cache["mod_cache"], dkernel)
    dxcat = conv2d_batched_input_grad(dh, mod_kernel)

    p = dec.proj[t][0].shape[0]
    dfeats, grad_proj = [], []
    for i, f in enumerate(cache["feats"]):
        dup = dxcat[:, i * p:(i + 1) * p]
        dproj_out = upsample_nearest_batched_grad(dup, f.shape[2], f.shape[3])
        grad_proj.append(np.einsum("bphw,bchw->pc", dproj_out, f))
        dfeats.append(np.einsum("pc,bphw->bchw", dec.proj[t][i], dproj_out))

    dec_frags = {"mod": frags, "tail": grad_tail, "scale": grad_scale, "shift": grad_shift,
                 "bias": grad_bias, "proj": grad_proj}
    return dfeats, dec_frags, grad_token


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


@dataclass
class ModelCache:
    task_id: int
    mode: str
    version: int
    x: np.ndarray
    stage_caches: list[list[dict]]
    dec_cache: dict
    batch: bool


class MTLModel:
    """Frozen backbone + adapters + decoder with exact reverse-mode gradients."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self._version = 0
        self._build()

    # -- construction ------------------------------------------------------

    def _reg(self, name: str, arr: np.ndarray) -> np.ndarray:
        arr = as_tensor(arr)
        self.params[name] = arr
        return arr

    def _build(self) -> None:
        cfg = self.config
        bb_stream = RandomStream(cfg.init_seed, _STREAM_BACKBONE)
        pstream = RandomStream(cfg.init_seed, _STREAM_PARAMS)
        k = cfg.backbone_kernel

        stages = []
        self.encoder_adapters: list[list[TAModuleParams | TSModuleParams]] = []

        self.tokens = [
            TaskToken(self._reg(f"token.t{t}", pstream.normal(cfg.token_dim)), t)
            for t in range(cfg.num_tasks)
        ]

        prev = cfg.input_channels
        for i, (width, down) in enumerate(zip(cfg.stage_widths, cfg.stage_downsample)):
            layers, adapters = [], []
            for j in range(cfg.layers_per_stage):
                c_in = prev if j == 0 else width
                is_ts = j == cfg.layers_per_stage - 1
                w = bb_stream.normal((width, c_in, k, k), sigma=np.sqrt(1.0 / (c_in * k * k)))
                layers.append(FrozenLayer(ConvKernel(w), is_ts))
                name = f"enc.s{i}.l{j}"
                if is_ts:
                    adapters.append(self._make_ts(name, width, width, pstream))
                else:
                    adapters.append(self._make_ta(name, c_in, width, pstream))
            stages.append(FrozenStage(down, layers))
            self.encoder_adapters.append(adapters)
            prev = width
        self.backbone = FrozenBackbone(stages)

        self.decoder = self._make_decoder(pstream)

    def _make_ta(self, name: str, m: int, n: int, stream: RandomStream) -> TAModuleParams:
        r = min(self.config.ta_rank, m, n)
        a = self._reg(f"{name}.ta.A", stream.normal((m, r), sigma=1.0 / np.sqrt(m)))
        b = self._reg(f"{name}.ta.B", np.zeros((n, r)))
        return TAModuleParams(LowRankFactors(a, b), scaling=1.0)

    def _make_awb(self, prefix: str, m: int, n: int, stream: RandomStream) -> AWBBase:
        cfg = self.config
        r = min(cfg.ts_rank, m, n)
        kw = cfg.ts_kernel
        a = self._reg(f"{prefix}.A", stream.normal((m, r)))
        b = self._reg(f"{prefix}.B", stream.normal((n, r)))
        w = self._reg(f"{prefix}.W", stream.normal((r, r, kw, kw),
                                                   sigma=np.sqrt(1.0 / (r * kw * kw))))
        return AWBBase(LowRankFactors(a, b), MidKernel(w))

    def _make_clock(self, prefix: str, stream: RandomStream) -> ClockState:
        cfg = self.config
        wq = self._reg(f"{prefix}.wq", stream.normal((1, cfg.token_dim), sigma=0.02))
        s = self._reg(f"{prefix}.s", np.ones(1))
        c = self._reg(f"{prefix}.c", np.ones(1))
        return ClockState(wq, s, c)

    def _base_names(self, prefix: str) -> list[str]:
        cfg = self.config
        if self._independent(prefix):
            return [f"{prefix}.t{t}" for t in range(cfg.num_tasks)]
        return [prefix]

    def _independent(self, prefix: str) -> bool:
        v = self.config.variant
        if v == "independent-base":
            return True
        return v == "independent-decoder" and prefix.startswith("dec.")

    def _make_ts(self, name: str, m: int, n: int, stream: RandomStream) -> TSModuleParams:
        bases = [self._make_awb(bn, m, n, stream)
                 for bn in self._base_names(f"{name}.ts.base")]
        clock = self._make_clock(f"{name}.ts.clock", stream)
        return TSModuleParams(bases, clock, self.tokens)

    def _make_decoder(self, stream: RandomStream) -> DecoderParams:
        cfg = self.config
        p, d = cfg.proj_channels, cfg.decoder_channels
        proj = [
            [self._reg(f"dec.proj.t{t}.s{i}",
                       stream.normal((p, w), sigma=1.0 / np.sqrt(w)))
             for i, w in enumerate(cfg.stage_widths)]
            for t in range(cfg.num_tasks)
        ]
        m_in = p * cfg.num_stages
        bases = [self._make_awb(bn, m_in, d, stream) for bn in self._base_names("dec.base")]
        clock = self._make_clock("dec.clock", stream)
        bias = [self._reg(f"dec.bias.t{t}", np.zeros(d)) for t in range(cfg.num_tasks)]
        scale = [self._reg(f"dec.norm.t{t}.scale", np.ones(d)) for t in range(cfg.num_tasks)]
        shift = [self._reg(f"dec.norm.t{t}.shift", np.zeros(d)) for t in range(cfg.num_tasks)]
        kt = cfg.tail_kernel
        tails = [
            ConvKernel(self._reg(f"dec.tail.t{t}",
                                 stream.normal((c, d, kt, kt), sigma=np.sqrt(1.0 / (d * kt * kt)))))
            for t, c in enumerate(cfg.task_channels)
        ]
        running_mean = [np.zeros(d) for _ in range(cfg.num_tasks)]
        running_var = [np.ones(d) for _ in range(cfg.num_tasks)]
        return DecoderParams(proj, bases, clock, bias, scale, shift,
                             running_mean, running_var, tails)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def filter_spec(self) -> tuple[int, float] | None:
        cfg = self.config
        return (cfg.filter_k, cfg.filter_sigma) if cfg.use_filter else None

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def shared_encoder_names(self) -> list[str]:
        """Shared (non-task-specific) encoder parameters, the conflict view."""
        return [n for n in self.parameter_names()
                if n.startswith("enc.") and not is_task_specific(n)]

    def parameter_counts(self) -> dict:
        total = sum(v.size for v in self.params.values())
        shared = sum(v.size for n, v in self.params.items() if not is_task_specific(n))
        encoder = sum(v.size for n, v in self.params.items() if n.startswith("enc."))
        return {
            "total": int(total),
            "shared": int(shared),
            "task_specific": int(total - shared),
            "encoder": int(encoder),
            "decoder": int(sum(v.size for n, v in self.params.items() if n.startswith("dec."))),
        }

    def zero_bundle(self) -> GradientBundle:
        return GradientBundle({n: np.zeros_like(v) for n, v in self.params.items()})

    def bump_version(self) -> None:
        """Invalidate outstanding caches after a parameter update."""
        self._version += 1

    def _check_task(self, task_id: int) -> None:
        if not 0 <= task_id < self.config.num_tasks:
            raise ContractViolation(
                f"unknown taskId {task_id}; model has {self.config.num_tasks} tasks")

    # -- forward / backward --------------------------------------------------

    def forward_batch(self, xb: np.ndarray, task_id: int, mode: str = "train"):
        """Run a [N,C,H,W] batch for one task; returns (pred, cache)."""
        self._check_task(task_id)
        xb = as_tensor(xb)
        cfg = self.config
        if xb.ndim != 4 or xb.shape[1:] != (cfg.input_channels, cfg.image_size,
                                            cfg.image_size):
            raise ContractViolation(
                f"input shape {xb.shape} does not match configured "
                f"[N,{cfg.input_channels},{cfg.image_size},{cfg.image_size}]")
        token = self.tokens[task_id]
        h = xb
        feats, stage_caches = [], []
        for stage, adapters in zip(self.backbone.stages, self.encoder_adapters):
            h = downsample_mean_batched(h, stage.downsample)
            caches = []
            for layer, ad in zip(stage.layers, adapters):
                if layer.is_ts:
                    h, c = _ts_forward_batched(layer, ad, h, task_id, cfg.variant,
                                               self.filter_spec)
                else:
                    h, c = _ta_forward_batched(layer, ad, h)
                caches.append(c)
            stage_caches.append(caches)
            feats.append(h)
        pred, dec_cache = _decoder_forward_batched(
            feats, self.decoder, task_id, token, cfg.variant, self.filter_spec,
            cfg.image_size, cfg.norm_eps, mode)
        cache = ModelCache(task_id, mode, self._version, xb, stage_caches, dec_cache, True)
        return pred, cache

    def forward(self, x: np.ndarray, task_id: int, mode: str = "train"):
        """Single-image forward: [C,H,W] -> ([C_t,H,W], cache)."""
        pred, cache = self.forward_batch(as_tensor(x)[None], task_id, mode)
        cache.batch = False
        return pred[0], cache

    def backward(self, cache: ModelCache, grad_pred: np.ndarray) -> GradientBundle:
        """Exact gradients of a scalar loss given d(loss)/d(prediction).

        The cache must come from a train-mode forward of this model at the
        current parameter version; frozen backbone weights get no entries
        beyond their absence from the registry.
        """
        if cache.version != self._version:
            raise ContractViolation("stale cache: parameters changed since forward")
        if cache.mode != "train":
            raise ContractViolation("backward requires a train-mode cache")
        g = as_tensor(grad_pred)
        if not cache.batch:
            g = g[None]
        t = cache.task_id
        bundle = self.zero_bundle()
        grads = bundle.grads

        dfeats, dec_frags, dec_grad_token = _decoder_backward_batched(cache.dec_cache, g)
        self._apply_mod_frags("dec", dec_frags["mod"], t, grads)
        grads[f"dec.tail.t{t}"] += dec_frags["tail"]
        grads[f"dec.norm.t{t}.scale"] += dec_frags["scale"]
        grads[f"dec.norm.t{t}.shift"] += dec_frags["shift"]
        grads[f"dec.bias.t{t}"] += dec_frags["bias"]
        for i, gp in enumerate(dec_frags["proj"]):
            grads[f"dec.proj.t{t}.s{i}"] += gp
        if dec_grad_token is not None:
            grads[f"token.t{t}"] += dec_grad_token

        gfeat = None
        for i in reversed(range(self.config.num_stages)):
            gcur = dfeats[i] if gfeat is None else dfeats[i] + gfeat
            caches = cache.stage_caches[i]
            for j in reversed(range(len(caches))):
                layer_cache = caches[j]
                name = f"enc.s{i}.l{j}"
                if "mod_cache" in layer_cache:
                    gcur, frags, grad_token = _ts_backward_batched(layer_cache, gcur)
                    self._apply_mod_frags(name + ".ts", frags, t, grads, encoder=True)
                    if grad_token is not None:
                        grads[f"token.t{t}"] += grad_token
                else:
                    gcur, frags = _ta_backward_batched(layer_cache, gcur)
                    grads[f"{name}.ta.A"] += frags["a"]
                    grads[f"{name}.ta.B"] += frags["b"]
            gfeat = downsample_mean_batched_grad(gcur, self.backbone.stages[i].downsample)
        return bundle

    def _apply_mod_frags(self, prefix: str, frags: dict, task_id: int,
                         grads: dict, encoder: bool = False) -> None:
        base_prefix = f"{prefix}.base" if encoder else "dec.base"
        clock_prefix = f"{prefix}.clock" if encoder else "dec.clock"
        if self._independent(base_prefix):
            base_prefix = f"{base_prefix}.t{task_id}"
        grads[f"{base_prefix}.A"] += frags["a"]
        grads[f"{base_prefix}.B"] += frags["b"]
        grads[f"{base_prefix}.W"] += frags["w"]
        if "wq" in frags:
            grads[f"{clock_prefix}.wq"] += frags["wq"]
            grads[f"{clock_prefix}.s"] += frags["s"]
            grads[f"{clock_prefix}.c"] += frags["c"]

    # -- norm running statistics (trainer-driven; forward stays pure) --------

    def update_running_stats(self, cache: ModelCache) -> None:
        """Fold the cached per-image norm statistics into the running ones.

        Forward passes never mutate the model; this is the trainer's explicit
        post-step state update."""
        t = cache.task_id
        mom = self.config.norm_momentum
        mu = cache.dec_cache["batch_mu"].mean(axis=0)
        var = cache.dec_cache["batch_var"].mean(axis=0)
        self.decoder.running_mean[t] *= 1.0 - mom
        self.decoder.running_mean[t] += mom * mu
        self.decoder.running_var[t] *= 1.0 - mom
        self.decoder.running_var[t] += mom * var

    # -- introspection --------------------------------------------------------

    def task_kernels(self, task_id: int) -> dict[str, np.ndarray]:
        """Materialize every task-specialized kernel's matrix view for a task."""
        self._check_task(task_id)
        cfg = self.config
        out = {}
        for i, adapters in enumerate(self.encoder_adapters):
            for j, ad in enumerate(adapters):
                if isinstance(ad, TSModuleParams):
                    w, _ = modulated_weights(ad.base_for(task_id), ad.clock,
                                             self.tokens[task_id], cfg.variant,
                                             self.filter_spec)
                    out[f"enc.s{i}.l{j}.ts"] = kernel4d_to_matrix_view(w)
        w, _ = modulated_weights(self.decoder.base_for(task_id), self.decoder.clock,
                                 self.tokens[task_id], cfg.variant, self.filter_spec)
        out["dec"] = kernel4d_to_matrix_view(w)
        return out


# ---------------------------------------------------------------------------
# Single-image entry points
# ---------------------------------------------------------------------------


def ta_forward(layer: FrozenLayer, params: TAModuleParams, x: np.ndarray) -> np.ndarray:
    """Frozen layer plus scaled per-pixel low-rank update (single image)."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != layer.kernel.in_channels:
        raise ContractViolation(f"input shape {x.shape} does not match layer "
                                f"in_channels {layer.kernel.in_channels}")
    out, _ = _ta_forward_batched(layer, params, x[None])
    return out[0]


def ts_forward(layer: FrozenLayer, params: TSModuleParams, x: np.ndarray, task_id: int,
               variant: str = "sine",
               filter_spec: tuple[int, float] | None = (7, 1.0)) -> np.ndarray:
    """Frozen layer plus convolution with the task's frequency-switched kernel."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != layer.kernel.in_channels:
        raise ContractViolation(f"input shape {x.shape} does not match layer "
                                f"in_channels {layer.kernel.in_channels}")
    out, _ = _ts_forward_batched(layer, params, x[None], task_id, variant, filter_spec)
    return out[0]


def decoder_forward(multiscale: list[np.ndarray], params: DecoderParams, task_id: int,
                    token: TaskToken, image_size: int, variant: str = "sine",
                    filter_spec: tuple[int, float] | None = (7, 1.0),
                    norm_eps: float = 1e-5, mode: str = "train") -> np.ndarray:
    """Project -> upsample -> concat -> switched conv + bias -> norm -> relu -> conv."""
    if len(multiscale) != len(params.proj[task_id]):
        raise ContractViolation(
            f"expected {len(params.proj[task_id])} stage features, got {len(multiscale)}")
    for i, (f, proj) in enumerate(zip(multiscale, params.proj[task_id])):
        if np.asarray(f).shape[0] != proj.shape[1]:
            raise ContractViolation(
                f"stage {i} feature has {np.asarray(f).shape[0]} channels, "
                f"projection expects {proj.shape[1]}")
    feats = [as_tensor(f)[None] for f in multiscale]
    pred, _ = _decoder_forward_batched(feats, params, task_id, token, variant,
                                       filter_spec, image_size, norm_eps, mode)
    return pred[0]


def model_forward(model: MTLModel, x: np.ndarray, task_id: int, mode: str = "train"):
    """Single-image forward pass; returns (prediction, cache)."""
    return model.forward(x, task_id, mode)


def model_backward(model: MTLModel, cache: ModelCache, loss_gradient: np.ndarray) -> GradientBundle:
    """Reverse-mode gradients for every trainable tensor."""
    return model.backward(cache, loss_gradient)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def finite_diff_check(model: MTLModel, x: np.ndarray, task_id: int, h: float = 1e-6,
                      target: np.ndarray | None = None,
                      max_params: int = 50_000) -> dict[str, float]:
    """Compare analytic gradients with central finite differences.

    The scalar loss is the mean squared error of the prediction against
    ``target`` (zeros if omitted). Every coordinate of every trainable tensor
    is perturbed by +-h. Reported per tensor: max |analytic - fd| /
    max(|analytic|, |fd|, 1e-8).
    """
    total = sum(v.size for v in model.params.values())
    if total > max_params:
        raise ContractViolation(
            f"refusing finite differences on {total} > {max_params} parameters")
    x = as_tensor(x)

    def loss() -> float:
        pred, _ = model.forward(x, task_id)
        tgt = np.zeros_like(pred) if target is None else target
        return float(np.mean((pred - tgt) ** 2))

    pred, cache = model.forward(x, task_id)
    tgt = np.zeros_like(pred) if target is None else as_tensor(target)
    upstream = 2.0 * (pred - tgt) / pred.size
    bundle = model.backward(cache, upstream)

    report: dict[str, float] = {}
    for name in model.parameter_names():
        arr = model.params[name]
        analytic = bundle.grads[name]
        worst = 0.0
        flat = arr.ravel()
        aflat = analytic.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss()
            flat[idx] = orig - h
            lm = loss()
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            denom = max(abs(aflat[idx]), abs(fd), 1e-8)
            worst = max(worst, float(abs(aflat[idx] - fd) / denom))
        report[name] = worst
    return report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(model: MTLModel, path) -> None:
    """Write all parameter tensors (plus norm running stats) with names,
    shapes, and the config hash to a single .npz file."""
    arrays = {f"param:{k}": v for k, v in model.params.items()}
    for t in range(model.config.num_tasks):
        arrays[f"state:running_mean.t{t}"] = model.decoder.running_mean[t]
        arrays[f"state:running_var.t{t}"] = model.decoder.running_var[t]
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                          dtype=np.uint8), **arrays)


def load_checkpoint(path) -> MTLModel:
    """Rebuild a model from a checkpoint, verifying the stored config hash."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ContractViolation(
                f"unsupported checkpoint format version {meta['format_version']}")
        cfg_dict = meta["config"]
        cfg = ModelConfig(**cfg_dict)
        if cfg.config_hash() != meta["config_hash"]:
            raise ContractViolation("checkpoint config hash mismatch")
        model = MTLModel(cfg)
        for key in data.files:
            if key.startswith("param:"):
                name = key[len("param:"):]
                if name not in model.params:
                    raise ContractViolation(f"checkpoint has unknown parameter {name!r}")
                model.params[name][...] = data[key]
            elif key.startswith("state:running_mean.t"):
                t = int(key.rsplit(".t", 1)[1])
                model.decoder.running_mean[t][...] = data[key]
            elif key.startswith("state:running_var.t"):
                t = int(key.rsplit(".t", 1)[1])
                model.decoder.running_var[t][...] = data[key]
    return model
