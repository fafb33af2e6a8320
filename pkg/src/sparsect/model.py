"""ResAttUnet and the half-width U-Net baseline.

Both models share one builder skeleton: a five-level encoder of double-conv
blocks (3x3, same padding, conv->BN->ReLU) joined by 2x2 max-pools, and a
decoder of stride-2 transposed convolutions with skip concatenation and a
final linear 1x1 head. The residual variant adds the second conv's input back
onto its output (the skip spans exactly one conv, so channel counts always
match without projections); the attention variant gates the upsampled decoder
feature with a single-channel sigmoid map before concatenation.

Weights are He-uniform (fan-in of the receiving conv), biases zero, BN scale
one/shift zero, drawn from a Philox generator in construction order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import GraphError, ParameterError
from .phantom import rng_from_seed
from .tensor import O0, Parameter, PrecisionPolicy, Tensor, apply_policy

DOWNSAMPLE_LEVELS = 4           # pools between the five encoder blocks
SIZE_MULTIPLE = 2 ** DOWNSAMPLE_LEVELS


@dataclass(frozen=True)
class ModelConfig:
    encoder_filters: tuple = (32, 64, 128, 256, 512)
    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 3
    use_attention: bool = True
    use_residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_filters", tuple(self.encoder_filters))
        f = self.encoder_filters
        if len(f) != 5:
            raise ParameterError(f"encoder_filters must have length 5, got {len(f)}")
        for a, b in zip(f, f[1:]):
            if b != 2 * a:
                raise ParameterError(f"encoder_filters must strictly double, got {f}")
        if self.kernel % 2 != 1:
            raise ParameterError("kernel must be odd so convolutions preserve H and W")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be >= 1")

    @property
    def pad(self) -> int:
        return self.kernel // 2

    def to_dict(self) -> dict:
        return {
            "encoder_filters": list(self.encoder_filters),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "use_attention": self.use_attention,
            "use_residual": self.use_residual,
        }


@dataclass
class ForwardContext:
    mode: str = "eval"
    fp16: bool = False


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    def __init__(self, name, cin, cout, k, rng, stride=1, pad=0):
        self.stride = stride
        self.pad = pad
        self.w = Parameter(_he_uniform(rng, (cout, cin, k, k), cin * k * k), f"{name}.w")
        self.b = Parameter(np.zeros(cout, np.float32), f"{name}.b")

    def forward(self, x, ctx):
        return ops.conv2d(x, self.w.compute, self.b.compute,
                          stride=self.stride, pad=self.pad, fp16=ctx.fp16)

    def parameters(self):
        return [self.w, self.b]


class ConvTranspose2d:
    def __init__(self, name, cin, cout, k, rng, stride=2):
        self.stride = stride
        self.w = Parameter(_he_uniform(rng, (cin, cout, k, k), cin * k * k), f"{name}.w")
        self.b = Parameter(np.zeros(cout, np.float32), f"{name}.b")

    def forward(self, x, ctx):
        return ops.conv_transpose2d(x, self.w.compute, self.b.compute,
                                    stride=self.stride, fp16=ctx.fp16)

    def parameters(self):
        return [self.w, self.b]


class BatchNorm2d:
    def __init__(self, name, channels, eps=1e-5, momentum=0.1):
        self.eps = eps
        self.momentum = momentum
        self.name = name
        self.gamma = Parameter(np.ones(channels, np.float32), f"{name}.gamma", fp32_only=True)
        self.beta = Parameter(np.zeros(channels, np.float32), f"{name}.beta", fp32_only=True)
        self.running = ops.RunningStats(channels)

    def forward(self, x, ctx):
        return ops.batchnorm2d(x, self.gamma.compute, self.beta.compute, self.eps,
                               ctx.mode, self.running, self.momentum)

    def parameters(self):
        return [self.gamma, self.beta]


class ResConvBlock:
    """conv->BN->ReLU, then conv->BN with the skip adding back the second
    conv's input, and a final ReLU. With use_residual=False it is the plain
    double-conv block."""

    def __init__(self, name, cin, cout, k, pad, rng, use_residual):
        self.use_residual = use_residual
        self.conv1 = Conv2d(f"{name}.conv1", cin, cout, k, rng, pad=pad)
        self.bn1 = BatchNorm2d(f"{name}.bn1", cout)
        self.conv2 = Conv2d(f"{name}.conv2", cout, cout, k, rng, pad=pad)
        self.bn2 = BatchNorm2d(f"{name}.bn2", cout)

    def forward(self, x, ctx):
        y1 = ops.relu(self.bn1.forward(self.conv1.forward(x, ctx), ctx))
        z = self.bn2.forward(self.conv2.forward(y1, ctx), ctx)
        if self.use_residual:
            z = ops.add(z, y1, fp16=ctx.fp16)
        return ops.relu(z)

    def parameters(self):
        return (self.conv1.parameters() + self.bn1.parameters()
                + self.conv2.parameters() + self.bn2.parameters())


class AttentionGate:
    """Single-channel spatial gate: both branches pass 1x1 convs, their
    concatenation is squeezed to one filter, and the sigmoid map multiplies
    the decoder feature."""

    def __init__(self, name, filters, rng):
        self.theta = Conv2d(f"{name}.theta", filters, filters, 1, rng)
        self.phi = Conv2d(f"{name}.phi", filters, filters, 1, rng)
        self.psi = Conv2d(f"{name}.psi", 2 * filters, 1, 1, rng)

    def forward(self, skip, g, ctx):
        a = self.theta.forward(skip, ctx)
        b = self.phi.forward(g, ctx)
        alpha = ops.sigmoid(self.psi.forward(ops.relu(ops.concat_channels(a, b)), ctx),
                            fp16=ctx.fp16)
        return ops.mul(g, alpha, fp16=ctx.fp16)

    def parameters(self):
        return self.theta.parameters() + self.phi.parameters() + self.psi.parameters()


class DecoderStage:
    def __init__(self, name, below_filters, filters, k, pad, rng,
                 use_attention, use_residual):
        self.up = ConvTranspose2d(f"{name}.up", below_filters, filters, 2, rng, stride=2)
        self.gate = AttentionGate(f"{name}.gate", filters, rng) if use_attention else None
        self.block = ResConvBlock(f"{name}.block", 2 * filters, filters, k, pad, rng,
                                  use_residual)

    def forward(self, h, skip, ctx):
        g = self.up.forward(h, ctx)
        gated = self.gate.forward(skip, g, ctx) if self.gate is not None else g
        return self.block.forward(ops.concat_channels(skip, gated), ctx)

    def parameters(self):
        out = self.up.parameters()
        if self.gate is not None:
            out += self.gate.parameters()
        return out + self.block.parameters()


class NetworkGraph:
    """A built encoder-decoder model: ordered layers plus the named parameter
    table. Input H and W must be divisible by 16; output dims equal input dims."""

    def __init__(self, name, config: ModelConfig, seed: int):
        self.name = name
        self.config = config
        self.seed = seed
        rng = rng_from_seed(seed)
        f = config.encoder_filters
        k, pad = config.kernel, config.pad

        self.encoders = []
        cin = config.in_channels
        for i, cout in enumerate(f):
            self.encoders.append(ResConvBlock(f"enc{i}", cin, cout, k, pad, rng,
                                              config.use_residual))
            cin = cout
        self.decoders = []
        for i in range(len(f) - 2, -1, -1):
            self.decoders.append(DecoderStage(f"dec{i}", f[i + 1], f[i], k, pad, rng,
                                              config.use_attention, config.use_residual))
        self.head = Conv2d("head", f[0], config.out_channels, 1, rng)

    def forward(self, x: Tensor, mode: str = "eval",
                policy: PrecisionPolicy = O0) -> Tensor:
        if x.data.ndim != 4 or x.dims[1] != self.config.in_channels:
            raise GraphError(f"input dims {x.dims} do not match the graph contract")
        if x.dims[2] % SIZE_MULTIPLE or x.dims[3] % SIZE_MULTIPLE:
            raise GraphError(
                f"input H,W must be divisible by {SIZE_MULTIPLE}, got {x.dims}")
        ctx = ForwardContext(mode=mode, fp16=policy.is_o2)

        skips = []
        h = x
        for i, enc in enumerate(self.encoders):
            h = enc.forward(h, ctx)
            if i < len(self.encoders) - 1:
                skips.append(h)
                h, _ = ops.maxpool2d(h, 2, 2)
        for dec, skip in zip(self.decoders, reversed(skips)):
            h = dec.forward(h, skip, ctx)
        return self.head.forward(h, ctx)

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> list:
        out = []
        for enc in self.encoders:
            out += enc.parameters()
        for dec in self.decoders:
            out += dec.parameters()
        out += self.head.parameters()
        return out

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def batchnorms(self) -> list:
        bns = []
        for block in ([e for e in self.encoders]
                      + [d.block for d in self.decoders]):
            bns += [block.bn1, block.bn2]
        return bns

    def named_buffers(self) -> dict:
        out = {}
        for bn in self.batchnorms():
            out[f"{bn.name}.running_mean"] = bn.running.mean
            out[f"{bn.name}.running_var"] = bn.running.var
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def fp32_exempt_parameter_names(self) -> set:
        return {p.name for p in self.parameters() if p.fp32_only}

    def apply_policy(self, policy: PrecisionPolicy) -> None:
        for p in self.parameters():
            apply_policy(p, policy)

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict:
        """Masters plus BN buffers, for snapshots and checkpoints."""
        out = {p.name: p.master.data for p in self.parameters()}
        out.update(self.named_buffers())
        return out

    def load_state(self, arrays: dict) -> None:
        own = self.state_arrays()
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise GraphError(f"state mismatch: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for name, arr in own.items():
            src = np.asarray(arrays[name], dtype=np.float32)
            if src.shape != arr.shape:
                raise GraphError(f"state {name}: shape {src.shape} != {arr.shape}")
            arr[...] = src


def build_resattunet(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> NetworkGraph:
    return NetworkGraph("resattunet", cfg, seed)


def build_unet(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> NetworkGraph:
    plain = ModelConfig(encoder_filters=cfg.encoder_filters,
                        in_channels=cfg.in_channels, out_channels=cfg.out_channels,
                        kernel=cfg.kernel, use_attention=False, use_residual=False)
    return NetworkGraph("unet", plain, seed)


def build_model(kind: str, cfg: ModelConfig = ModelConfig(), seed: int = 0) -> NetworkGraph:
    if kind == "resattunet":
        return build_resattunet(cfg, seed)
    if kind == "unet":
        return build_unet(cfg, seed)
    raise ParameterError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# memory accounting

BYTES_FP32 = 4
BYTES_FP16 = 2


def memory_report(graph: NetworkGraph, policy: PrecisionPolicy,
                  input_shape: tuple) -> dict:
    """Analytic byte accounting for one forward/backward at the given input.

    Activations are every operator output, 2 bytes per element where the
    policy stores FP16 and 4 where it does not (batch norm stays FP32).
    Parameters count the FP32 masters plus, under O2, the separate FP16
    compute copies; gradients are FP32 per parameter element.
    """
    if len(input_shape) != 4:
        raise GraphError(f"input shape must be rank 4, got {input_shape}")
    if input_shape[2] % SIZE_MULTIPLE or input_shape[3] % SIZE_MULTIPLE:
        raise GraphError(f"unresolved graph shapes: H,W of {input_shape} "
                         f"not divisible by {SIZE_MULTIPLE}")

    zeros = Tensor(np.zeros(input_shape, np.float32))
    with ops.record_activations() as trace:
        graph.forward(zeros, mode="eval", policy=policy)

    act_bytes = 0
    for _op, nelem, dtype in trace:
        act_bytes += nelem * (BYTES_FP16 if dtype == "fp16e" else BYTES_FP32)

    n_param = graph.parameter_count()
    param_bytes = n_param * BYTES_FP32
    if policy.is_o2:
        exempt = sum(p.size for p in graph.parameters() if p.fp32_only)
        param_bytes += (n_param - exempt) * BYTES_FP16
    grad_bytes = n_param * BYTES_FP32

    return {
        "parameters": int(param_bytes),
        "activations": int(act_bytes),
        "gradients": int(grad_bytes),
        "total": int(param_bytes + act_bytes + grad_bytes),
    }
