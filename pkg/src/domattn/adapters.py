"""Channel-attention adapters and the domain-attention module.

Three routing regimes over the same squeeze-and-excitation branch family:

* a single SE adapter gating one feature map,
* a hard-switched bank selecting one branch per known domain,
* a universal bank evaluating all branches and soft-mixing their
  excitations with an input-conditioned attention vector, so no domain
  identity is needed at inference time.

Excitations are kept pre-sigmoid inside the universal bank; the sigmoid
is applied once to the mixed response before rescaling.  A one-hot
mixing vector therefore reproduces the hard switch exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    channelwise_scale,
    concat_columns,
    fully_connected,
    global_avg_pool,
    init_uniform,
    mix_columns,
    relu,
    sigmoid,
    softmax,
)

ROUTING_MODES = ("learned", "fixed_average", "forced")


class DomainIndexError(IndexError):
    """A hard switch or forced route addressed a branch that does not exist."""


def hidden_width(channels: int, reduction: int) -> int:
    """Bottleneck width of one adapter branch: max(1, floor(C / r))."""
    return max(1, channels // reduction)


@dataclass
class SEAdapterParams:
    """One squeeze-and-excitation branch: pool -> FC -> ReLU -> FC.

    w1: (d, C), w2: (C, d) with d = max(1, floor(C / r)).  Biases are
    optional (standard practice keeps them; the ablation flag drops them).
    """

    w1: Tensor
    b1: Tensor | None
    w2: Tensor
    b2: Tensor | None
    reduction: int

    @property
    def channels(self) -> int:
        return self.w2.data.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.data.shape[0]

    def __post_init__(self):
        c, d = self.channels, self.hidden
        expect = hidden_width(c, self.reduction)
        if d != expect:
            raise ShapeError(f"adapter hidden width {d} != max(1, {c}//{self.reduction})")
        if self.w1.data.shape != (d, c) or self.w2.data.shape != (c, d):
            raise ShapeError(
                f"adapter weights {self.w1.data.shape}/{self.w2.data.shape} "
                f"inconsistent with C={c}, d={d}"
            )
        if self.b1 is not None and self.b1.data.shape != (d,):
            raise ShapeError(f"b1 shape {self.b1.data.shape} != ({d},)")
        if self.b2 is not None and self.b2.data.shape != (c,):
            raise ShapeError(f"b2 shape {self.b2.data.shape} != ({c},)")

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        reduction: int = 16,
        bias: bool = True,
    ) -> "SEAdapterParams":
        d = hidden_width(channels, reduction)
        w1 = Tensor(init_uniform(rng, (d, channels), channels), requires_grad=True)
        w2 = Tensor(init_uniform(rng, (channels, d), d), requires_grad=True)
        b1 = Tensor(np.zeros(d), requires_grad=True) if bias else None
        b2 = Tensor(np.zeros(channels), requires_grad=True) if bias else None
        return cls(w1=w1, b1=b1, w2=w2, b2=b2, reduction=reduction)

    def parameters(self) -> list[Tensor]:
        return [t for t in (self.w1, self.b1, self.w2, self.b2) if t is not None]


@dataclass
class DAModuleParams:
    """A universal adapter bank plus its attention routing.

    mode "learned" mixes with softmax(w_da @ pooled input); "fixed_average"
    pins the mixing vector at uniform 1/N; "forced" one-hot-selects branch
    `forced_index` (a test/emulation mode, not a trained regime).
    """

    adapters: list[SEAdapterParams]
    w_da: Tensor
    mode: str = "learned"
    forced_index: int | None = None

    def __post_init__(self):
        if not self.adapters:
            raise ShapeError("DA module needs at least one adapter")
        c = self.adapters[0].channels
        if any(a.channels != c for a in self.adapters):
            raise ShapeError("DA module adapters must share the channel count")
        n = len(self.adapters)
        if self.w_da.data.shape != (n, c):
            raise ShapeError(
                f"attention weights {self.w_da.data.shape} != ({n}, {c})"
            )
        if self.mode not in ROUTING_MODES:
            raise ValueError(f"unknown routing mode {self.mode!r}")
        if self.mode == "forced":
            if self.forced_index is None or not 0 <= self.forced_index < n:
                raise DomainIndexError(
                    f"forced index {self.forced_index} out of range for {n} adapters"
                )

    @property
    def num_adapters(self) -> int:
        return len(self.adapters)

    @property
    def channels(self) -> int:
        return self.adapters[0].channels

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        num_adapters: int,
        reduction: int = 16,
        bias: bool = True,
        mode: str = "learned",
        forced_index: int | None = None,
    ) -> "DAModuleParams":
        adapters = [
            SEAdapterParams.init(rng, channels, reduction, bias)
            for _ in range(num_adapters)
        ]
        # Zero init: training starts from the fixed-average regime and the
        # learned mode deforms away from it continuously.
        w_da = Tensor(np.zeros((num_adapters, channels)), requires_grad=True)
        return cls(adapters=adapters, w_da=w_da, mode=mode, forced_index=forced_index)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for a in self.adapters:
            out.extend(a.parameters())
        out.append(self.w_da)
        return out


def se_excitation(x: Tensor, p: SEAdapterParams) -> Tensor:
    """Pre-sigmoid excitation of one branch: W2 relu(W1 pool(x) + b1) + b2."""
    if x.data.shape[-3] != p.channels:
        raise ShapeError(
            f"se_excitation: {x.data.shape[-3]} channels vs adapter C={p.channels}"
        )
    pooled = global_avg_pool(x)
    hidden = relu(fully_connected(pooled, p.w1, p.b1))
    return fully_connected(hidden, p.w2, p.b2)


def se_adapter_forward(x: Tensor, p: SEAdapterParams, gate: bool = True) -> Tensor:
    """Standalone SE adapter: rescale x by sigmoid of its own excitation.

    `gate=False` skips the sigmoid (the deferred-gating variant kept for
    ablation).
    """
    exc = se_excitation(x, p)
    return channelwise_scale(x, sigmoid(exc) if gate else exc)


def se_bank_forward(x: Tensor, bank: list[SEAdapterParams], domain: int) -> Tensor:
    """Hard switch: evaluate only the branch of the selected domain."""
    if not 0 <= domain < len(bank):
        raise DomainIndexError(f"domain {domain} out of range for bank of {len(bank)}")
    return se_adapter_forward(x, bank[domain])


def use_bank_forward(x: Tensor, adapters: list[SEAdapterParams]) -> Tensor:
    """Universal bank: all branches always evaluated, excitations stacked
    into columns of a (..., C, N) matrix."""
    if not adapters:
        raise ShapeError("use_bank_forward: empty adapter list")
    return concat_columns([se_excitation(x, a) for a in adapters])


def domain_attention_weights(x: Tensor, w_da: Tensor) -> Tensor:
    """Attention over branches: softmax(w_da @ pool(x)), bias-free."""
    pooled = global_avg_pool(x)
    return softmax(fully_connected(pooled, w_da))


def attention_vector(x: Tensor, p: DAModuleParams) -> Tensor:
    """The mixing vector for the module's routing mode (probability vector)."""
    n = p.num_adapters
    batch = x.data.shape[:-3]
    if p.mode == "learned":
        return domain_attention_weights(x, p.w_da)
    if p.mode == "fixed_average":
        return Tensor(np.full(batch + (n,), 1.0 / n))
    one_hot = np.zeros(batch + (n,))
    one_hot[..., p.forced_index] = 1.0
    return Tensor(one_hot)


def da_module_forward(
    x: Tensor, p: DAModuleParams, return_attention: bool = False
):
    """Full module: mix the universal bank's excitations with the routing
    vector, then sigmoid-gate and rescale the input channel-wise."""
    cols = use_bank_forward(x, p.adapters)
    s = attention_vector(x, p)
    mixed = mix_columns(cols, s)
    out = channelwise_scale(x, sigmoid(mixed))
    if return_attention:
        return out, s
    return out


def adapter_param_count(
    channels: int,
    reduction: int,
    num_adapters: int,
    with_attention: bool,
    with_bias: bool = True,
) -> int:
    """Closed-form parameter count of a bank / DA module at one site.

    Must agree with exhaustive enumeration of the underlying tensors.
    """
    d = hidden_width(channels, reduction)
    per = channels * d + d * channels
    if with_bias:
        per += d + channels
    total = num_adapters * per
    if with_attention:
        total += num_adapters * channels
    return total
