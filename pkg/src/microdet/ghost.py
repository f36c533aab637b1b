"""Ghost convolutions and the CSP block built from ghost bottlenecks.

A ghost conv spends a standard conv only on c_out/ratio intrinsic channels
and derives the rest with a cheap depthwise transform, cutting both
parameters and FLOPs. C3Ghost swaps these into the bottlenecks of a
cross-stage-partial block. Closed-form parameter/FLOP counting lives here
too so the economy claim is checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .module import Module, ModuleList
from .sppf import SimConv
from .tensor import ConvSpec, GradTape, ShapeError, Tensor4, add, concat_channels


@dataclass(frozen=True)
class GhostSpec:
    c_in: int
    c_out: int
    ratio: int = 2
    primary_k: int = 1
    cheap_k: int = 3
    activation: str = "mish"

    def __post_init__(self):
        if self.ratio < 2:
            raise ShapeError("ghost", f"ratio must be >= 2, got {self.ratio}")
        if self.c_out % self.ratio:
            raise ShapeError("ghost", f"c_out {self.c_out} not divisible by ratio {self.ratio}")
        if self.cheap_k % 2 == 0:
            raise ShapeError("ghost", f"cheap_k must be odd for same-padding, got {self.cheap_k}")

    @property
    def intrinsic(self):
        return self.c_out // self.ratio


@dataclass(frozen=True)
class C3GhostSpec:
    c_in: int
    c_out: int
    n: int = 1
    expansion: float = 0.5
    activation: str = "mish"

    @property
    def hidden(self):
        h = round(self.c_out * self.expansion)
        if h < 1:
            raise ShapeError("c3ghost", f"hidden channels {h} < 1")
        return h


class GhostConv(Module):
    """Primary conv for the intrinsic maps, depthwise conv for the ghost maps."""

    def __init__(self, spec: GhostSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        ci = spec.intrinsic
        self.primary = SimConv(spec.c_in, ci, k=spec.primary_k, activation=spec.activation,
                               rng=rng)
        self.cheap = SimConv(ci, spec.c_out - ci, k=spec.cheap_k, g=ci,
                             activation=spec.activation, rng=rng)

    def forward(self, x: Tensor4, tape: GradTape | None = None) -> Tensor4:
        if x.shape[1] != self.spec.c_in:
            raise ShapeError("ghost_conv", f"input channels {x.shape[1]} != {self.spec.c_in}")
        intrinsic = self.primary.forward(x, tape)
        ghosts = self.cheap.forward(intrinsic, tape)
        return concat_channels([intrinsic, ghosts], tape)


class GhostBottleneck(Module):
    """ghost expand(c_in -> 2*c_out) then ghost project back to c_out.

    The residual is added only when input and output channel counts match.
    """

    def __init__(self, c_in, c_out=None, activation="mish",
                 rng: np.random.Generator | None = None):
        super().__init__()
        c_out = c_in if c_out is None else c_out
        self.residual = c_in == c_out
        self.expand = GhostConv(GhostSpec(c_in, 2 * c_out, activation=activation), rng=rng)
        self.project = GhostConv(GhostSpec(2 * c_out, c_out, activation=activation), rng=rng)

    def forward(self, x: Tensor4, tape: GradTape | None = None) -> Tensor4:
        y = self.project.forward(self.expand.forward(x, tape), tape)
        return add(x, y, tape) if self.residual else y


class PlainBottleneck(Module):
    """Standard 1x1 + 3x3 bottleneck with residual, the module ghost replaces."""

    def __init__(self, c, activation="mish", rng: np.random.Generator | None = None):
        super().__init__()
        self.cv1 = SimConv(c, c, k=1, activation=activation, rng=rng)
        self.cv2 = SimConv(c, c, k=3, activation=activation, rng=rng)

    def forward(self, x: Tensor4, tape: GradTape | None = None) -> Tensor4:
        return add(x, self.cv2.forward(self.cv1.forward(x, tape), tape), tape)


class C3Block(Module):
    """Cross-stage partial block: processed branch + bypass branch, fused by 1x1.

    ghost=True builds ghost bottlenecks; ghost=False is the plain baseline
    used by the ablation toggle.
    """

    def __init__(self, spec: C3GhostSpec, ghost=True, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        h = spec.hidden
        act = spec.activation
        self.cv1 = SimConv(spec.c_in, h, k=1, activation=act, rng=rng)
        self.cv2 = SimConv(spec.c_in, h, k=1, activation=act, rng=rng)
        maker = GhostBottleneck if ghost else PlainBottleneck
        self.blocks = ModuleList([maker(h, activation=act, rng=rng) for _ in range(spec.n)])
        self.cv3 = SimConv(2 * h, spec.c_out, k=1, activation=act, rng=rng)

    def forward(self, x: Tensor4, tape: GradTape | None = None) -> Tensor4:
        if x.shape[1] != self.spec.c_in:
            raise ShapeError("c3", f"input channels {x.shape[1]} != {self.spec.c_in}")
        a = self.cv1.forward(x, tape)
        for blk in self.blocks:
            a = blk.forward(a, tape)
        b = self.cv2.forward(x, tape)
        return self.cv3.forward(concat_channels([a, b], tape), tape)


def c3ghost_block(x, spec: C3GhostSpec, params: C3Block, tape=None):
    """Functional wrapper: run a prebuilt C3 block on x."""
    return params.forward(x, tape)


def ghost_conv(x, spec: GhostSpec, params: GhostConv, tape=None):
    """Functional wrapper: run a prebuilt ghost conv on x."""
    return params.forward(x, tape)


# ---------------------------------------------------------------------------
# closed-form parameter / FLOP accounting
#
# Convention: params count conv weights (+bias); include_bn adds 2*c per
# normalized stage. FLOPs are 2 * (weight multiplies) * output positions;
# activation and normalization arithmetic are not counted.


def _conv_cost(c_in, c_out, k, g, h_out, w_out, bias=False, bn=False):
    weights = c_out * (c_in // g) * k * k
    params = weights + (c_out if bias else 0) + (2 * c_out if bn else 0)
    flops = 2 * weights * h_out * w_out
    return params, flops


def count_params_flops(spec, h, w, include_bn=False):
    """Exact parameter and FLOP counts for a block spec at spatial dims (h, w).

    Accepts ConvSpec (bare conv), GhostSpec, or C3GhostSpec (same-padding
    stride-1 assumed for the composite blocks, so spatial dims carry
    through). For a ghost conv the default count is
    (c_out/r)*c_in*k^2 + (r-1)*(c_out/r)*d^2.
    """
    if isinstance(spec, ConvSpec):
        ho, wo = spec.out_hw(h, w)
        weights = spec.c_out * (spec.c_in // spec.g) * spec.k * spec.k
        params = weights + (spec.c_out if spec.has_bias else 0)
        return params, 2 * weights * ho * wo
    if isinstance(spec, GhostSpec):
        ci = spec.intrinsic
        p1, f1 = _conv_cost(spec.c_in, ci, spec.primary_k, 1, h, w, bn=include_bn)
        p2, f2 = _conv_cost(ci, spec.c_out - ci, spec.cheap_k, ci, h, w, bn=include_bn)
        return p1 + p2, f1 + f2
    if isinstance(spec, C3GhostSpec):
        hch = spec.hidden
        params, flops = 0, 0
        for c_in, c_out, k in ((spec.c_in, hch, 1), (spec.c_in, hch, 1),
                               (2 * hch, spec.c_out, 1)):
            p, f = _conv_cost(c_in, c_out, k, 1, h, w, bn=include_bn)
            params += p
            flops += f
        for _ in range(spec.n):
            for gs in (GhostSpec(hch, 2 * hch, activation=spec.activation),
                       GhostSpec(2 * hch, hch, activation=spec.activation)):
                p, f = count_params_flops(gs, h, w, include_bn=include_bn)
                params += p
                flops += f
        return params, flops
    raise ShapeError("count_params_flops", f"unsupported spec type {type(spec).__name__}")


def count_c3_plain(spec: C3GhostSpec, h, w, include_bn=False):
    """Counts for the plain-bottleneck C3 with the same outer geometry."""
    hch = spec.hidden
    params, flops = 0, 0
    for c_in, c_out, k in ((spec.c_in, hch, 1), (spec.c_in, hch, 1),
                           (2 * hch, spec.c_out, 1)):
        p, f = _conv_cost(c_in, c_out, k, 1, h, w, bn=include_bn)
        params += p
        flops += f
    for _ in range(spec.n):
        for c_in, c_out, k in ((hch, hch, 1), (hch, hch, 3)):
            p, f = _conv_cost(c_in, c_out, k, 1, h, w, bn=include_bn)
            params += p
            flops += f
    return params, flops
