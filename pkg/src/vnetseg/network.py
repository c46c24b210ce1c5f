"""V-shaped volumetric segmentation network.

A compression path of residual stages (5-wide convolutions, channel count
doubling at each resolution drop) mirrored by a decompression path that
upsamples with transposed convolutions and concatenates same-resolution
encoder features, closed by a 1x1x1 two-channel head. Resolution changes use
2-wide kernels at stride 2 in both directions.

Also computes theoretical receptive fields per layer group via the standard
recurrence (extent += (k - 1) * jump; jump *= stride), where upsampling ops
shrink the jump before extending the extent.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvParams,
    Parameter,
    PReLUParams,
    ShapeError,
    Tape,
    Tensor5,
    add,
    concat_channels,
    conv3d,
    down_conv,
    he_normal,
    prelu,
    tile_channels,
    up_conv,
)

DEFAULT_CONVS_DOWN = (1, 2, 3, 3, 3)

PRELU_INIT = 0.25


@dataclass
class StageSpec:
    """One resolution level of the compression or decompression path."""

    conv_count: int
    channels: int
    kernel: int = 5
    residual: bool = True

    def __post_init__(self):
        if self.conv_count not in (1, 2, 3):
            raise ValueError(f"conv_count must be 1..3, got {self.conv_count}")
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")


@dataclass
class NetworkConfig:
    """Declarative architecture description.

    ``input_dims`` is (D, H, W). ``convs_down`` lists per-encoder-stage conv
    counts (shallow to deep); ``convs_up`` lists decoder counts (deep to
    shallow, one fewer entry). Channel width doubles at every encoder stage.
    """

    input_dims: tuple[int, int, int]
    num_stages: int = 5
    base_channels: int = 16
    convs_down: tuple[int, ...] = ()
    convs_up: tuple[int, ...] = ()
    kernel: int = 5

    def __post_init__(self):
        self.input_dims = tuple(int(v) for v in self.input_dims)
        if len(self.input_dims) != 3 or any(v <= 0 for v in self.input_dims):
            raise ValueError(f"input_dims must be three positive ints, got {self.input_dims}")
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if not self.convs_down:
            self.convs_down = DEFAULT_CONVS_DOWN[: self.num_stages]
        if not self.convs_up:
            self.convs_up = tuple(reversed(self.convs_down[:-1]))
        self.convs_down = tuple(int(c) for c in self.convs_down)
        self.convs_up = tuple(int(c) for c in self.convs_up)
        if len(self.convs_down) != self.num_stages:
            raise ValueError(
                f"convs_down has {len(self.convs_down)} entries for {self.num_stages} stages"
            )
        if len(self.convs_up) != self.num_stages - 1:
            raise ValueError(
                f"convs_up has {len(self.convs_up)} entries, expected {self.num_stages - 1}"
            )
        for c in self.convs_down + self.convs_up:
            if c not in (1, 2, 3):
                raise ValueError(f"conv counts must be 1..3, got {c}")
        divisor = 2 ** (self.num_stages - 1)
        if any(v % divisor for v in self.input_dims):
            raise ValueError(
                f"input_dims {self.input_dims} not divisible by {divisor} "
                f"for {self.num_stages} stages"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")

    @classmethod
    def default(cls) -> "NetworkConfig":
        """Full-scale configuration: 5 stages, base 16, 128x128x64 input."""
        return cls(input_dims=(64, 128, 128))

    @classmethod
    def desk_scale(cls) -> "NetworkConfig":
        """Small configuration that trains in minutes on a CPU."""
        return cls(input_dims=(32, 32, 32), num_stages=3, base_channels=4)

    def encoder_channels(self, stage: int) -> int:
        """Channel width of 1-based encoder stage ``stage``."""
        return self.base_channels * (2 ** (stage - 1))

    def to_text(self) -> str:
        d, h, w = self.input_dims
        return (
            f"stages={self.num_stages}\n"
            f"base_channels={self.base_channels}\n"
            f"input={w},{h},{d}\n"
            f"convs_down={','.join(str(c) for c in self.convs_down)}\n"
            f"convs_up={','.join(str(c) for c in self.convs_up)}\n"
        )

    @classmethod
    def from_mapping(cls, kv: dict) -> "NetworkConfig":
        """Build from flat config keys (input is x,y,z order)."""
        x, y, z = (int(v) for v in str(kv["input"]).split(","))
        args = dict(input_dims=(z, y, x))
        if "stages" in kv:
            args["num_stages"] = int(kv["stages"])
        if "base_channels" in kv:
            args["base_channels"] = int(kv["base_channels"])
        if "convs_down" in kv:
            args["convs_down"] = tuple(int(c) for c in str(kv["convs_down"]).split(","))
        if "convs_up" in kv:
            args["convs_up"] = tuple(int(c) for c in str(kv["convs_up"]).split(","))
        return cls(**args)


@dataclass
class ReceptiveFieldReport:
    """Per layer-group input grid size and cubic receptive-field extent."""

    rows: list[tuple[str, int, int]] = field(default_factory=list)

    def extents(self) -> list[int]:
        return [rf for _, _, rf in self.rows]

    def as_table(self) -> str:
        lines = [f"{'Layer':<12} {'Input Size':>10} {'Receptive Field':>16}"]
        for name, size, rf in self.rows:
            lines.append(f"{name:<12} {size:>10} {rf:>16}")
        return "\n".join(lines)


def receptive_fields(config: NetworkConfig) -> ReceptiveFieldReport:
    """Walk the op sequence accumulating extent r and jump j.

    Convolutions and strided downsampling apply r += (k-1)*j then j *= s;
    transposed convolutions halve j first, then extend r, which is what
    makes decoder extents land between the encoder's.
    """
    k = config.kernel
    rows: list[tuple[str, int, int]] = []
    r, j = 1, 1
    size = max(config.input_dims)
    for i, count in enumerate(config.convs_down, start=1):
        r += count * (k - 1) * j
        rows.append((f"L-Stage {i}", size, r))
        if i < config.num_stages:
            r += j  # 2-wide stride-2 kernel adds (2-1)*j
            j *= 2
            size //= 2
    for idx, count in enumerate(config.convs_up):
        stage_no = config.num_stages - 1 - idx
        j //= 2
        r += j
        size *= 2
        r += count * (k - 1) * j
        rows.append((f"R-Stage {stage_no}", size, r))
    rows.append(("Output", size, r))  # 1x1x1 head leaves the extent unchanged
    report = ReceptiveFieldReport(rows)
    extents = report.extents()
    assert all(b >= a for a, b in zip(extents, extents[1:])), "receptive field decreased"
    return report


@dataclass
class _StageWiring:
    convs: list[tuple[ConvParams, PReLUParams]]


@dataclass
class _ResizeWiring:
    conv: ConvParams
    act: PReLUParams


class VNetModel:
    """Instantiated parameter tensors plus the wiring graph."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        self.enc_stages: list[_StageWiring] = []
        self.downs: list[_ResizeWiring] = []
        self.ups: list[_ResizeWiring] = []
        self.dec_stages: list[_StageWiring] = []
        self.head: ConvParams | None = None

    # -- construction helpers

    def _new_param(self, name: str, values: np.ndarray) -> Parameter:
        p = Parameter(values, name)
        self._params[name] = p
        return p

    def _new_conv(self, name, rng, cout, cin, k, stride=1, padding=0, transposed=False):
        shape = (cin, cout, k, k, k) if transposed else (cout, cin, k, k, k)
        kernel = self._new_param(f"{name}/kernel", he_normal(rng, shape, cin * k ** 3))
        bias = self._new_param(f"{name}/bias", np.zeros(cout))
        return ConvParams(kernel, bias, stride=stride, padding=padding)

    def _new_prelu(self, name, channels):
        return PReLUParams(self._new_param(f"{name}/slope", np.full(channels, PRELU_INIT)))

    # -- public surface

    def parameters(self) -> "OrderedDict[str, Parameter]":
        return self._params

    @property
    def parameter_count(self) -> int:
        return sum(p.values.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.values.copy()) for n, p in self._params.items())

    def load_state(self, blocks) -> None:
        for name, p in self._params.items():
            if name not in blocks:
                raise KeyError(f"checkpoint missing parameter block {name!r}")
            arr = np.asarray(blocks[name], dtype=np.float64)
            if arr.shape != p.values.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {p.values.shape}"
                )
            p.values = arr.copy()

    def _stage_forward(self, wiring: _StageWiring, t: Tensor5, tape: Tape | None) -> Tensor5:
        inp = t
        for cp, pp in wiring.convs:
            t = prelu(conv3d(t, cp, tape), pp, tape)
        if inp.shape[1] != t.shape[1]:
            inp = tile_channels(inp, t.shape[1] // inp.shape[1], tape)
        return add(inp, t, tape)

    def forward(self, x: Tensor5, tape: Tape | None = None) -> Tensor5:
        """Run the graph; returns the two-channel logits volume."""
        if x.shape[1] != 1:
            raise ShapeError(f"expected single-channel input, got {x.shape[1]} channels")
        if tuple(x.shape[2:]) != self.config.input_dims:
            raise ShapeError(
                f"input spatial dims {x.shape[2:]} != configured {self.config.input_dims}"
            )
        skips: list[Tensor5] = []
        t = x
        for i, wiring in enumerate(self.enc_stages):
            t = self._stage_forward(wiring, t, tape)
            if i < len(self.downs):
                skips.append(t)
                rz = self.downs[i]
                t = prelu(down_conv(t, rz.conv, tape), rz.act, tape)
        for idx, wiring in enumerate(self.dec_stages):
            rz = self.ups[idx]
            u = prelu(up_conv(t, rz.conv, tape), rz.act, tape)
            t = concat_channels(u, skips[-(idx + 1)], tape)
            t = self._stage_forward(wiring, t, tape)
        return conv3d(t, self.head, tape)


def build(config: NetworkConfig, seed: int = 0) -> VNetModel:
    """Instantiate all stage, resize, and head parameters from ``seed``."""
    rng = np.random.default_rng(seed)
    m = VNetModel(config)
    k = config.kernel
    pad = k // 2  # preserves spatial size so the residual add stays shape-valid

    for i, count in enumerate(config.convs_down, start=1):
        width = config.encoder_channels(i)
        convs = []
        for j in range(count):
            cin = width if (i > 1 or j > 0) else 1
            name = f"enc{i}/conv{j + 1}"
            convs.append(
                (m._new_conv(name, rng, width, cin, k, padding=pad), m._new_prelu(name, width))
            )
        m.enc_stages.append(_StageWiring(convs))
        if i < config.num_stages:
            name = f"down{i}"
            m.downs.append(
                _ResizeWiring(
                    m._new_conv(name, rng, 2 * width, width, 2, stride=2),
                    m._new_prelu(name, 2 * width),
                )
            )

    carried = config.encoder_channels(config.num_stages)
    for idx, count in enumerate(config.convs_up):
        stage_no = config.num_stages - 1 - idx
        skip_w = config.encoder_channels(stage_no)
        name = f"up{stage_no}"
        m.ups.append(
            _ResizeWiring(
                m._new_conv(name, rng, skip_w, carried, 2, stride=2, transposed=True),
                m._new_prelu(name, skip_w),
            )
        )
        width = 2 * skip_w  # upsampled features plus the forwarded skip
        convs = []
        for j in range(count):
            cname = f"dec{stage_no}/conv{j + 1}"
            convs.append(
                (m._new_conv(cname, rng, width, width, k, padding=pad), m._new_prelu(cname, width))
            )
        m.dec_stages.append(_StageWiring(convs))
        carried = width

    m.head = m._new_conv("head", rng, 2, carried, 1)
    return m
