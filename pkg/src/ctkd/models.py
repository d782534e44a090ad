"""Wide residual networks (WRN-d-m) with attention tap points."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .errors import ConfigError, IncompatibilityError, ShapeError

NUM_GROUPS = 3
INPUT_SIZE = 32


@dataclass(frozen=True)
class WrnSpec:
    depth: int
    widen: int
    num_classes: int = 10

    def __post_init__(self):
        if self.depth < 10 or (self.depth - 4) % 6 != 0:
            raise ConfigError(
                f"WRN depth must satisfy depth = 6n + 4 with n >= 1, got depth={self.depth}"
            )
        if self.widen < 1 or self.num_classes < 1:
            raise ConfigError(f"WRN widen and num_classes must be positive, got {self.widen}, {self.num_classes}")

    @property
    def blocks_per_group(self) -> int:
        return (self.depth - 4) // 6

    @property
    def widths(self) -> tuple[int, int, int]:
        return 16 * self.widen, 32 * self.widen, 64 * self.widen

    @property
    def name(self) -> str:
        return f"WRN-{self.depth}-{self.widen}"

    @classmethod
    def parse(cls, text: str, num_classes: int = 10) -> WrnSpec:
        """Accepts 'WRN-16-1' or '16-1'."""
        parts = text.upper().removeprefix("WRN-").split("-")
        if len(parts) != 2:
            raise ConfigError(f"cannot parse architecture {text!r}; expected WRN-<depth>-<widen>")
        return cls(int(parts[0]), int(parts[1]), num_classes)


class Model:
    """Parameter set, batch-norm state and forward pass of one WRN."""

    def __init__(self, spec: WrnSpec, params: dict[str, Tensor], stats: dict[str, RunningStats], seed: int | None = None):
        self.spec = spec
        self.params = params
        self.stats = stats
        self.seed = seed

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def requires_grad_(self, flag: bool) -> Model:
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def copy(self) -> Model:
        params = {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()
        }
        stats = {k: s.copy() for k, s in self.stats.items()}
        return Model(self.spec, params, stats, self.seed)

    def fingerprint(self) -> str:
        """sha256 over every parameter and running statistic, in name order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        for name in sorted(self.stats):
            s = self.stats[name]
            h.update(name.encode())
            if s.initialized:
                h.update(np.ascontiguousarray(s.mean).tobytes())
                h.update(np.ascontiguousarray(s.var).tobytes())
        return h.hexdigest()

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[Tensor]]:
        return forward(self, x, train)

    __call__ = forward


def _block_names(spec: WrnSpec):
    cin = 16
    for g, cout in enumerate(spec.widths):
        for b in range(spec.blocks_per_group):
            ci = cin if b == 0 else cout
            stride = 1 if (g == 0 or b > 0) else 2
            yield f"g{g}.b{b}", ci, cout, stride
        cin = cout


def build_wrn(spec: WrnSpec, seed: int, dtype=None) -> Model:
    """Fresh WRN: He fan-in normal conv/linear weights, zero biases, unit BN scale."""
    dtype = np.dtype(dtype or ad.get_default_dtype())
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}

    def conv(name, cout, cin, k):
        std = np.sqrt(2.0 / (cin * k * k))
        params[name] = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype), requires_grad=True)

    def bn(name, c):
        params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        stats[name] = RunningStats.fresh(c, dtype)

    conv("conv0.weight", 16, 3, 3)
    for prefix, ci, co, _ in _block_names(spec):
        bn(f"{prefix}.bn1", ci)
        conv(f"{prefix}.conv1.weight", co, ci, 3)
        bn(f"{prefix}.bn2", co)
        conv(f"{prefix}.conv2.weight", co, co, 3)
        if ci != co:
            conv(f"{prefix}.shortcut.weight", co, ci, 1)
    top = spec.widths[-1]
    bn("bn_final", top)
    params["fc.weight"] = Tensor(
        rng.normal(0.0, np.sqrt(2.0 / top), size=(spec.num_classes, top)).astype(dtype), requires_grad=True
    )
    params["fc.bias"] = Tensor(np.zeros(spec.num_classes, dtype=dtype), requires_grad=True)
    return Model(spec, params, stats, seed)


def forward(model: Model, x: Tensor, train: bool) -> tuple[Tensor, list[Tensor]]:
    """Returns (logits, taps) where taps are the three residual-group outputs."""
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (INPUT_SIZE, INPUT_SIZE):
        raise ShapeError(f"expected input [N,3,{INPUT_SIZE},{INPUT_SIZE}], got {list(x.shape)}")
    p, st = model.params, model.stats

    def bn_relu(t, name):
        return ad.relu(ad.batch_norm(t, p[f"{name}.gamma"], p[f"{name}.beta"], st[name], train))

    h = ad.conv2d(x, p["conv0.weight"], 1, 1)
    taps = []
    n = model.spec.blocks_per_group
    for i, (prefix, ci, co, stride) in enumerate(_block_names(model.spec)):
        o = bn_relu(h, f"{prefix}.bn1")
        shortcut = ad.conv2d(o, p[f"{prefix}.shortcut.weight"], stride, 0) if ci != co else h
        y = ad.conv2d(o, p[f"{prefix}.conv1.weight"], stride, 1)
        y = ad.conv2d(bn_relu(y, f"{prefix}.bn2"), p[f"{prefix}.conv2.weight"], 1, 1)
        h = shortcut + y
        if (i + 1) % n == 0:
            taps.append(h)
    h = bn_relu(h, "bn_final")
    h = ad.avg_pool2d(h, h.shape[2])
    h = h.reshape(h.shape[0], -1)
    return ad.linear(h, p["fc.weight"], p["fc.bias"]), taps


def param_count(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


def analytic_param_count(spec: WrnSpec) -> int:
    """Closed-form count, independent of any built model."""
    total = 3 * 16 * 9
    for _, ci, co, _ in _block_names(spec):
        total += 2 * ci + 9 * ci * co + 2 * co + 9 * co * co
        if ci != co:
            total += ci * co
    top = spec.widths[-1]
    return total + 2 * top + top * spec.num_classes + spec.num_classes


def transfer_lower_weights(student: Model, expert: Model, groups: int) -> Model:
    """Copy of ``student`` whose lowest ``groups`` residual groups come from ``expert``.

    Student block b of group g takes expert block b of group g, so only the
    first n_student expert blocks of each group are used. The stem
    convolution is copied too once any group is transferred.
    """
    if not 0 <= groups <= NUM_GROUPS:
        raise ConfigError(f"groups must be in [0, {NUM_GROUPS}], got {groups}")
    if student.spec.widen != expert.spec.widen:
        raise IncompatibilityError(
            f"widen mismatch: student {student.spec.name} vs expert {expert.spec.name}"
        )
    n_s, n_e = student.spec.blocks_per_group, expert.spec.blocks_per_group
    if groups and n_s > n_e:
        raise IncompatibilityError(
            f"student {student.spec.name} has more blocks per group than expert {expert.spec.name}"
        )
    out = student.copy()
    if groups == 0:
        return out
    prefixes = ["conv0."] + [f"g{g}.b{b}." for g in range(groups) for b in range(n_s)]
    for name in out.params:
        if any(name.startswith(pre) for pre in prefixes):
            out.params[name].data = expert.params[name].data.copy()
    for name in out.stats:
        if any(f"{name}.".startswith(pre) for pre in prefixes):
            out.stats[name] = expert.stats[name].copy()
    return out
