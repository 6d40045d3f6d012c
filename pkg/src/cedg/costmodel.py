"""Static cost model: multiplication (MAC) and parameter counts per architecture.

Counting rules:
  * conv: in_ch * out_ch * kh * kw * out_h * out_w multiplications. No bias
    when BN follows (it would be absorbed); BN itself multiplies nothing at
    inference (foldable into the conv) but its gamma/beta count as parameters.
  * linear: n_in * n_out multiplications, n_in * n_out + n_out parameters.
  * pooling, flatten, normalizations: free.

Counts are purely structural: they depend on the ArchSpec and an input shape,
never on weight values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ConfigError
from .models import (
    ArchSpec, BlockSpec, ConvSpec, FlattenSpec, LinearSpec, NormalizeSpec,
    ParallelSpec, PoolSpec, layer_output_shape,
)


@dataclass(frozen=True)
class CostLine:
    layer: str
    macs: int
    params: int


@dataclass(frozen=True)
class CostReport:
    total_macs: int
    total_params: int
    per_layer: tuple[CostLine, ...]

    def to_json(self) -> str:
        return json.dumps({
            "total_macs": self.total_macs,
            "total_params": self.total_params,
            "per_layer": [{"layer": l.layer, "macs": l.macs, "params": l.params}
                          for l in self.per_layer],
        }, indent=2, sort_keys=True)


def _conv_counts(spec: ConvSpec, in_shape) -> tuple[int, int, tuple]:
    out_shape = layer_output_shape(spec, in_shape)
    _, ho, wo = out_shape
    macs = spec.in_channels * spec.out_channels * spec.kernel * spec.kernel * ho * wo
    params = spec.out_channels * spec.in_channels * spec.kernel * spec.kernel
    if spec.has_bn:
        params += 2 * spec.out_channels  # gamma + beta
    else:
        params += spec.out_channels  # bias
    return macs, params, out_shape


def _conv_label(spec: ConvSpec) -> str:
    tag = "proj conv" if spec.is_projection else "conv"
    s = f"{tag}{spec.kernel}x{spec.kernel} {spec.in_channels}->{spec.out_channels}"
    if spec.stride != 1:
        s += f" /{spec.stride}"
    return s


def _walk(layers, in_shape, prefix, lines):
    shape = in_shape
    for i, spec in enumerate(layers):
        label = f"{prefix}{i}"
        if isinstance(spec, ConvSpec):
            macs, params, shape = _conv_counts(spec, shape)
            lines.append(CostLine(f"{label} {_conv_label(spec)}", macs, params))
        elif isinstance(spec, LinearSpec):
            out_shape = layer_output_shape(spec, shape)
            macs = spec.in_features * spec.out_features
            params = spec.in_features * spec.out_features + spec.out_features
            lines.append(CostLine(
                f"{label} linear {spec.in_features}->{spec.out_features}", macs, params))
            shape = out_shape
        elif isinstance(spec, BlockSpec):
            body_shape = _walk(spec.convs, shape, f"{label}.", lines)
            if spec.shortcut is not None:
                macs, params, _ = _conv_counts(spec.shortcut, shape)
                lines.append(CostLine(f"{label}.sc {_conv_label(spec.shortcut)}",
                                      macs, params))
            shape = body_shape
        elif isinstance(spec, ParallelSpec):
            widths = []
            for gi, group in enumerate(spec.groups):
                g_shape = _walk(group, shape, f"{label}.g{gi}.", lines)
                widths.append(g_shape[0])
            shape = (sum(widths),)
        elif isinstance(spec, (PoolSpec, FlattenSpec, NormalizeSpec)):
            shape = layer_output_shape(spec, shape)
            kind = type(spec).__name__.removesuffix("Spec").lower()
            lines.append(CostLine(f"{label} {kind}", 0, 0))
        else:
            raise ConfigError(f"cost model cannot handle {type(spec).__name__}")
    return shape


def analyze(arch: ArchSpec, input_shape: tuple[int, ...]) -> CostReport:
    lines: list[CostLine] = []
    _walk(arch.layers, tuple(input_shape), "", lines)
    return CostReport(
        total_macs=sum(l.macs for l in lines),
        total_params=sum(l.params for l in lines),
        per_layer=tuple(lines),
    )


def count_macs(arch: ArchSpec, input_shape: tuple[int, ...]) -> CostReport:
    return analyze(arch, input_shape)


def count_params(arch: ArchSpec, input_shape: tuple[int, ...] | None = None) -> CostReport:
    """Parameter counts need no input shape; MAC columns are zero without one."""
    if input_shape is not None:
        return analyze(arch, input_shape)
    lines: list[CostLine] = []
    _params_only(arch.layers, "", lines)
    return CostReport(total_macs=0,
                      total_params=sum(l.params for l in lines),
                      per_layer=tuple(lines))


def _params_only(layers, prefix, lines):
    for i, spec in enumerate(layers):
        label = f"{prefix}{i}"
        if isinstance(spec, ConvSpec):
            params = spec.out_channels * spec.in_channels * spec.kernel * spec.kernel
            params += 2 * spec.out_channels if spec.has_bn else spec.out_channels
            lines.append(CostLine(f"{label} {_conv_label(spec)}", 0, params))
        elif isinstance(spec, LinearSpec):
            params = spec.in_features * spec.out_features + spec.out_features
            lines.append(CostLine(
                f"{label} linear {spec.in_features}->{spec.out_features}", 0, params))
        elif isinstance(spec, BlockSpec):
            _params_only(spec.convs, f"{label}.", lines)
            if spec.shortcut is not None:
                _params_only((spec.shortcut,), f"{label}.sc", lines)
        elif isinstance(spec, ParallelSpec):
            for gi, group in enumerate(spec.groups):
                _params_only(group, f"{label}.g{gi}.", lines)
        else:
            kind = type(spec).__name__.removesuffix("Spec").lower()
            lines.append(CostLine(f"{label} {kind}", 0, 0))


def combine(reports: list[CostReport]) -> CostReport:
    lines = tuple(l for r in reports for l in r.per_layer)
    return CostReport(total_macs=sum(r.total_macs for r in reports),
                      total_params=sum(r.total_params for r in reports),
                      per_layer=lines)


def bundle_report(specs: list[ArchSpec], input_shape=(3, 32, 32)) -> CostReport:
    """Chained report: each arch consumes the previous one's output shape."""
    shape = tuple(input_shape)
    reports = []
    for arch in specs:
        reports.append(analyze(arch, shape))
        shape = _final_shape(arch, shape)
    return combine(reports)


def _final_shape(arch: ArchSpec, in_shape):
    shape = in_shape
    for spec in arch.layers:
        shape = layer_output_shape(spec, shape)
    return shape


def compare(a: CostReport, b: CostReport) -> float:
    """Compression ratio a/b on multiplications, rounded to 2 decimals."""
    if b.total_macs == 0:
        raise ConfigError("cannot compare against a report with zero multiplications")
    return round(a.total_macs / b.total_macs, 2)


def format_table(report: CostReport) -> str:
    rows = [("layer", "macs", "params")]
    rows += [(l.layer, f"{l.macs:,}", f"{l.params:,}") for l in report.per_layer]
    rows += [("total", f"{report.total_macs:,}", f"{report.total_params:,}")]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    out = []
    for i, r in enumerate(rows):
        out.append(f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}")
        if i == 0:
            out.append("-" * (sum(widths) + 4))
    return "\n".join(out)
