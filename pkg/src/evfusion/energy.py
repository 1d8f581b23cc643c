"""Synaptic-operation counting and the inference energy model.

Spiking layers perform accumulate-only (AC) operations gated by input
spikes; analog layers perform dense multiply-accumulate (MAC)
operations. Counts come from an instrumented forward pass; the energy
model multiplies them by fixed per-operation costs.

Bias additions and batch-norm arithmetic are excluded: only synaptic
operations are counted.
"""

import csv
import io as _io
from dataclasses import dataclass, field

E_MAC_DEFAULT = 4.6e-12   # joules per multiply-accumulate, 32-bit float, 45nm
E_AC_DEFAULT = 0.9e-12    # joules per accumulate


class EnergyError(ValueError):
    pass


@dataclass
class LayerOps:
    name: str
    role: str                # "snn" or "ann"
    m: int                   # neuron count entering the layer (snn) / outputs (ann)
    c: int                   # synaptic connections per neuron
    f: float = 0.0           # mean spiking activity fraction (snn only)
    n_steps: int = 1

    @property
    def ops(self):
        if self.role == "snn":
            return self.n_steps * self.m * self.c * self.f
        return float(self.m * self.c)


@dataclass
class OpsReport:
    layers: list = field(default_factory=list)

    @property
    def ops_snn(self):
        return sum(l.ops for l in self.layers if l.role == "snn")

    @property
    def ops_ann(self):
        return sum(l.ops for l in self.layers if l.role == "ann")

    def mean_activity(self):
        """Per-layer mean F and the spike-weighted global mean."""
        snn = [l for l in self.layers if l.role == "snn"]
        if not snn:
            return 0.0, 0.0
        per_layer = sum(l.f for l in snn) / len(snn)
        slots = sum(l.m * l.n_steps for l in snn)
        spikes = sum(l.f * l.m * l.n_steps for l in snn)
        return per_layer, spikes / slots if slots else 0.0

    def to_csv(self):
        buf = _io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(["layer", "role", "M", "C", "F", "N", "ops"])
        for l in self.layers:
            wr.writerow([l.name, l.role, l.m, l.c,
                         "%.6g" % l.f if l.role == "snn" else "",
                         l.n_steps, "%.6g" % l.ops])
        wr.writerow(["total_snn", "snn", "", "", "", "", "%.6g" % self.ops_snn])
        wr.writerow(["total_ann", "ann", "", "", "", "", "%.6g" % self.ops_ann])
        wr.writerow(["# bias and batch-norm arithmetic excluded from counts"])
        return buf.getvalue()


@dataclass
class EnergyReport:
    ops_snn: float
    ops_ann: float
    e_mac: float = E_MAC_DEFAULT
    e_ac: float = E_AC_DEFAULT
    label: str = ""

    @property
    def e_total(self):
        return self.ops_snn * self.e_ac + self.ops_ann * self.e_mac


def profile(model, spikes, frames):
    """Instrumented inference pass; returns (OpsReport, MultiScaleFlow).

    Profiling is observation-only: outputs are identical to a plain
    forward pass.
    """
    from .network import forward
    if any(p.grad is not None for p in model.params.values()):
        raise EnergyError("model has pending gradients; finish the optimizer "
                          "step and zero_grad before profiling")
    raw = {}
    out = forward(model, spikes, frames, train=False, profile=raw)
    layers = []
    for name, rec in raw.items():
        if rec["role"] == "snn":
            m = rec["neurons"]
            n = rec["n_steps"]
            f = rec["spikes"] / (m * n) if m and n else 0.0
            layers.append(LayerOps(name, "snn", m, rec["fanout"], f, n))
        else:
            layers.append(LayerOps(name, "ann", rec["m_out"], rec["fanin"]))
    return OpsReport(layers), out


def energy(report, e_mac=E_MAC_DEFAULT, e_ac=E_AC_DEFAULT, label=""):
    """Energy totals for an operations report."""
    if isinstance(report, OpsReport):
        ops_snn, ops_ann = report.ops_snn, report.ops_ann
    else:
        ops_snn, ops_ann = report
    if ops_snn < 0 or ops_ann < 0:
        raise EnergyError("operation counts must be nonnegative")
    return EnergyReport(ops_snn, ops_ann, e_mac, e_ac, label=label)


def compare(reports, baseline_index=0):
    """Improvement ratios relative to a baseline report.

    Returns a list of rows (label, ops_ann, ops_snn, e_total_mj,
    improvement) and a formatted text table.
    """
    if len(reports) < 2:
        raise EnergyError("need at least two reports to compare")
    if not (0 <= baseline_index < len(reports)):
        raise EnergyError("baseline index out of range")
    base = reports[baseline_index].e_total
    rows = []
    for r in reports:
        improvement = base / r.e_total if r.e_total > 0 else float("inf")
        rows.append((r.label, r.ops_ann, r.ops_snn, r.e_total * 1e3, improvement))
    header = "%-24s %14s %14s %12s %12s" % (
        "architecture", "#OPS_ann", "#OPS_snn", "E_total(mJ)", "improvement")
    lines = [header, "-" * len(header)]
    for label, oa, os_, emj, imp in rows:
        lines.append("%-24s %14.4g %14.4g %12.3f %11.2fx"
                     % (label or "-", oa, os_, emj, imp))
    return rows, "\n".join(lines)
