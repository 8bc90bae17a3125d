"""Desk-scale cost model of many-core neuromorphic execution.

A network is tiled over function cores (bounded fan-in axons and neuron
count per core), execution is unfolded into an ordered list of phases over
timesteps and the backward pass, and two aggregates are evaluated over the
phase list:

    route cost  RC = sum over phases with router ops of
                     core_count * sum of packet volumes
    throughput  TC = F / sum over phases, over operator types present,
                     of the max per-core clock count

This is an analytical model, not a cycle-accurate emulator: packet volumes
and clock counts come from the declared cost table below (the aggregation
formulas are the authoritative part, the generation constants are model
parameters). The local-plasticity mode pipelines trace updates inside the
forward compute phases (no extra router traffic); global-plasticity mode
appends serial backward phases with reverse error routing; hybrid mode
scales backward work and traffic by the density of trainable connections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError

__all__ = [
    "FCoreSpec",
    "CoreSlice",
    "Mapping",
    "Phase",
    "CostSchedule",
    "map_network",
    "schedule",
    "route_cost",
    "throughput",
    "compare_modes",
]

AXON_DENDRITE = "axon_dendrite"
SOMA = "soma"
ROUTER = "router"

MODES = ("LP", "GP", "HP")


@dataclass(frozen=True)
class FCoreSpec:
    """Per-core capacities, the clock-cost table and the clock frequency.

    Default capacities (196 axons, 128 neurons) reproduce the 16-core split
    of a 784-input, 512-neuron layer; they are reverse-engineered from that
    allocation, not vendor data. Clock costs are cycles per unit of work;
    ``packet_units`` is the payload capacity of one route packet.
    """

    max_fan_in: int = 196
    max_neurons: int = 128
    F: float = 300e6
    ad_synop: float = 1.0
    ad_backward_synop: float = 2.0
    soma_neuron: float = 2.0
    soma_backward_neuron: float = 2.0
    router_packet: float = 1.0
    packet_units: float = 32.0

    def __post_init__(self):
        if self.max_fan_in <= 0 or self.max_neurons <= 0:
            raise ConfigError("core capacities must be positive")
        if self.F <= 0 or self.packet_units <= 0:
            raise ConfigError("frequency and packet size must be positive")


@dataclass(frozen=True)
class CoreSlice:
    """One core's share of a layer: an axon range times a neuron range."""

    core_id: int
    axon_lo: int
    axon_hi: int
    neuron_lo: int
    neuron_hi: int

    @property
    def axons(self) -> int:
        return self.axon_hi - self.axon_lo

    @property
    def neurons(self) -> int:
        return self.neuron_hi - self.neuron_lo

    @property
    def synapses(self) -> int:
        return self.axons * self.neurons


@dataclass
class Mapping:
    """Tiling of every connection layer over cores."""

    dims: list[int]
    per_layer: list[list[CoreSlice]]

    @property
    def n_cores(self) -> int:
        return sum(len(slices) for slices in self.per_layer)

    def layer_cores(self, li: int) -> int:
        return len(self.per_layer[li])


@dataclass
class Phase:
    """One scheduled phase: operator kinds, per-core clocks, packet volumes."""

    label: str
    ops: tuple[str, ...]
    core_count: int
    clocks: dict[str, list[float]] = field(default_factory=dict)
    packets: list[float] = field(default_factory=list)

    def __post_init__(self):
        bad = set(self.ops) - {AXON_DENDRITE, SOMA, ROUTER}
        if bad:
            raise ConfigError(f"unknown operator kinds {bad}")


@dataclass
class CostSchedule:
    phases: list[Phase]
    mode: str
    T: int


def map_network(dims: list[int], spec: FCoreSpec) -> Mapping:
    """Greedy tiling: each layer splits into ceil(pre / max_fan_in) axon
    ranges times ceil(post / max_neurons) neuron ranges, one core each.
    """
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ConfigError(f"need positive [in, ..., out] dims, got {dims}")
    per_layer = []
    core_id = 0
    for li in range(len(dims) - 1):
        pre, post = dims[li], dims[li + 1]
        ax_tiles = math.ceil(pre / spec.max_fan_in)
        nr_tiles = math.ceil(post / spec.max_neurons)
        slices = []
        for ni in range(nr_tiles):
            for ai in range(ax_tiles):
                slices.append(CoreSlice(
                    core_id=core_id,
                    axon_lo=ai * spec.max_fan_in,
                    axon_hi=min((ai + 1) * spec.max_fan_in, pre),
                    neuron_lo=ni * spec.max_neurons,
                    neuron_hi=min((ni + 1) * spec.max_neurons, post)))
                core_id += 1
        per_layer.append(slices)
    return Mapping(dims=list(dims), per_layer=per_layer)


def _chunk(volume: float, unit: float) -> list[float]:
    """Split a payload volume into full packets plus a fractional tail.

    The chunks sum to the volume exactly, so scaled volumes scale the
    summed packet count exactly as well.
    """
    if volume <= 0:
        return []
    full = int(volume // unit)
    out = [unit] * full
    tail = volume - unit * full
    if tail > 0:
        out.append(tail)
    return out


def _compute_phase(label, slices, spec, lp_fraction, backward=False):
    ad = []
    soma = []
    for sl in slices:
        if backward:
            ad_clock = sl.synapses * spec.ad_backward_synop
            soma_clock = sl.neurons * spec.soma_backward_neuron
        else:
            ad_clock = sl.synapses * spec.ad_synop
            soma_clock = sl.neurons * spec.soma_neuron
        if lp_fraction > 0 and not backward:
            ad_clock += sl.synapses * lp_fraction * spec.ad_synop
        ad.append(ad_clock)
        soma.append(soma_clock)
    return Phase(label=label, ops=(AXON_DENDRITE, SOMA), core_count=len(slices),
                 clocks={AXON_DENDRITE: ad, SOMA: soma})


def _router_phase(label, senders, receivers, spec, volume_per_receiver):
    packets = []
    for vol in volume_per_receiver:
        packets.extend(_chunk(vol, spec.packet_units))
    n = max(len(senders), 1)
    per_core = spec.router_packet * len(packets) / n
    return Phase(label=label, ops=(ROUTER,), core_count=len(senders),
                 clocks={ROUTER: [per_core] * len(senders)}, packets=packets)


def schedule(mapping: Mapping, mode: str, T: int, spec: FCoreSpec,
             density: float = 0.03, activity: list[float] | None = None) -> CostSchedule:
    """Unfold one presentation (plus learning) into an ordered phase list.

    Forward: per timestep, a compute phase per layer with router phases at
    layer boundaries. LP folds trace updates into the compute phases. GP
    appends serial backward phases (reverse compute plus reverse routing)
    for every timestep; HP does the same with work and traffic scaled by
    ``density`` while keeping trace updates in-core. ``activity`` scales
    forward packet volumes per source layer (event-driven traffic).
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if not 0.0 <= density <= 1.0:
        raise ConfigError(f"density must be in [0, 1], got {density}")
    L = len(mapping.per_layer)
    act = activity or [1.0] * L
    if len(act) != L:
        raise ConfigError("activity trace must have one rate per layer")

    if mode == "LP":
        lp_frac, bw_frac = 1.0, 0.0
    elif mode == "GP":
        lp_frac, bw_frac = 0.0, 1.0
    else:
        lp_frac, bw_frac = 1.0 - density, density

    phases: list[Phase] = []
    for m in range(1, T + 1):
        for li in range(L):
            phases.append(_compute_phase(
                f"fwd.t{m}.layer{li}", mapping.per_layer[li], spec, lp_frac))
            if li + 1 < L:
                receivers = mapping.per_layer[li + 1]
                vols = [r.axons * act[li] for r in receivers]
                phases.append(_router_phase(
                    f"fwd.t{m}.route{li}->{li + 1}", mapping.per_layer[li],
                    receivers, spec, vols))

    if bw_frac > 0.0:
        for m in range(T, 0, -1):
            for li in range(L - 1, -1, -1):
                phases.append(_compute_phase(
                    f"bwd.t{m}.layer{li}", mapping.per_layer[li], spec,
                    0.0, backward=True))
                # Scale backward AD work by the trainable fraction.
                ph = phases[-1]
                ph.clocks[AXON_DENDRITE] = [c * bw_frac
                                            for c in ph.clocks[AXON_DENDRITE]]
                if li > 0:
                    receivers = mapping.per_layer[li - 1]
                    vols = [r.neurons * bw_frac for r in receivers]
                    phases.append(_router_phase(
                        f"bwd.t{m}.route{li}->{li - 1}", mapping.per_layer[li],
                        receivers, spec, vols))
    return CostSchedule(phases=phases, mode=mode, T=T)


def route_cost(sched: CostSchedule) -> float:
    """RC = sum over router phases of core_count * total packet volume."""
    total = 0.0
    for ph in sched.phases:
        if ROUTER in ph.ops:
            total += ph.core_count * sum(ph.packets)
    return total


def total_clocks(sched: CostSchedule) -> float:
    """Pipeline-bottleneck clock total: per phase, per operator type, the
    max clock count across that phase's cores, summed."""
    total = 0.0
    for ph in sched.phases:
        for op in ph.ops:
            counts = ph.clocks.get(op, [])
            if counts:
                total += max(counts)
    return total


def throughput(sched: CostSchedule, spec: FCoreSpec) -> float:
    """TC = F / total bottleneck clocks; errors on an all-empty schedule."""
    clocks = total_clocks(sched)
    if clocks <= 0.0:
        raise ConfigError("schedule has zero total clocks")
    return spec.F / clocks


def compare_modes(dims: list[int], spec: FCoreSpec, T: int,
                  density: float = 0.03) -> list[dict]:
    """Map, schedule and cost all three learning modes on one shape."""
    mapping = map_network(dims, spec)
    rows = []
    for mode in MODES:
        sched = schedule(mapping, mode, T, spec, density=density)
        rc = route_cost(sched)
        clocks = total_clocks(sched)
        rows.append({
            "mode": mode,
            "rc": rc,
            "total_clocks": clocks,
            "tc": throughput(sched, spec),
            "core_count": mapping.n_cores,
        })
    return rows
