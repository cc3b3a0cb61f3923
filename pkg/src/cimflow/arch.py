"""Three-tier hardware description: chip / core / crossbar, plus computing mode.

Loaded from a JSON file with one object per tier.  Any omitted optional field
takes its "ideal" default: unbounded buffers and ALU, zero NoC cost, DAC wide
enough to feed an input value in one step.  Every resource constraint is
therefore opt-in.

    {"mode": "wlm",
     "chip": {"core_number": 2},
     "core": {"xb_number": 2},
     "xbar": {"xb_rows": 32, "xb_cols": 128, "parallel_row": 16,
              "cell_type": "ReRAM", "cell_precision_bits": 2}}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import DomainError, ParseError, ValidationError

MODES = ("cm", "xbm", "wlm")
NOC_KINDS = ("shared-memory", "mesh")
CELL_TYPES = ("SRAM", "ReRAM", "PCM", "FLASH")

#: Default write latency per row, cycles.  Non-volatile cells write slowly.
WRITE_CYCLES_BY_TYPE = {"SRAM": 1, "ReRAM": 100, "PCM": 100, "FLASH": 100}

#: Measured peak-power split between converters, crossbar activity and
#: data movement in the PUMA-style evaluation.
DEFAULT_POWER_WEIGHTS = {"adc_dac": 0.10, "xb_active": 0.83, "data_move": 0.07}


@dataclass(frozen=True)
class ChipTier:
    core_number: int
    alu_ops_per_cycle: int | None = None  # None = unbounded
    l0_size_bits: int | None = None
    l0_bw_bits_per_cycle: int | None = None
    noc_kind: str = "shared-memory"
    noc_cost_cycles_per_bit: float = 0.0

    def __post_init__(self):
        if self.core_number < 1:
            raise ValidationError("core_number must be >= 1")
        if self.noc_kind not in NOC_KINDS:
            raise ValidationError(f"unknown noc kind {self.noc_kind!r}")
        if self.noc_cost_cycles_per_bit < 0:
            raise ValidationError("noc cost must be >= 0")


@dataclass(frozen=True)
class CoreTier:
    xb_number: int
    alu_ops_per_cycle: int | None = None
    l1_size_bits: int | None = None
    l1_bw_bits_per_cycle: int | None = None
    noc_kind: str = "shared-memory"
    noc_cost_cycles_per_bit: float = 0.0

    def __post_init__(self):
        if self.xb_number < 1:
            raise ValidationError("xb_number must be >= 1")
        if self.noc_kind not in NOC_KINDS:
            raise ValidationError(f"unknown noc kind {self.noc_kind!r}")


@dataclass(frozen=True)
class CrossbarTier:
    xb_rows: int
    xb_cols: int
    parallel_row: int
    dac_bits: int | None = None  # None = converts a full input value at once
    adc_bits: int | None = None
    cell_type: str = "ReRAM"
    cell_precision_bits: int = 2
    write_cycles_per_row: int | None = None

    def __post_init__(self):
        if self.xb_rows < 1 or self.xb_cols < 1:
            raise ValidationError("crossbar dimensions must be >= 1")
        if not 1 <= self.parallel_row <= self.xb_rows:
            raise ValidationError(
                f"parallel_row {self.parallel_row} outside 1..{self.xb_rows}"
            )
        if self.cell_type not in CELL_TYPES:
            raise ValidationError(f"unknown cell type {self.cell_type!r}")
        if not 1 <= self.cell_precision_bits <= 8:
            raise ValidationError("cell_precision_bits must be in 1..8")

    @property
    def write_cycles(self) -> int:
        if self.write_cycles_per_row is not None:
            return self.write_cycles_per_row
        return WRITE_CYCLES_BY_TYPE[self.cell_type]


@dataclass(frozen=True)
class HwSpec:
    chip: ChipTier
    core: CoreTier
    xbar: CrossbarTier
    mode: str = "wlm"
    power_weights: dict = field(default_factory=lambda: dict(DEFAULT_POWER_WEIGHTS))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        total = sum(self.power_weights.values())
        if total <= 0 or any(v < 0 for v in self.power_weights.values()):
            raise ValidationError("power weights must be non-negative with positive sum")
        object.__setattr__(
            self, "power_weights", {k: v / total for k, v in self.power_weights.items()}
        )

    @property
    def total_crossbars(self) -> int:
        return self.chip.core_number * self.core.xb_number

    def scheduling_levels(self) -> tuple:
        return {"cm": ("cg",), "xbm": ("cg", "mvm"), "wlm": ("cg", "mvm", "vvm")}[self.mode]


def core_weight_capacity_bits(hw: HwSpec) -> int:
    """Weight bits one core can hold across all of its crossbars."""
    xb = hw.xbar
    return hw.core.xb_number * xb.xb_rows * xb.xb_cols * xb.cell_precision_bits


def cycles_per_mvm(hw: HwSpec, rows_used: int, input_bits: int) -> int:
    """Cycles for one crossbar activation over `rows_used` rows.

    Input values enter through the DAC in ceil(input_bits / dac_bits) waves;
    each wave activates the rows in groups of parallel_row.
    """
    xb = hw.xbar
    if not 1 <= rows_used <= xb.xb_rows:
        raise DomainError(f"rows_used {rows_used} outside 1..{xb.xb_rows}")
    if input_bits < 1:
        raise DomainError("input_bits must be >= 1")
    dac = xb.dac_bits if xb.dac_bits is not None else input_bits
    return math.ceil(input_bits / dac) * math.ceil(rows_used / xb.parallel_row)


def _tier(cls, obj, name):
    if not isinstance(obj, dict):
        raise ParseError(f"{name} tier must be a JSON object")
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(obj) - known
    if unknown:
        raise ParseError(f"{name} tier has unknown fields {sorted(unknown)}")
    clean = {k: v for k, v in obj.items() if v is not None}
    try:
        return cls(**clean)
    except TypeError as exc:
        raise ParseError(f"{name} tier: {exc}") from exc


def arch_from_json(doc) -> HwSpec:
    if not isinstance(doc, dict):
        raise ParseError("arch document must be a JSON object")
    for key in ("chip", "core", "xbar"):
        if key not in doc:
            raise ParseError(f"arch document missing {key!r}")
    mode = str(doc.get("mode", "wlm")).lower()
    weights = doc.get("power_weights", DEFAULT_POWER_WEIGHTS)
    if set(weights) != set(DEFAULT_POWER_WEIGHTS):
        raise ParseError(f"power_weights must have keys {sorted(DEFAULT_POWER_WEIGHTS)}")
    return HwSpec(
        chip=_tier(ChipTier, doc["chip"], "chip"),
        core=_tier(CoreTier, doc["core"], "core"),
        xbar=_tier(CrossbarTier, doc["xbar"], "xbar"),
        mode=mode,
        power_weights=dict(weights),
    )


def load_arch(path) -> HwSpec:
    """Load and validate a hardware description from its JSON file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read arch {path}: {exc}") from exc
    return arch_from_json(doc)
