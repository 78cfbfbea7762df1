"""
Canonical variable names, their module tags, units, and the per-PBM schemas.

Registry order: module blocks carbon, water, nitrogen, thermal, then drivers;
alphabetical within a block. Every name emitted anywhere in kgfm is listed here.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import SchemaError

MODULES: Tuple[str, ...] = ("carbon", "water", "nitrogen", "thermal")
PBM_IDS: Tuple[str, ...] = ("PBM-A", "PBM-B")

# Driver column order inside DriverSeries.features
DRIVERS: Tuple[str, ...] = (
    "TMAX", "TMIN", "PREC", "RADN", "HUMIDITY_MAX", "HUMIDITY_MIN", "WIND",
    "TBKDS", "TCSAND", "TCSILT", "TPH", "TSOC",
    "FERTZR_N", "PDOY", "FDOY", "PLANTT",
)

DRIVER_UNITS: Dict[str, str] = {
    "TMAX": "degC", "TMIN": "degC", "PREC": "mm/day", "RADN": "MJ/m2/day",
    "HUMIDITY_MAX": "%", "HUMIDITY_MIN": "%", "WIND": "m/s",
    "TBKDS": "Mg/m3", "TCSAND": "g/kg", "TCSILT": "g/kg", "TPH": "-", "TSOC": "gC/kg",
    "FERTZR_N": "gN/m2", "PDOY": "day", "FDOY": "day", "PLANTT": "-",
}

# Full schemas of PBM-A, module order as in MODULES
PBM_A_SCHEMA: Dict[str, Tuple[str, ...]] = {
    "carbon": ("Reco", "GPP", "CO2_FLUX", "Yield", "Delta_SOC", "LAI"),
    "nitrogen": ("N2O_FLUX", "NH4_1", "NH4_2", "NH4_3", "NO3_1", "NO3_3", "NO3_5"),
    "water": ("WTR_1", "WTR_3", "WTR_5", "ET"),
    "thermal": ("TMAX_SOIL_1", "TMIN_SOIL_1", "TMAX_SOIL_3", "TMIN_SOIL_3", "TMAX_SOIL_5", "TMIN_SOIL_5"),
}

# PBM-B reports ammonium only for the top layer
PBM_B_SCHEMA: Dict[str, Tuple[str, ...]] = {
    **PBM_A_SCHEMA,
    "nitrogen": ("N2O_FLUX", "NH4_1", "NO3_1", "NO3_3", "NO3_5"),
}

SCHEMAS: Dict[str, Dict[str, Tuple[str, ...]]] = {"PBM-A": PBM_A_SCHEMA, "PBM-B": PBM_B_SCHEMA}

VARIABLE_UNITS: Dict[str, str] = {
    "Reco": "gC/m2/day", "GPP": "gC/m2/day", "CO2_FLUX": "gC/m2/day", "Yield": "kg/ha/yr",
    "Delta_SOC": "gC/m2/yr", "LAI": "m2/m2",
    "N2O_FLUX": "mgN/m2/day", "NH4_1": "g/Mg", "NH4_2": "g/Mg", "NH4_3": "g/Mg",
    "NO3_1": "g/Mg", "NO3_3": "g/Mg", "NO3_5": "g/Mg",
    "WTR_1": "m3/m3", "WTR_3": "m3/m3", "WTR_5": "m3/m3", "ET": "mm/day",
    "TMAX_SOIL_1": "degC", "TMIN_SOIL_1": "degC", "TMAX_SOIL_3": "degC",
    "TMIN_SOIL_3": "degC", "TMAX_SOIL_5": "degC", "TMIN_SOIL_5": "degC",
}

# Decoder heads, in head order
TARGETS: Tuple[str, ...] = ("GPP", "CO2_FLUX", "N2O_FLUX", "ET", "Yield", "Delta_SOC")
# Variables a downstream observation set may carry
OBSERVED_TARGETS: Tuple[str, ...] = ("GPP", "CO2_FLUX", "N2O_FLUX")
# Observables used to synthesize selector training data: one or more per module
SELECTOR_OBSERVABLES: Tuple[str, ...] = (
    "GPP", "CO2_FLUX", "N2O_FLUX", "ET", "WTR_1", "TMAX_SOIL_1", "TMIN_SOIL_1",
)
ANNUAL: Tuple[str, ...] = ("Yield", "Delta_SOC")

# Supervised leading dimensions of the intermediate head q
Q_TARGETS: Dict[str, Tuple[str, ...]] = {
    "water": ("WTR_1", "WTR_3", "WTR_5"),
    "thermal": ("TMAX_SOIL_1", "TMIN_SOIL_1"),
    "carbon": ("LAI",),
    "nitrogen": ("NO3_1",),
}

DISPLAY_PRECISION = 4


@dataclass(frozen=True)
class Variable:
    name: str
    block: str
    unit: str
    precision: int = DISPLAY_PRECISION


class VariableRegistry:
    """Ordered, frozen list of every canonical variable name."""

    def __init__(self, variables: Iterable[Variable]):
        self.variables: Tuple[Variable, ...] = tuple(variables)
        self._index: Dict[str, int] = {}
        for i, v in enumerate(self.variables):
            if v.name in self._index:
                raise SchemaError(f"duplicate variable name '{v.name}'")
            self._index[v.name] = i

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.variables)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def position(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"unknown variable '{name}'") from None

    def require(self, names: Iterable[str]) -> None:
        for n in names:
            self.position(n)

    def module_of(self, name: str) -> str:
        return self.variables[self.position(name)].block

    def ordered(self, names: Iterable[str]) -> List[str]:
        return sorted(names, key=self.position)


def _build_registry() -> VariableRegistry:
    variables: List[Variable] = []
    for module in MODULES:
        names = set(PBM_A_SCHEMA[module]) | set(PBM_B_SCHEMA[module])
        variables += [Variable(n, module, VARIABLE_UNITS[n]) for n in sorted(names)]
    variables += [Variable(n, "driver", DRIVER_UNITS[n]) for n in sorted(DRIVERS)]
    return VariableRegistry(variables)


REGISTRY = _build_registry()


def union_schema(module: str, pbm_ids: Sequence[str] = PBM_IDS) -> Tuple[str, ...]:
    """Variables of ``module`` produced by any of ``pbm_ids``, registry order."""
    names = set()
    for pbm in pbm_ids:
        names |= set(schema_for(pbm, module))
    return tuple(REGISTRY.ordered(names))


def schema_for(pbm_id: str, module: str) -> Tuple[str, ...]:
    try:
        return SCHEMAS[pbm_id][module]
    except KeyError:
        raise SchemaError(f"no schema for pbm '{pbm_id}' module '{module}'") from None


def producers(name: str, pbm_ids: Sequence[str] = PBM_IDS) -> List[str]:
    module = REGISTRY.module_of(name)
    return [p for p in pbm_ids if name in schema_for(p, module)]


def module_of_target(name: str) -> str:
    module = REGISTRY.module_of(name)
    if module not in MODULES:
        raise SchemaError(f"'{name}' is a driver, not a flux variable")
    return module


def check_record(record: Mapping[str, object], registry: Optional[VariableRegistry] = None) -> None:
    (registry or REGISTRY).require(record.keys())
