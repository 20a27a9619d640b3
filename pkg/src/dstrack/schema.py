"""Service schemas: intents, slots, categorical values and their descriptions.

Schema files are JSON lists of services in the public SGD layout (a strict
subset of its fields is read; unknown fields are ignored). All schema
elements are flattened into a deterministically ordered element table that
the decoder points into.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

DONTCARE = "dontcare"

INTENT = "intent"
SLOT = "slot"
VALUE = "value"


class SchemaParseError(ValueError):
    pass


class SchemaValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Intent:
    name: str
    description: str


@dataclass(frozen=True)
class Slot:
    name: str
    description: str
    is_categorical: bool
    possible_values: tuple[str, ...] = ()


@dataclass(frozen=True)
class Schema:
    service_name: str
    description: str
    intents: tuple[Intent, ...]
    slots: tuple[Slot, ...]

    def slot(self, name: str) -> Slot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(f"no slot {name!r} in service {self.service_name!r}")


@dataclass(frozen=True)
class Element:
    """One row of the flat element table the pointer vocabulary is built on."""

    index: int
    kind: str  # INTENT | SLOT | VALUE
    service: str
    name: str  # intent/slot name, or the value string for kind VALUE
    owning_slot: str | None = None  # set for kind VALUE
    pair: tuple[str, str] = ("", "")  # the two description sequences

    def key(self) -> tuple:
        return (self.kind, self.service, self.owning_slot or "", self.name)


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise SchemaParseError(f"missing required field {key!r} at {path}")
    return obj[key]


def parse_schemas(text: str) -> list[Schema]:
    """Parse a JSON schema file (list of services); validates uniqueness rules."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaParseError(f"not valid JSON: {e}") from e
    if not isinstance(raw, list):
        raise SchemaParseError("schema file must be a JSON list of services")
    schemas = []
    for si, svc in enumerate(raw):
        path = f"services[{si}]"
        name = _require(svc, "service_name", path)
        desc = _require(svc, "description", path)
        intents = []
        seen = set()
        for ii, it in enumerate(svc.get("intents", [])):
            ipath = f"{path}.intents[{ii}]"
            iname = _require(it, "name", ipath)
            if iname in seen:
                raise SchemaValidationError(f"duplicate intent name {iname!r} in service {name!r}")
            seen.add(iname)
            intents.append(Intent(iname, _require(it, "description", ipath)))
        slots = []
        seen = set()
        for si2, sl in enumerate(svc.get("slots", [])):
            spath = f"{path}.slots[{si2}]"
            sname = _require(sl, "name", spath)
            if sname in seen:
                raise SchemaValidationError(f"duplicate slot name {sname!r} in service {name!r}")
            seen.add(sname)
            cat = bool(_require(sl, "is_categorical", spath))
            values = tuple(str(v) for v in sl.get("possible_values", []))
            if cat and not values:
                raise SchemaValidationError(
                    f"categorical slot {sname!r} in service {name!r} has empty possible_values"
                )
            if not cat:
                values = ()
            slots.append(Slot(sname, _require(sl, "description", spath), cat, values))
        schemas.append(Schema(name, desc, tuple(intents), tuple(slots)))
    return schemas


def load_schemas(path: str | Path) -> list[Schema]:
    return parse_schemas(Path(path).read_text(encoding="utf-8"))


def schemas_to_json(schemas: list[Schema]) -> str:
    out = []
    for s in schemas:
        out.append(
            {
                "service_name": s.service_name,
                "description": s.description,
                "intents": [{"name": i.name, "description": i.description} for i in s.intents],
                "slots": [
                    {
                        "name": sl.name,
                        "description": sl.description,
                        "is_categorical": sl.is_categorical,
                        "possible_values": list(sl.possible_values),
                    }
                    for sl in s.slots
                ],
            }
        )
    return json.dumps(out, indent=1)


def description_pair(kind: str, schema: Schema, name: str, owning_slot: str | None = None) -> tuple[str, str]:
    """The two token sequences describing one schema element.

    intent -> (service description, intent description)
    slot   -> (service description, slot description)
    value  -> (slot description, value string)
    """
    if kind == INTENT:
        for it in schema.intents:
            if it.name == name:
                return (schema.description, it.description)
        raise KeyError(name)
    if kind == SLOT:
        return (schema.description, schema.slot(name).description)
    if kind == VALUE:
        return (schema.slot(owning_slot).description, name)
    raise ValueError(f"unknown element kind {kind!r}")


@dataclass
class ElementTable:
    """Flat ordered view of all schema elements with dense indices.

    Order: services in file order; per service all intents, then all slots,
    then categorical values grouped by slot (with a trailing per-slot
    ``dontcare`` value when enabled). Size is intents + slots + values.
    """

    elements: list[Element] = field(default_factory=list)
    _by_key: dict[tuple, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.elements)

    def __getitem__(self, index: int) -> Element:
        return self.elements[index]

    def __iter__(self):
        return iter(self.elements)

    def index_of(self, kind: str, service: str, name: str, owning_slot: str | None = None) -> int:
        key = (kind, service, owning_slot or "", name)
        if key not in self._by_key:
            raise KeyError(f"no element {key}")
        return self._by_key[key]

    def values_of(self, service: str, slot: str) -> list[Element]:
        return [e for e in self.elements if e.kind == VALUE and e.service == service and e.owning_slot == slot]


def enumerate_elements(schemas: list[Schema], include_dontcare: bool = True) -> ElementTable:
    table = ElementTable()
    for schema in schemas:
        for it in schema.intents:
            _append(table, INTENT, schema, it.name, None)
        for sl in schema.slots:
            _append(table, SLOT, schema, sl.name, None)
        for sl in schema.slots:
            if not sl.is_categorical:
                continue
            for v in sl.possible_values:
                _append(table, VALUE, schema, v, sl.name)
            if include_dontcare and DONTCARE not in sl.possible_values:
                _append(table, VALUE, schema, DONTCARE, sl.name)
    return table


def _append(table: ElementTable, kind: str, schema: Schema, name: str, owning_slot: str | None):
    pair = (
        description_pair(kind, schema, name, owning_slot)
        if not (kind == VALUE and name == DONTCARE and name not in schema.slot(owning_slot).possible_values)
        else (schema.slot(owning_slot).description, DONTCARE)
    )
    el = Element(
        index=len(table.elements),
        kind=kind,
        service=schema.service_name,
        name=name,
        owning_slot=owning_slot,
        pair=pair,
    )
    table.elements.append(el)
    table._by_key[el.key()] = el.index
