"""Position-independent module images and the ADLM binary format.

Layout (little-endian, counts u32, offsets u64, strings u32 length + UTF-8)::

    "ADLM" | version u16 = 1 | module name
    sections:    count | {name, part u8, kind u8, align u32, size u64, bytes}
    symbols:     count | {name, binding u8, section u32 (0xFFFFFFFF = undefined), offset u64}
    relocations: count | {section u32, offset u64, kind u8, target u32, addend i64}
    exports:     count | {name}
    update hook: present u8 | [name]
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

MAGIC = b"ADLM"
VERSION = 1
UNDEFINED = 0xFFFF_FFFF


class Part(enum.IntEnum):
    MOVABLE = 0
    IMMOVABLE = 1


class Kind(enum.IntEnum):
    TEXT = 0
    DATA = 1
    RODATA = 2
    FIXED_TEXT = 3

    @property
    def part(self) -> Part:
        return Part.IMMOVABLE if self in (Kind.RODATA, Kind.FIXED_TEXT) else Part.MOVABLE

    @property
    def is_code(self) -> bool:
        return self in (Kind.TEXT, Kind.FIXED_TEXT)


class Binding(enum.IntEnum):
    LOCAL = 0
    EXPORTED = 1
    IMPORTED = 2


class RelocKind(enum.IntEnum):
    ABS64 = 0
    PC32 = 1
    GOT_LOCAL = 2
    GOT_FIXED = 3
    PLT32 = 4
    GOT_KEY = 5     # displacement to the return-address key slot

    @property
    def width(self) -> int:
        return 8 if self is RelocKind.ABS64 else 4


@dataclass(frozen=True)
class Section:
    name: str
    part: Part
    kind: Kind
    data: bytes
    align: int = 16


@dataclass(frozen=True)
class Symbol:
    name: str
    binding: Binding
    section: int = UNDEFINED
    offset: int = 0

    @property
    def defined(self) -> bool:
        return self.section != UNDEFINED


@dataclass(frozen=True)
class Relocation:
    section: int
    offset: int
    kind: RelocKind
    target: int
    addend: int = 0


@dataclass(frozen=True)
class ModuleImage:
    name: str
    sections: tuple[Section, ...]
    symbols: tuple[Symbol, ...]
    relocations: tuple[Relocation, ...]
    exports: tuple[str, ...] = ()
    update_hook: str | None = None

    def symbol_index(self, name: str) -> int:
        for i, sym in enumerate(self.symbols):
            if sym.name == name:
                return i
        raise KeyError(name)

    def symbol(self, name: str) -> Symbol:
        return self.symbols[self.symbol_index(name)]

    def section_index(self, name: str) -> int:
        for i, sec in enumerate(self.sections):
            if sec.name == name:
                return i
        raise KeyError(name)

    def imports(self) -> list[str]:
        return [s.name for s in self.symbols if s.binding is Binding.IMPORTED]


class ValidationError(Exception):
    def __init__(self, rule: str, detail: str = ""):
        super().__init__(f"{rule}: {detail}" if detail else rule)
        self.rule = rule


class MalformedImage(Exception):
    pass


def validate(image: ModuleImage) -> None:
    """Raise ValidationError naming the first broken rule."""
    names = set()
    for sec in image.sections:
        if sec.name in names:
            raise ValidationError("duplicate_section", sec.name)
        names.add(sec.name)
        if sec.part is not sec.kind.part:
            rule = {
                Kind.RODATA: "rodata_immovable",
                Kind.FIXED_TEXT: "fixed_text_immovable",
                Kind.TEXT: "text_movable",
                Kind.DATA: "data_movable",
            }[sec.kind]
            raise ValidationError(rule, sec.name)
        if sec.align <= 0 or sec.align & (sec.align - 1) or sec.align > 4096:
            raise ValidationError("bad_align", f"{sec.name}: {sec.align}")

    nsec = len(image.sections)
    seen = set()
    for sym in image.symbols:
        if sym.name in seen:
            raise ValidationError("duplicate_symbol", sym.name)
        seen.add(sym.name)
        if sym.binding is Binding.IMPORTED:
            if sym.defined:
                raise ValidationError("import_undefined", sym.name)
            continue
        if not sym.defined:
            raise ValidationError("symbol_undefined", sym.name)
        if sym.section >= nsec:
            raise ValidationError("bad_index", f"symbol {sym.name} section {sym.section}")
        if not 0 <= sym.offset <= len(image.sections[sym.section].data):
            raise ValidationError("bad_offset", sym.name)
        if sym.binding is Binding.EXPORTED and image.sections[sym.section].kind is not Kind.TEXT:
            raise ValidationError("export_movable_text", sym.name)

    by_name = {s.name: s for s in image.symbols}
    for name in image.exports:
        sym = by_name.get(name)
        if sym is None:
            raise ValidationError("export_unknown", name)
        if sym.binding is not Binding.EXPORTED:
            raise ValidationError("export_binding", name)
    if image.update_hook is not None:
        sym = by_name.get(image.update_hook)
        if sym is None or not sym.defined or image.sections[sym.section].kind is not Kind.TEXT:
            raise ValidationError("update_hook", str(image.update_hook))

    for r in image.relocations:
        if r.section >= nsec or r.target >= len(image.symbols):
            raise ValidationError("bad_index", f"relocation {r}")
        sec = image.sections[r.section]
        if r.offset < 0 or r.offset + r.kind.width > len(sec.data):
            raise ValidationError("bad_site", f"relocation {r}")
        target = image.symbols[r.target]
        if r.kind is RelocKind.ABS64:
            if sec.kind.is_code:
                raise ValidationError("abs64_in_code", sec.name)
            tsec = image.sections[target.section] if target.defined else None
            if sec.part is Part.IMMOVABLE and tsec is not None and tsec.part is Part.MOVABLE \
                    and target.binding is not Binding.EXPORTED:
                raise ValidationError("immovable_abs_movable", target.name)
            continue
        if not sec.kind.is_code:
            raise ValidationError("code_reloc_in_data", f"{r.kind.name} in {sec.name}")
        if r.kind is RelocKind.GOT_KEY:
            if sec.part is not Part.MOVABLE:
                raise ValidationError("key_movable_only", sec.name)
            continue
        if r.kind in (RelocKind.GOT_LOCAL, RelocKind.GOT_FIXED):
            local = target.defined and image.sections[target.section].part is Part.MOVABLE
            if (r.kind is RelocKind.GOT_LOCAL) != local:
                raise ValidationError("got_locality", f"{r.kind.name} -> {target.name}")


# -- builder ---------------------------------------------------------------

@dataclass
class ModuleBuilder:
    """Programmatic construction of a ModuleImage.

    Relocation targets may be given by name; unknown names become imports
    when the image is built.
    """

    name: str
    sections: list[Section] = field(default_factory=list)
    symbols: list[Symbol] = field(default_factory=list)
    relocs: list[tuple[int, int, RelocKind, str | int, int]] = field(default_factory=list)
    exports: list[str] = field(default_factory=list)
    update_hook: str | None = None

    def section(self, name: str, kind: Kind, data: bytes = b"", align: int = 16,
                part: Part | None = None) -> int:
        self.sections.append(Section(name, kind.part if part is None else part, kind,
                                     bytes(data), align))
        return len(self.sections) - 1

    def symbol(self, name: str, binding: Binding = Binding.LOCAL,
               section: int = UNDEFINED, offset: int = 0) -> int:
        self.symbols.append(Symbol(name, binding, section, offset))
        return len(self.symbols) - 1

    def function(self, name: str, section: int, offset: int = 0, export: bool = False) -> int:
        idx = self.symbol(name, Binding.EXPORTED if export else Binding.LOCAL, section, offset)
        if export:
            self.exports.append(name)
        return idx

    def reloc(self, section: int, offset: int, kind: RelocKind, target: str | int,
              addend: int = 0) -> None:
        self.relocs.append((section, offset, kind, target, addend))

    def build(self, check: bool = True) -> ModuleImage:
        symbols = list(self.symbols)
        index = {s.name: i for i, s in enumerate(symbols)}
        relocs = []
        for sec, off, kind, target, addend in self.relocs:
            if isinstance(target, str):
                if target not in index:
                    symbols.append(Symbol(target, Binding.IMPORTED))
                    index[target] = len(symbols) - 1
                target = index[target]
            relocs.append(Relocation(sec, off, kind, target, addend))
        image = ModuleImage(self.name, tuple(self.sections), tuple(symbols), tuple(relocs),
                            tuple(self.exports), self.update_hook)
        if check:
            validate(image)
        return image


def build(builder: ModuleBuilder) -> ModuleImage:
    return builder.build()


# -- serialization -----------------------------------------------------------

def _str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def serialize(image: ModuleImage) -> bytes:
    out = [MAGIC, struct.pack("<H", VERSION), _str(image.name)]
    out.append(struct.pack("<I", len(image.sections)))
    for s in image.sections:
        out += [_str(s.name), struct.pack("<BBIQ", s.part, s.kind, s.align, len(s.data)), s.data]
    out.append(struct.pack("<I", len(image.symbols)))
    for y in image.symbols:
        out += [_str(y.name), struct.pack("<BIQ", y.binding, y.section, y.offset)]
    out.append(struct.pack("<I", len(image.relocations)))
    for r in image.relocations:
        out.append(struct.pack("<IQBIq", r.section, r.offset, r.kind, r.target, r.addend))
    out.append(struct.pack("<I", len(image.exports)))
    out += [_str(e) for e in image.exports]
    if image.update_hook is None:
        out.append(b"\x00")
    else:
        out += [b"\x01", _str(image.update_hook)]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedImage(f"truncated at byte {self.pos} (wanted {n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode()
        except UnicodeDecodeError as exc:
            raise MalformedImage("bad string") from exc


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        raise MalformedImage(f"bad {cls.__name__} value {value}") from None


def parse(data: bytes) -> ModuleImage:
    rd = _Reader(bytes(data))
    if rd.take(4) != MAGIC:
        raise MalformedImage("bad magic")
    (version,) = rd.unpack("<H")
    if version != VERSION:
        raise MalformedImage(f"unsupported version {version}")
    name = rd.string()
    sections = []
    for _ in range(rd.unpack("<I")[0]):
        sname = rd.string()
        part, kind, align, size = rd.unpack("<BBIQ")
        sections.append(Section(sname, _enum(Part, part), _enum(Kind, kind), rd.take(size), align))
    symbols = []
    for _ in range(rd.unpack("<I")[0]):
        yname = rd.string()
        binding, section, offset = rd.unpack("<BIQ")
        if section != UNDEFINED and section >= len(sections):
            raise MalformedImage(f"symbol {yname} section index out of range")
        symbols.append(Symbol(yname, _enum(Binding, binding), section, offset))
    relocs = []
    for _ in range(rd.unpack("<I")[0]):
        section, offset, kind, target, addend = rd.unpack("<IQBIq")
        if section >= len(sections) or target >= len(symbols):
            raise MalformedImage("relocation index out of range")
        relocs.append(Relocation(section, offset, _enum(RelocKind, kind), target, addend))
    exports = tuple(rd.string() for _ in range(rd.unpack("<I")[0]))
    (has_hook,) = rd.unpack("<B")
    if has_hook not in (0, 1):
        raise MalformedImage("bad update-hook flag")
    hook = rd.string() if has_hook else None
    if rd.pos != len(rd.data):
        raise MalformedImage("trailing bytes")
    return ModuleImage(name, tuple(sections), tuple(symbols), tuple(relocs), exports, hook)
