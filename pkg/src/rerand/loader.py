"""Place a ModuleImage into an AddressSpace.

A module is split into two independently placed parts::

    movable:    [text + PLT] [data] [local GOT] [fixed GOT]
    immovable:  [fixed text + wrappers + PLT] [rodata] [local GOT] [fixed GOT]

Each part owns one local GOT (addresses inside the movable part, rebuilt on
every re-randomization) and one fixed GOT (host and immovable addresses,
stable for the module's lifetime), each within rel32 reach of the code
that uses it.  Slot 0 of the movable local GOT holds the return-address
key.  Exports are reached by the host only through wrappers in the
immovable part.
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
import struct
from dataclasses import dataclass, field

from . import isa
from .host import Host
from .modfmt import (Binding, Kind, ModuleImage, Part, Relocation, RelocKind,
                     validate)
from .vmem import PAGE_SIZE, RO, RW, RX, AddressSpace, PlacementExhausted, Region

WRAPPER_LEN = 27
PLT_STUB_LEN = 6
KEY_SLOT = 0
KEY_NAME = "__key"


class LoadError(Exception):
    pass


class RelocOverflow(LoadError):
    pass


class UnresolvedImport(LoadError):
    pass


class Locality(enum.Enum):
    LOCAL = "local"
    FIXED = "fixed"


@dataclass
class LoadConfig:
    retpoline: bool = False
    optimize: bool = True
    rng_seed: int | None = None


@dataclass
class PatchStats:
    direct_calls: int = 0
    lea: int = 0
    plt_bypass: int = 0

    @property
    def total(self) -> int:
        return self.direct_calls + self.lea + self.plt_bypass


@dataclass
class GotTable:
    part: Part
    locality: Locality
    slots: list = field(default_factory=list)      # (symbol, addend) per slot
    values: list[int] = field(default_factory=list)
    base: int = 0
    region: Region | None = None

    def slot_for(self, key) -> int:
        try:
            return self.slots.index(key)
        except ValueError:
            self.slots.append(key)
            self.values.append(0)
            return len(self.slots) - 1

    def slot_addr(self, slot: int) -> int:
        return self.base + 8 * slot

    @property
    def npages(self) -> int:
        return max(1, -(-8 * len(self.slots) // PAGE_SIZE))

    @property
    def entries(self) -> list[tuple[str, int]]:
        return [(k[0], v) for k, v in zip(self.slots, self.values)]

    def image(self) -> bytes:
        raw = b"".join(struct.pack("<Q", v & isa.U64) for v in self.values)
        return raw + bytes(self.npages * PAGE_SIZE - len(raw))


@dataclass
class PltStub:
    symbol: str
    addr: int
    got: GotTable
    slot: int


@dataclass
class _Site:
    """How one relocation will be materialised."""

    reloc: Relocation
    form: str            # call | jmp | load | data | rel
    action: str          # got | plt | direct | lea | pc32 | abs | key
    got: tuple | None = None
    slot: int = 0
    plt: PltStub | None = None


# region name -> (part, perms)
REGIONS = {
    "text": (Part.MOVABLE, RX),
    "data": (Part.MOVABLE, RW),
    "local_got": (Part.MOVABLE, RO),
    "fixed_got": (Part.MOVABLE, RO),
    "fixed_text": (Part.IMMOVABLE, RX),
    "rodata": (Part.IMMOVABLE, RO),
    "imm_local_got": (Part.IMMOVABLE, RO),
    "imm_fixed_got": (Part.IMMOVABLE, RO),
}
_GOT_REGION = {
    (Part.MOVABLE, Locality.LOCAL): "local_got",
    (Part.MOVABLE, Locality.FIXED): "fixed_got",
    (Part.IMMOVABLE, Locality.LOCAL): "imm_local_got",
    (Part.IMMOVABLE, Locality.FIXED): "imm_fixed_got",
}
_SECTION_REGION = {Kind.TEXT: "text", Kind.DATA: "data", Kind.FIXED_TEXT: "fixed_text",
                   Kind.RODATA: "rodata"}


@dataclass
class LoadedModule:
    image: ModuleImage
    retpoline: bool
    movable_base: int
    immovable_base: int
    gots: dict[tuple[Part, Locality], GotTable]
    plt: dict[Part, list[PltStub]]
    wrappers: dict[str, int]
    offsets: dict[str, int]                 # region -> offset within its part
    sizes: dict[str, int]                   # region -> pages
    section_offsets: dict[int, int]         # section -> offset within its region
    regions: dict[str, Region]
    rebase_sites: list[int]                 # movable-data offsets holding movable pointers
    patch_stats: PatchStats
    key_slot: int = KEY_SLOT
    generation: int = 0
    _key: int = 0
    history: list = field(default_factory=list)
    loaded_at: float = 0.0

    @property
    def name(self) -> str:
        return self.image.name

    def part_base(self, part: Part) -> int:
        return self.movable_base if part is Part.MOVABLE else self.immovable_base

    @property
    def movable_pages(self) -> int:
        return sum(self.sizes[r] for r, (p, _) in REGIONS.items() if p is Part.MOVABLE)

    @property
    def immovable_pages(self) -> int:
        return sum(self.sizes[r] for r, (p, _) in REGIONS.items() if p is Part.IMMOVABLE)

    def movable_range(self) -> range:
        return range(self.movable_base, self.movable_base + self.movable_pages * PAGE_SIZE)

    def immovable_range(self) -> range:
        return range(self.immovable_base, self.immovable_base + self.immovable_pages * PAGE_SIZE)

    def text_range(self) -> range:
        r = self.regions["text"]
        return range(r.base, r.end)

    def symbol_address(self, name: str) -> int:
        sym = self.image.symbol(name)
        if not sym.defined:
            raise KeyError(f"{name} is not defined in {self.name}")
        sec = self.image.sections[sym.section]
        region = _SECTION_REGION[sec.kind]
        return (self.part_base(sec.part) + self.offsets[region]
                + self.section_offsets[sym.section] + sym.offset)

    def key_fingerprint(self) -> str:
        """Hash of the current key; the key itself stays inside the module."""
        return hashlib.sha256(self._key.to_bytes(8, "little")).hexdigest()[:16]

    def snapshot_layout(self) -> dict:
        return {
            "module": self.name,
            "generation": self.generation,
            "movable_base": self.movable_base,
            "immovable_base": self.immovable_base,
            "gots": {_GOT_REGION[k]: self.regions[_GOT_REGION[k]].base for k in self.gots},
            "wrappers": dict(self.wrappers),
        }


def snapshot_layout(loaded: LoadedModule) -> dict:
    return loaded.snapshot_layout()


def write_layout_jsonl(snapshots, fp) -> None:
    for snap in snapshots:
        fp.write(json.dumps(snap, sort_keys=True) + "\n")


def pc32(site: int, target: int) -> int:
    """Signed displacement stored at ``site`` to reach ``target``."""
    disp = target - (site + 4)
    if not isa.fits_rel32(disp):
        raise RelocOverflow(f"displacement {disp:#x} from {site:#x} exceeds rel32")
    return disp


@dataclass
class Layout:
    """Addresses needed to resolve relocations for one placement."""

    section_addr: dict[int, int]
    symbol_addr: dict[int, int]
    symbol_part: dict[int, Part | None]

    def site(self, reloc: Relocation) -> int:
        return self.section_addr[reloc.section] + reloc.offset


def resolve_relocation(reloc: Relocation, layout: Layout, site: _Site | None = None,
                       gots: dict | None = None) -> bytes:
    """Bytes to store at the relocation site.

    ABS64 yields the 8-byte absolute target; every other kind yields a
    rel32 displacement to the target, its GOT slot or its PLT stub.
    """
    at = layout.site(reloc)
    if reloc.kind is RelocKind.ABS64:
        return struct.pack("<Q", (layout.symbol_addr[reloc.target] + reloc.addend) & isa.U64)
    if site is not None and site.action in ("got", "key"):
        target = gots[site.got].slot_addr(site.slot)
    elif site is not None and site.action == "plt":
        target = site.plt.addr
    else:
        target = layout.symbol_addr[reloc.target] + reloc.addend
    return struct.pack("<i", pc32(at, target))


class Linker:
    """Loader state for one module placement."""

    def __init__(self, space: AddressSpace, image: ModuleImage, host: Host,
                 config: LoadConfig, rng: random.Random):
        self.space = space
        self.image = image
        self.host = host
        self.config = config
        self.rng = rng
        self.gots = {k: GotTable(*k) for k in _GOT_REGION}
        self.gots[(Part.MOVABLE, Locality.LOCAL)].slot_for((KEY_NAME, 0))
        self.plt: dict[Part, list[PltStub]] = {Part.MOVABLE: [], Part.IMMOVABLE: []}
        self.sites: list[_Site] = []
        self.stats = PatchStats()
        self.buffers: dict[str, bytearray] = {}
        self.section_offsets: dict[int, int] = {}
        self.wrappers: dict[str, int] = {}
        self.plt_offset: dict[Part, int] = {}
        self.wrapper_offset = 0

    # -- classification ------------------------------------------------

    def _target_part(self, idx: int) -> Part | None:
        sym = self.image.symbols[idx]
        if not sym.defined:
            return None
        return self.image.sections[sym.section].part

    def _locality(self, idx: int) -> Locality:
        return Locality.LOCAL if self._target_part(idx) is Part.MOVABLE else Locality.FIXED

    def _form(self, reloc: Relocation) -> str:
        data = self.image.sections[reloc.section].data
        if reloc.kind is RelocKind.ABS64:
            return "data"
        if reloc.kind in (RelocKind.PC32, RelocKind.PLT32):
            op = data[reloc.offset - 1] if reloc.offset >= 1 else None
            if op == isa.CALL:
                return "call"
            if op == isa.JMP:
                return "jmp"
            return "rel"
        op, sel = data[reloc.offset - 2], data[reloc.offset - 1]
        if op == isa.IND:
            return "call" if sel == isa.SEL_CALL else "jmp"
        if op == isa.LD_GOT:
            return "load"
        raise LoadError(f"{reloc.kind.name} site at {reloc.offset:#x} is not a GOT instruction")

    def _plt_stub(self, part: Part, got_key: tuple, slot: int, name: str) -> PltStub:
        for stub in self.plt[part]:
            if stub.got is self.gots[got_key] and stub.slot == slot:
                return stub
        stub = PltStub(name, -1, self.gots[got_key], slot)
        self.plt[part].append(stub)
        return stub

    def classify(self) -> None:
        cfg = self.config
        for r in self.image.relocations:
            sec = self.image.sections[r.section]
            part = sec.part
            target = self.image.symbols[r.target]
            tpart = self._target_part(r.target)
            form = self._form(r)
            if r.kind is RelocKind.ABS64:
                self.sites.append(_Site(r, form, "abs"))
                continue
            if r.kind is RelocKind.GOT_KEY:
                if form != "load":
                    raise LoadError("key reference must be a GOT load")
                self.sites.append(_Site(r, form, "key", (Part.MOVABLE, Locality.LOCAL), KEY_SLOT))
                continue
            same_part = tpart is part
            if r.kind is RelocKind.PC32:
                if not same_part:
                    raise RelocOverflow(
                        f"PC32 from {sec.name} to {target.name} crosses independently placed parts")
                self.sites.append(_Site(r, form, "pc32"))
                continue
            got_key = (part, self._locality(r.target))
            if r.kind is RelocKind.PLT32:
                if same_part and (cfg.optimize or not cfg.retpoline):
                    if cfg.retpoline:
                        self.stats.plt_bypass += 1
                    self.sites.append(_Site(r, form, "pc32"))
                elif not cfg.retpoline:
                    raise RelocOverflow(f"PLT32 to {target.name} needs a PLT (retpoline mode)")
                else:
                    slot = self.gots[got_key].slot_for((target.name, r.addend))
                    stub = self._plt_stub(part, got_key, slot, target.name)
                    self.sites.append(_Site(r, form, "plt", got_key, slot, stub))
                continue
            # GOT_LOCAL / GOT_FIXED
            if same_part and cfg.optimize:
                self.sites.append(_Site(r, form, "lea" if form == "load" else "direct"))
                continue
            slot = self.gots[got_key].slot_for((target.name, r.addend))
            if form in ("call", "jmp") and cfg.retpoline:
                stub = self._plt_stub(part, got_key, slot, target.name)
                self.sites.append(_Site(r, form, "plt", got_key, slot, stub))
            else:
                self.sites.append(_Site(r, form, "got", got_key, slot))
        for name in self.image.exports:
            key = (Part.IMMOVABLE, Locality.LOCAL)
            slot = self.gots[key].slot_for((name, 0))
            if cfg.retpoline:
                self._plt_stub(Part.IMMOVABLE, key, slot, name)

    # -- layout -----------------------------------------------------------

    def layout_regions(self) -> tuple[dict[str, int], dict[str, int]]:
        used = {name: 0 for name in REGIONS}
        for i, sec in enumerate(self.image.sections):
            region = _SECTION_REGION[sec.kind]
            off = used[region]
            off += (-off) % sec.align
            self.section_offsets[i] = off
            used[region] = off + len(sec.data)
        for part, region in ((Part.MOVABLE, "text"), (Part.IMMOVABLE, "fixed_text")):
            off = used[region]
            if part is Part.IMMOVABLE:
                off += (-off) % 16
                self.wrapper_offset = off
                off += WRAPPER_LEN * len(self.image.exports)
            off += (-off) % 16
            self.plt_offset[part] = off
            off += PLT_STUB_LEN * len(self.plt[part])
            used[region] = off
        sizes = {}
        for name in REGIONS:
            if name in ("local_got", "fixed_got", "imm_local_got", "imm_fixed_got"):
                sizes[name] = self.gots[self._got_of(name)].npages
            else:
                sizes[name] = max(1, -(-used[name] // PAGE_SIZE))
        offsets, cursor = {}, {Part.MOVABLE: 0, Part.IMMOVABLE: 0}
        for name, (part, _) in REGIONS.items():
            offsets[name] = cursor[part]
            cursor[part] += sizes[name] * PAGE_SIZE
        self.offsets, self.sizes = offsets, sizes
        return offsets, sizes

    @staticmethod
    def _got_of(region: str) -> tuple[Part, Locality]:
        for k, v in _GOT_REGION.items():
            if v == region:
                return k
        raise KeyError(region)

    def place(self) -> None:
        mov_pages = sum(self.sizes[r] for r, (p, _) in REGIONS.items() if p is Part.MOVABLE)
        imm_pages = sum(self.sizes[r] for r, (p, _) in REGIONS.items() if p is Part.IMMOVABLE)
        self.movable_base = self.space.random_base(mov_pages, self.rng)
        # reserve the movable range while choosing the immovable base
        self.immovable_base = self._base_avoiding(imm_pages, self.movable_base, mov_pages)
        self.bases = {Part.MOVABLE: self.movable_base, Part.IMMOVABLE: self.immovable_base}

    def _base_avoiding(self, npages: int, other: int, other_pages: int) -> int:
        for _ in range(64):
            base = self.space.random_base(npages, self.rng)
            if base + npages * PAGE_SIZE <= other or base >= other + other_pages * PAGE_SIZE:
                return base
        raise PlacementExhausted("no base for the immovable part")

    def region_base(self, name: str) -> int:
        return self.bases[REGIONS[name][0]] + self.offsets[name]

    # -- resolution -----------------------------------------------------

    def build_layout(self) -> Layout:
        section_addr = {}
        for i, sec in enumerate(self.image.sections):
            section_addr[i] = self.region_base(_SECTION_REGION[sec.kind]) + self.section_offsets[i]
        symbol_addr, symbol_part = {}, {}
        for i, sym in enumerate(self.image.symbols):
            if sym.defined:
                symbol_addr[i] = section_addr[sym.section] + sym.offset
                symbol_part[i] = self.image.sections[sym.section].part
            else:
                symbol_part[i] = None
        self.layout = Layout(section_addr, symbol_addr, symbol_part)
        return self.layout

    def resolve_imports(self) -> None:
        needed = {r.target for r in self.image.relocations if r.kind is not RelocKind.GOT_KEY}
        for i in sorted(needed):
            sym = self.image.symbols[i]
            if sym.defined:
                continue
            addr = self.host.lookup(sym.name)
            if addr is None:
                raise UnresolvedImport(f"{self.image.name}: {sym.name} is not provided by the host")
            self.layout.symbol_addr[i] = addr

    def _value_of(self, name: str, addend: int) -> int:
        return self.layout.symbol_addr[self.image.symbol_index(name)] + addend

    def allocate_tables(self) -> None:
        for key, got in self.gots.items():
            got.base = self.region_base(_GOT_REGION[key])
        for part, stubs in self.plt.items():
            region = "text" if part is Part.MOVABLE else "fixed_text"
            for i, stub in enumerate(stubs):
                stub.addr = self.region_base(region) + self.plt_offset[part] + i * PLT_STUB_LEN
        base = self.region_base("fixed_text") + self.wrapper_offset
        for i, name in enumerate(self.image.exports):
            self.wrappers[name] = base + i * WRAPPER_LEN

    def fill_gots(self, key: int) -> None:
        for (part, loc), got in self.gots.items():
            for slot, (name, addend) in enumerate(got.slots):
                if name == KEY_NAME and (part, loc) == (Part.MOVABLE, Locality.LOCAL):
                    got.values[slot] = key
                else:
                    got.values[slot] = self._value_of(name, addend)

    def _buffer_for_section(self, idx: int) -> tuple[bytearray, int]:
        sec = self.image.sections[idx]
        region = _SECTION_REGION[sec.kind]
        return self.buffers[region], self.section_offsets[idx]

    def emit(self) -> None:
        for name in ("text", "data", "fixed_text", "rodata"):
            self.buffers[name] = bytearray(self.sizes[name] * PAGE_SIZE)
        for i, sec in enumerate(self.image.sections):
            buf, off = self._buffer_for_section(i)
            buf[off:off + len(sec.data)] = sec.data
        self.rebase_sites = []
        for site in self.sites:
            r = site.reloc
            buf, off = self._buffer_for_section(r.section)
            at = off + r.offset
            sec = self.image.sections[r.section]
            if site.action == "abs":
                target = self.image.symbols[r.target]
                immovable = sec.part is Part.IMMOVABLE
                value = (self.layout.symbol_addr[r.target] + r.addend
                         if not (immovable and target.binding is Binding.EXPORTED)
                         else self.wrappers[target.name] + r.addend)
                buf[at:at + 8] = struct.pack("<Q", value & isa.U64)
                if sec.part is Part.MOVABLE and self.layout.symbol_part[r.target] is Part.MOVABLE:
                    self.rebase_sites.append(self.section_offsets[r.section] + r.offset)
            elif site.action in ("got", "key", "pc32"):
                buf[at:at + 4] = resolve_relocation(r, self.layout, site, self.gots)
            elif site.action == "plt":
                start = at - 2 if r.kind in (RelocKind.GOT_LOCAL, RelocKind.GOT_FIXED) else at - 1
                self._write_branch(buf, start, r, site.form, site.plt.addr,
                                   pad=(r.kind is not RelocKind.PLT32))
        self.stats = patch_optimize(self)
        self._emit_wrappers()
        self._emit_plt()

    def _write_branch(self, buf: bytearray, start: int, r: Relocation, form: str,
                      target: int, pad: bool) -> None:
        """Write ``[NOP] CALL/JMP rel32`` ending where the original instruction ended."""
        site_addr = self.layout.site(r)
        insn_end = site_addr + 4
        op = isa.CALL if form == "call" else isa.JMP
        disp = pc32(insn_end - 4, target)
        code = bytes((op,)) + struct.pack("<i", disp)
        if pad:
            code = bytes((isa.NOP,)) + code
        buf[start:start + len(code)] = code

    def _emit_wrappers(self) -> None:
        buf = self.buffers["fixed_text"]
        key = (Part.IMMOVABLE, Locality.LOCAL)
        got = self.gots[key]
        for i, name in enumerate(self.image.exports):
            off = self.wrapper_offset + i * WRAPPER_LEN
            addr = self.wrappers[name]
            slot = got.slot_for((name, 0))
            call_at = addr + 10
            if self.config.retpoline:
                stub = next(s for s in self.plt[Part.IMMOVABLE] if s.got is got and s.slot == slot)
                call = bytes((isa.NOP, isa.CALL)) + struct.pack("<i", pc32(call_at + 2, stub.addr))
            else:
                call = isa.enc_callind(pc32(call_at + 2, got.slot_addr(slot)))
            code = (isa.enc_sys(isa.SVC_MR_START) + isa.enc_sys(isa.SVC_STACK_GET) + call
                    + isa.enc_sys(isa.SVC_STACK_PUT) + isa.enc_sys(isa.SVC_MR_FINISH)
                    + bytes((isa.RET,)))
            assert len(code) == WRAPPER_LEN
            buf[off:off + WRAPPER_LEN] = code

    def _emit_plt(self) -> None:
        for part, stubs in self.plt.items():
            region = "text" if part is Part.MOVABLE else "fixed_text"
            buf = self.buffers[region]
            for i, stub in enumerate(stubs):
                off = self.plt_offset[part] + i * PLT_STUB_LEN
                disp = pc32(stub.addr + 2, stub.got.slot_addr(stub.slot))
                buf[off:off + PLT_STUB_LEN] = isa.enc_jmpind(disp)

    # -- mapping ----------------------------------------------------------

    def map_all(self) -> dict[str, Region]:
        # everything is written through RW mappings, then given final permissions
        regions = {}
        for name in REGIONS:
            base = self.region_base(name)
            if name in _GOT_REGION.values():
                content, tag = self.gots[self._got_of(name)].image(), "got"
            else:
                content, tag = bytes(self.buffers[name]), "module"
            regions[name] = self.space.map_new(base, self.sizes[name], RW, tag=tag)
            self.space.write(base, content)
        for name, (part, perms) in REGIONS.items():
            regions[name] = self.space.protect(regions[name], perms)
            if name in _GOT_REGION.values():
                self.gots[self._got_of(name)].region = regions[name]
        return regions


def patch_optimize(link: Linker) -> PatchStats:
    """Rewrite GOT-mediated references to same-part targets.

    Calls and jumps become ``NOP; CALL/JMP rel32`` (the direct form is one
    byte shorter, so the NOP keeps the return address unchanged); address
    loads become ``LEA``.  Sites that were not planned for rewriting are
    left untouched.
    """
    stats = link.stats
    for site in link.sites:
        if site.action not in ("direct", "lea"):
            continue
        r = site.reloc
        buf, off = link._buffer_for_section(r.section)
        at = off + r.offset
        target = link.layout.symbol_addr[r.target] + r.addend
        if site.action == "lea":
            buf[at - 2] = isa.LEA
            buf[at:at + 4] = struct.pack("<i", pc32(link.layout.site(r), target))
            stats.lea += 1
        else:
            link._write_branch(buf, at - 2, r, site.form, target, pad=True)
            if link.config.retpoline:
                stats.plt_bypass += 1
            else:
                stats.direct_calls += 1
    return stats


def draw_key(rng: random.Random, previous: int = 0) -> int:
    """Uniform nonzero 64-bit key different from ``previous``."""
    while True:
        key = rng.getrandbits(64)
        if key and key != previous:
            return key


def load(space: AddressSpace, image: ModuleImage, host: Host,
         config: LoadConfig | None = None, rng: random.Random | None = None) -> LoadedModule:
    config = config or LoadConfig()
    if rng is None:
        rng = random.Random(config.rng_seed)
    validate(image)
    link = Linker(space, image, host, config, rng)
    link.classify()
    link.layout_regions()
    link.place()
    link.build_layout()
    link.resolve_imports()
    link.allocate_tables()
    key = draw_key(rng)
    link.fill_gots(key)
    link.emit()
    regions = link.map_all()
    loaded = LoadedModule(
        image=image,
        retpoline=config.retpoline,
        movable_base=link.movable_base,
        immovable_base=link.immovable_base,
        gots=link.gots,
        plt=link.plt,
        wrappers=link.wrappers,
        offsets=link.offsets,
        sizes=link.sizes,
        section_offsets=link.section_offsets,
        regions=regions,
        rebase_sites=link.rebase_sites,
        patch_stats=link.stats,
        _key=key,
    )
    for name, addr in link.wrappers.items():
        host.symbols[f"{image.name}:{name}"] = addr
    return loaded
