"""Line-oriented assembler producing ModuleImage objects.

Directives::

    .module NAME
    .text | .data | .rodata | .fixed   [SECTION-NAME]
    .global SYM        exported function (must be defined in .text)
    .extern SYM        explicit import (undefined names are imported anyway)
    .hook SYM          update hook run after every re-randomization
    .align N
    .quad VALUE | .quad @SYM[+ADDEND]
    .byte A, B, ...    .ascii "text"    .zero N

Instructions use ``@sym`` for symbol operands::

    call @f          direct call (PC32)           callind @f   call through GOT
    callplt @f       call via PLT (PLT32)          jmpind @f    jump through GOT
    jmp L            jz rN, L     jnz rN, L
    lea @s, rN       ldgot @s, rN
    mov/add/sub/xor rD, rS        movi rD, IMM   addi rD, IMM
    ld rD, [rS+DISP] st [rD+DISP], rS
    push rN  pop rN  xsp rN  sys N  nop  ret  halt
    prologue         epilogue  (return-address encryption; epilogue returns)
"""

from __future__ import annotations

import re
import shlex

from . import isa
from .modfmt import Binding, Kind, ModuleBuilder, ModuleImage, Part, RelocKind

_SECTION_DEFAULTS = {
    ".text": (Kind.TEXT, ".text"),
    ".data": (Kind.DATA, ".data"),
    ".rodata": (Kind.RODATA, ".rodata"),
    ".fixed": (Kind.FIXED_TEXT, ".fixed.text"),
}

_GOT = "GOT"  # locality decided once every symbol is known
_SYMREF = re.compile(r"^@?([A-Za-z_.$][\w.$]*)\s*(?:([+-])\s*(\w+))?$")
_MEM = re.compile(r"^\[\s*(\w+)\s*(?:([+-])\s*(\w+))?\s*\]$")


class AsmError(Exception):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def reg(text: str) -> int:
    t = text.strip().lower()
    if t == "sp":
        return isa.SP
    if t.startswith("r") and t[1:].isdigit() and int(t[1:]) < isa.NGPR:
        return int(t[1:])
    raise ValueError(f"bad register {text!r}")


def _int(text: str) -> int:
    return int(text.strip(), 0)


def _symref(text: str) -> tuple[str, int]:
    m = _SYMREF.match(text.strip())
    if not m:
        raise ValueError(f"bad symbol operand {text!r}")
    addend = 0
    if m.group(2):
        addend = _int(m.group(3)) * (1 if m.group(2) == "+" else -1)
    return m.group(1), addend


def _mem(text: str) -> tuple[int, int]:
    m = _MEM.match(text.strip())
    if not m:
        raise ValueError(f"bad memory operand {text!r}")
    disp = 0
    if m.group(2):
        disp = _int(m.group(3)) * (1 if m.group(2) == "+" else -1)
    return reg(m.group(1)), disp


def _split(operands: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in operands:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


class _Assembler:
    def __init__(self, name: str):
        self.b = ModuleBuilder(name)
        self.buf: dict[int, bytearray] = {}
        self.cur: int | None = None
        self.globals: set[str] = set()
        self.labels: dict[str, tuple[int, int]] = {}
        self.pending: list[tuple[int, int, object, str, int]] = []

    def section(self, kind: Kind, name: str) -> None:
        for i, sec in enumerate(self.b.sections):
            if sec.name == name:
                self.cur = i
                return
        self.cur = self.b.section(name, kind)
        self.buf[self.cur] = bytearray()

    @property
    def out(self) -> bytearray:
        if self.cur is None:
            self.section(Kind.TEXT, ".text")
        return self.buf[self.cur]

    def emit(self, code: bytes, reloc: tuple[int, object, str, int] | None = None) -> None:
        out = self.out
        if reloc is not None:
            field_at, kind, sym, addend = reloc
            self.pending.append((self.cur, len(out) + field_at, kind, sym, addend))
        out += code

    def line(self, text: str) -> None:
        text = text.split(";", 1)[0].split("#", 1)[0].strip()
        while True:
            m = re.match(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$", text)
            if not m:
                break
            self.label(m.group(1))
            text = m.group(2).strip()
        if not text:
            return
        head, _, rest = text.partition(" ")
        head = head.lower()
        if head.startswith("."):
            self.directive(head, rest.strip())
        else:
            self.insn(head, _split(rest))

    def label(self, name: str) -> None:
        if name in self.labels:
            raise ValueError(f"duplicate label {name}")
        self.labels[name] = (self.cur if self.cur is not None else self._ensure(), len(self.out))

    def _ensure(self) -> int:
        self.out
        return self.cur

    def directive(self, head: str, rest: str) -> None:
        if head == ".module":
            self.b.name = rest
        elif head in _SECTION_DEFAULTS:
            kind, default = _SECTION_DEFAULTS[head]
            self.section(kind, rest or default)
        elif head == ".global":
            self.globals.update(s.strip() for s in rest.split(","))
        elif head == ".extern":
            for s in rest.split(","):
                self.b.symbol(s.strip(), Binding.IMPORTED)
        elif head == ".hook":
            self.b.update_hook = rest
        elif head == ".align":
            n = _int(rest)
            out = self.out
            out += bytes((-len(out)) % n)
        elif head == ".quad":
            if rest.startswith("@"):
                sym, addend = _symref(rest)
                self.emit(bytes(8), (0, RelocKind.ABS64, sym, addend))
            else:
                self.emit((_int(rest) & isa.U64).to_bytes(8, "little"))
        elif head == ".byte":
            self.emit(bytes(_int(x) & 0xFF for x in rest.split(",")))
        elif head == ".ascii":
            self.emit(shlex.split(rest)[0].encode())
        elif head == ".zero":
            self.emit(bytes(_int(rest)))
        else:
            raise ValueError(f"unknown directive {head}")

    def insn(self, op: str, ops: list[str]) -> None:
        e = self.emit
        if op in ("nop", "ret", "halt"):
            e(bytes(({"nop": isa.NOP, "ret": isa.RET, "halt": isa.HALT}[op],)))
        elif op == "prologue":
            self._key_xor()
        elif op == "epilogue":
            self._key_xor()
            e(bytes((isa.RET,)))
        elif op in ("call", "jmp", "callplt"):
            sym, addend = _symref(ops[0])
            enc = isa.enc_jmp() if op == "jmp" else isa.enc_call()
            kind = RelocKind.PLT32 if op == "callplt" else RelocKind.PC32
            e(enc, (1, kind, sym, addend))
        elif op in ("callind", "jmpind"):
            sym, addend = _symref(ops[0])
            enc = isa.enc_callind() if op == "callind" else isa.enc_jmpind()
            e(enc, (2, _GOT, sym, addend))
        elif op in ("jz", "jnz"):
            sym, addend = _symref(ops[1])
            enc = isa.enc_jz(reg(ops[0])) if op == "jz" else isa.enc_jnz(reg(ops[0]))
            e(enc, (2, RelocKind.PC32, sym, addend))
        elif op == "lea":
            sym, addend = _symref(ops[0])
            e(isa.enc_lea(reg(ops[1])), (2, RelocKind.PC32, sym, addend))
        elif op == "ldgot":
            sym, addend = _symref(ops[0])
            e(isa.enc_ldgot(reg(ops[1])), (2, _GOT, sym, addend))
        elif op in ("mov", "add", "sub", "xor"):
            code = {"mov": isa.MOV, "add": isa.ADD, "sub": isa.SUB, "xor": isa.XOR}[op]
            e(isa.enc_rr(code, reg(ops[0]), reg(ops[1])))
        elif op == "movi":
            e(isa.enc_movi(reg(ops[0]), _int(ops[1])))
        elif op == "addi":
            e(isa.enc_addi(reg(ops[0]), _int(ops[1])))
        elif op == "ld":
            src, disp = _mem(ops[1])
            e(isa.enc_ldm(reg(ops[0]), src, disp))
        elif op == "st":
            dst, disp = _mem(ops[0])
            e(isa.enc_stm(dst, reg(ops[1]), disp))
        elif op in ("push", "pop", "xsp"):
            code = {"push": isa.PUSH, "pop": isa.POP, "xsp": isa.XSP}[op]
            e(isa.enc_r(code, reg(ops[0])))
        elif op == "sys":
            e(isa.enc_sys(_int(ops[0])))
        else:
            raise ValueError(f"unknown instruction {op!r}")

    def _key_xor(self) -> None:
        self.emit(isa.enc_ldgot(isa.SCRATCH), (2, RelocKind.GOT_KEY, "__key", 0))
        self.emit(isa.enc_r(isa.XSP, isa.SCRATCH))
        self.emit(isa.enc_rr(isa.XOR, isa.SCRATCH, isa.SCRATCH))

    def finish(self) -> ModuleImage:
        b = self.b
        b.sections = [
            type(sec)(sec.name, sec.part, sec.kind, bytes(self.buf[i]), sec.align)
            for i, sec in enumerate(b.sections)
        ]
        declared = {s.name for s in b.symbols}
        for name, (sec, off) in self.labels.items():
            if name in declared:
                raise ValueError(f"label {name} clashes with a declared symbol")
            exported = name in self.globals
            b.function(name, sec, off, export=exported)
        missing = self.globals - set(self.labels)
        if missing:
            raise ValueError(f"undefined globals: {sorted(missing)}")
        needs_key = any(p[2] is RelocKind.GOT_KEY for p in self.pending)
        if needs_key and "__key" not in declared:
            b.symbol("__key", Binding.IMPORTED)
        for sec, off, kind, sym, addend in self.pending:
            if kind == _GOT:
                loc = self.labels.get(sym)
                local = loc is not None and b.sections[loc[0]].part is Part.MOVABLE
                kind = RelocKind.GOT_LOCAL if local else RelocKind.GOT_FIXED
            b.reloc(sec, off, kind, sym, addend)
        return b.build()


def assemble(source: str, name: str = "module") -> ModuleImage:
    asm = _Assembler(name)
    for lineno, text in enumerate(source.splitlines(), 1):
        try:
            asm.line(text)
        except (ValueError, IndexError) as exc:
            raise AsmError(lineno, str(exc)) from exc
    return asm.finish()
