"""Deterministic interpreter for module bytecode.

Calling convention: arguments in r0..r5, result in r0, r11 is scratch and
is zeroed after every use of the key.  CALL pushes the plaintext return
address; a module function's prologue XORs the stacked value with the
module key and its epilogue XORs it back right before RET.

Control-transfer targets are truncated to the address width, so the space
behaves like an ``addr_bits``-wide machine.

Faults surface as exceptions inside the loop and are returned by ``run``
as values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Hashable, Protocol

from . import isa
from .vmem import PAGE_MASK, PAGE_SHIFT, PAGE_SIZE, Access, AccessFault, AddressSpace, Region

_U64 = isa.U64
_unpack_i32 = struct.Struct("<i").unpack_from
_unpack_u64 = struct.Struct("<Q").unpack_from
_pack_u64 = struct.Struct("<Q").pack_into

DEFAULT_FUEL = 1_000_000


class ExecFault(Exception):
    """Base for faults raised by the interpreter itself."""


class FuelExhausted(ExecFault):
    pass


class StackOverflow(ExecFault):
    pass


class IllegalInstruction(ExecFault):
    def __init__(self, pc: int, msg: str = "illegal instruction"):
        super().__init__(f"{msg} at {pc:#x}")
        self.pc = pc


class WrapperReentryOverflow(ExecFault):
    """A wrapper could not obtain a stack."""


Fault = (AccessFault, ExecFault)


class ExecContext(Protocol):
    def service(self, cpu: Cpu, number: int) -> int | None: ...

    def generation_at(self, pc: int) -> int | None: ...


def encrypt_ret(ret: int, key: int) -> int:
    if key == 0:
        raise ValueError("key must be nonzero")
    return (ret ^ key) & _U64


def decrypt_ret(value: int, key: int) -> int:
    if key == 0:
        raise ValueError("key must be nonzero")
    return (value ^ key) & _U64


@dataclass(eq=False)
class Cpu:
    space: AddressSpace
    context: ExecContext
    worker: Hashable
    stack: Region
    regs: list[int] = field(default_factory=lambda: [0] * isa.NGPR)
    pc: int = 0
    sp: int = 0
    frames: list = field(default_factory=list)      # wrapper bookkeeping (guards, stacks)
    stats: dict = field(default_factory=lambda: {"insns": 0, "calls": 0, "plt_transit": 0})
    trace: Callable[[dict], None] | None = None

    def __post_init__(self) -> None:
        self.addr_mask = self.space.limit - 1
        self.stack_lo = self.stack.base
        self.stack_hi = self.stack.end
        self.sp = self.stack_hi

    def switch_stack(self, lo: int, hi: int, sp: int) -> tuple[int, int, int]:
        old = (self.stack_lo, self.stack_hi, self.sp)
        self.stack_lo, self.stack_hi, self.sp = lo, hi, sp
        return old

    def can_fetch(self, target: int) -> bool:
        """Would a control transfer to ``target`` survive its first fetch?"""
        ent = self.space.pages.get((target & self.addr_mask) >> PAGE_SHIFT)
        return ent is not None and bool(ent[1] & 1)

    def stack_words(self) -> list[int]:
        out = []
        addr = self.sp
        while addr + 8 <= self.stack_hi:
            out.append(self.space.read_u64(addr))
            addr += 8
        return out

    def _emit(self, kind: str, target: int) -> None:
        self.trace({"gen": self.context.generation_at(self.pc), "pc": self.pc,
                    "kind": kind, "target": target})


def run(cpu: Cpu, entry: int, args=(), fuel: int = DEFAULT_FUEL,
        hook: Callable[[Cpu], None] | None = None):
    """Call ``entry`` with up to six arguments.

    Returns r0 on normal completion, otherwise the fault instance
    (AccessFault, FuelExhausted, StackOverflow, IllegalInstruction).
    Re-entrant: host services may call ``run`` on the same Cpu.
    """
    if len(args) > isa.ARG_REGS:
        raise ValueError("at most six register arguments")
    saved_pc, saved_regs = cpu.pc, list(cpu.regs)
    saved_stack = (cpu.stack_lo, cpu.stack_hi, cpu.sp)
    mark = len(cpu.frames)
    regs = cpu.regs
    for i in range(isa.NGPR):
        regs[i] = (args[i] & _U64) if i < len(args) else 0
    exit_addr = getattr(cpu.context, "exit_addr", 0)
    try:
        _push(cpu, exit_addr)
        cpu.pc = entry & cpu.addr_mask
        result = _loop(cpu, fuel, hook)
    except Fault as fault:
        unwind = getattr(cpu.context, "unwind", None)
        if unwind is not None:
            unwind(cpu, mark)
        result = fault
    cpu.regs[:] = saved_regs
    cpu.pc = saved_pc
    cpu.stack_lo, cpu.stack_hi, cpu.sp = saved_stack
    return result


def _push(cpu: Cpu, value: int) -> None:
    sp = cpu.sp - 8
    if sp < cpu.stack_lo:
        raise StackOverflow(f"push below stack at {sp:#x}")
    cpu.sp = sp
    _store(cpu.space, sp, value)


def _pop(cpu: Cpu) -> int:
    sp = cpu.sp
    if sp + 8 > cpu.stack_hi:
        raise StackOverflow(f"pop above stack at {sp:#x}")
    value = _load(cpu.space, sp)
    cpu.sp = sp + 8
    return value


def _load(space: AddressSpace, addr: int) -> int:
    off = addr & PAGE_MASK
    if off <= PAGE_SIZE - 8:
        ent = space.pages.get(addr >> PAGE_SHIFT) if 0 <= addr < space.limit else None
        if ent is None or not ent[1] & 4:
            raise AccessFault(addr, Access.READ, "unmapped" if ent is None else "permission")
        return _unpack_u64(ent[2], off)[0]
    return int.from_bytes(space.access(addr, Access.READ, 8), "little")


def _store(space: AddressSpace, addr: int, value: int) -> None:
    off = addr & PAGE_MASK
    if off <= PAGE_SIZE - 8:
        ent = space.pages.get(addr >> PAGE_SHIFT) if 0 <= addr < space.limit else None
        if ent is None or not ent[1] & 2:
            raise AccessFault(addr, Access.WRITE, "unmapped" if ent is None else "permission")
        _pack_u64(ent[2], off, value & _U64)
        return
    space.access(addr, Access.WRITE, 8, (value & _U64).to_bytes(8, "little"))


def _loop(cpu: Cpu, fuel: int, hook) -> int:
    space = cpu.space
    pages = space.pages
    regs = cpu.regs
    mask = cpu.addr_mask
    stats = cpu.stats
    length = isa.LENGTH
    trace = cpu.trace
    executed = 0
    try:
        while True:
            if executed >= fuel:
                raise FuelExhausted(f"fuel {fuel} exhausted at {cpu.pc:#x}")
            if hook is not None:
                hook(cpu)
            pc = cpu.pc
            ent = pages.get(pc >> PAGE_SHIFT)
            if ent is None or not ent[1] & 1:
                raise AccessFault(pc, Access.FETCH, "unmapped" if ent is None else "permission")
            buf = ent[2]
            off = pc & PAGE_MASK
            op = buf[off]
            n = length.get(op)
            if n is None:
                raise IllegalInstruction(pc, f"bad opcode {op:#04x}")
            if off + n > PAGE_SIZE:
                buf = space.access(pc, Access.FETCH, n)
                off = 0
            executed += 1
            nxt = pc + n

            if op == isa.MOV or op == isa.ADD or op == isa.SUB or op == isa.XOR:
                x = buf[off + 1]
                dst, src = x >> 4, x & 0xF
                if (dst >= isa.NGPR and dst != isa.SP) or (src >= isa.NGPR and src != isa.SP):
                    raise IllegalInstruction(pc, "bad register")
                b = cpu.sp if src == isa.SP else regs[src]
                if op == isa.MOV:
                    v = b
                else:
                    a = cpu.sp if dst == isa.SP else regs[dst]
                    v = (a + b) if op == isa.ADD else (a - b) if op == isa.SUB else (a ^ b)
                v &= _U64
                if dst == isa.SP:
                    cpu.sp = v
                else:
                    regs[dst] = v
                cpu.pc = nxt
            elif op == isa.LD_GOT or op == isa.LEA:
                r = buf[off + 1]
                if r >= isa.NGPR:
                    raise IllegalInstruction(pc, "bad register")
                addr = (nxt + _unpack_i32(buf, off + 2)[0]) & _U64
                regs[r] = _load(space, addr) if op == isa.LD_GOT else addr
                cpu.pc = nxt
            elif op == isa.XSP:
                r = buf[off + 1]
                if r >= isa.NGPR:
                    raise IllegalInstruction(pc, "bad register")
                sp = cpu.sp
                if sp + 8 > cpu.stack_hi or sp < cpu.stack_lo:
                    raise StackOverflow(f"xsp outside stack at {sp:#x}")
                _store(space, sp, _load(space, sp) ^ regs[r])
                cpu.pc = nxt
            elif op == isa.CALL or op == isa.JMP:
                target = (nxt + _unpack_i32(buf, off + 1)[0]) & mask
                if op == isa.CALL:
                    _push(cpu, nxt)
                    stats["calls"] += 1
                if trace is not None:
                    cpu._emit("call" if op == isa.CALL else "jmp", target)
                cpu.pc = target
            elif op == isa.IND:
                sel = buf[off + 1]
                if sel != isa.SEL_CALL and sel != isa.SEL_JMP:
                    raise IllegalInstruction(pc, "bad indirect selector")
                slot = (nxt + _unpack_i32(buf, off + 2)[0]) & _U64
                target = _load(space, slot) & mask
                if sel == isa.SEL_CALL:
                    _push(cpu, nxt)
                    stats["calls"] += 1
                else:
                    stats["plt_transit"] += 1
                if trace is not None:
                    cpu._emit("callind" if sel == isa.SEL_CALL else "jmpind", target)
                cpu.pc = target
            elif op == isa.RET:
                target = _pop(cpu) & mask
                if trace is not None:
                    cpu._emit("ret", target)
                cpu.pc = target
            elif op == isa.SYSRET:
                number = _unpack_i32(buf, off + 1)[0]
                cpu.pc = nxt
                res = cpu.context.service(cpu, number)
                if res is not None:
                    regs[0] = res & _U64
            elif op == isa.PUSH or op == isa.POP:
                r = buf[off + 1]
                if r >= isa.NGPR and r != isa.SP:
                    raise IllegalInstruction(pc, "bad register")
                if op == isa.PUSH:
                    _push(cpu, cpu.sp if r == isa.SP else regs[r])
                else:
                    v = _pop(cpu)
                    if r == isa.SP:
                        cpu.sp = v
                    else:
                        regs[r] = v
                cpu.pc = nxt
            elif op == isa.MOVI:
                r = buf[off + 1]
                if r >= isa.NGPR:
                    raise IllegalInstruction(pc, "bad register")
                regs[r] = _unpack_u64(buf, off + 2)[0]
                cpu.pc = nxt
            elif op == isa.ADDI:
                r = buf[off + 1]
                imm = _unpack_i32(buf, off + 2)[0]
                if r == isa.SP:
                    cpu.sp = (cpu.sp + imm) & _U64
                elif r < isa.NGPR:
                    regs[r] = (regs[r] + imm) & _U64
                else:
                    raise IllegalInstruction(pc, "bad register")
                cpu.pc = nxt
            elif op == isa.LDM or op == isa.STM:
                x = buf[off + 1]
                a, b = x >> 4, x & 0xF
                disp = _unpack_i32(buf, off + 2)[0]
                if (a >= isa.NGPR and a != isa.SP) or (b >= isa.NGPR and b != isa.SP):
                    raise IllegalInstruction(pc, "bad register")
                if op == isa.LDM:
                    base = cpu.sp if b == isa.SP else regs[b]
                    v = _load(space, (base + disp) & _U64)
                    if a == isa.SP:
                        cpu.sp = v
                    else:
                        regs[a] = v
                else:
                    base = cpu.sp if a == isa.SP else regs[a]
                    _store(space, (base + disp) & _U64, cpu.sp if b == isa.SP else regs[b])
                cpu.pc = nxt
            elif op == isa.JZ or op == isa.JNZ:
                r = buf[off + 1]
                if r >= isa.NGPR:
                    raise IllegalInstruction(pc, "bad register")
                taken = (regs[r] == 0) == (op == isa.JZ)
                if taken:
                    target = (nxt + _unpack_i32(buf, off + 2)[0]) & mask
                    if trace is not None:
                        cpu._emit("jz" if op == isa.JZ else "jnz", target)
                    cpu.pc = target
                else:
                    cpu.pc = nxt
            elif op == isa.NOP:
                cpu.pc = nxt
            elif op == isa.HALT:
                return regs[0]
            else:
                raise IllegalInstruction(pc)
    finally:
        stats["insns"] += executed
