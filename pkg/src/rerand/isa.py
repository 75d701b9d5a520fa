"""Variable-length bytecode used by module code, wrappers and host stubs.

Every instruction starts with a one-byte opcode that fixes its length.
PC-relative forms keep their signed 32-bit displacement in the last four
bytes, measured from the end of the instruction, so a relocation site
(the displacement field) always satisfies ``target - (site + 4)``.

    op    len  form
    90    1    NOP
    C3    1    RET
    F4    1    HALT
    E8    5    CALL rel32
    E9    5    JMP rel32
    FF    6    FF 15 rel32 = CALL [rip+rel32]    FF 25 rel32 = JMP [rip+rel32]
    8D    6    LEA reg, rip+rel32
    8B    6    LD_GOT reg, [rip+rel32]
    74/75 6    JZ/JNZ reg, rel32
    89    2    MOV dst, src          (operand byte = dst << 4 | src)
    01    2    ADD dst, src
    29    2    SUB dst, src
    31    2    XOR dst, src
    B8    10   MOVI reg, imm64
    05    6    ADDI reg, simm32
    48    6    LDM dst, [src+disp32]
    49    6    STM [dst+disp32], src
    50    2    PUSH reg
    58    2    POP reg
    34    2    XSP reg              ([sp] ^= reg, used by prologue/epilogue)
    0F    5    SYSRET imm32         (host service call)

The indirect call/jump carries a selector byte, so the direct form is one
byte shorter than the indirect one.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

NOP = 0x90
RET = 0xC3
HALT = 0xF4
CALL = 0xE8
JMP = 0xE9
IND = 0xFF
SEL_CALL = 0x15
SEL_JMP = 0x25
LEA = 0x8D
LD_GOT = 0x8B
JZ = 0x74
JNZ = 0x75
MOV = 0x89
ADD = 0x01
SUB = 0x29
XOR = 0x31
MOVI = 0xB8
ADDI = 0x05
LDM = 0x48
STM = 0x49
PUSH = 0x50
POP = 0x58
XSP = 0x34
SYSRET = 0x0F

LENGTH = {
    NOP: 1, RET: 1, HALT: 1,
    CALL: 5, JMP: 5, SYSRET: 5,
    IND: 6, LEA: 6, LD_GOT: 6, JZ: 6, JNZ: 6, ADDI: 6, LDM: 6, STM: 6,
    MOV: 2, ADD: 2, SUB: 2, XOR: 2, PUSH: 2, POP: 2, XSP: 2,
    MOVI: 10,
}

MNEMONIC = {
    NOP: "nop", RET: "ret", HALT: "halt", CALL: "call", JMP: "jmp",
    LEA: "lea", LD_GOT: "ldgot", JZ: "jz", JNZ: "jnz", MOV: "mov", ADD: "add",
    SUB: "sub", XOR: "xor", MOVI: "movi", ADDI: "addi", LDM: "ld", STM: "st",
    PUSH: "push", POP: "pop", XSP: "xsp", SYSRET: "sys",
}

NGPR = 12
SP = 15
SCRATCH = 11
ARG_REGS = 6
U64 = 0xFFFF_FFFF_FFFF_FFFF

# host services reserved for wrapper glue
SVC_MR_START = 0
SVC_MR_FINISH = 1
SVC_STACK_GET = 2
SVC_STACK_PUT = 3
SVC_HOST_BASE = 16


class Terminal(enum.Enum):
    RET = "ret"
    JMP_IND = "jmp-indirect"
    CALL_IND = "call-indirect"


def valid_reg(r: int) -> bool:
    return r < NGPR or r == SP


@dataclass(frozen=True)
class Insn:
    op: int
    length: int
    a: int = 0      # register / selector
    b: int = 0      # second register
    imm: int = 0    # signed disp32 / imm

    @property
    def name(self) -> str:
        if self.op == IND:
            return "callind" if self.a == SEL_CALL else "jmpind"
        return MNEMONIC[self.op]


class DecodeError(Exception):
    pass


def decode(buf: bytes, pos: int = 0) -> Insn:
    """Decode one instruction at ``buf[pos]``; raises DecodeError if invalid."""
    if pos >= len(buf):
        raise DecodeError("truncated")
    op = buf[pos]
    n = LENGTH.get(op)
    if n is None:
        raise DecodeError(f"bad opcode {op:#04x}")
    if pos + n > len(buf):
        raise DecodeError("truncated")
    if n == 1:
        return Insn(op, 1)
    if op in (CALL, JMP, SYSRET):
        return Insn(op, 5, imm=struct.unpack_from("<i", buf, pos + 1)[0])
    if op == MOVI:
        r = buf[pos + 1]
        if not valid_reg(r):
            raise DecodeError("bad register")
        return Insn(op, 10, a=r, imm=struct.unpack_from("<Q", buf, pos + 2)[0])
    if op in (MOV, ADD, SUB, XOR, PUSH, POP, XSP):
        x = buf[pos + 1]
        if op in (PUSH, POP, XSP):
            if not valid_reg(x):
                raise DecodeError("bad register")
            return Insn(op, 2, a=x)
        dst, src = x >> 4, x & 0xF
        if not (valid_reg(dst) and valid_reg(src)):
            raise DecodeError("bad register")
        return Insn(op, 2, a=dst, b=src)
    x = buf[pos + 1]
    imm = struct.unpack_from("<i", buf, pos + 2)[0]
    if op == IND:
        if x not in (SEL_CALL, SEL_JMP):
            raise DecodeError("bad indirect selector")
        return Insn(op, 6, a=x, imm=imm)
    if op in (LDM, STM):
        dst, src = x >> 4, x & 0xF
        if not (valid_reg(dst) and valid_reg(src)):
            raise DecodeError("bad register")
        return Insn(op, 6, a=dst, b=src, imm=imm)
    if not valid_reg(x):
        raise DecodeError("bad register")
    return Insn(op, 6, a=x, imm=imm)


def terminal_kind(buf: bytes, pos: int) -> Terminal | None:
    op = buf[pos]
    if op == RET:
        return Terminal.RET
    if op == IND and pos + 6 <= len(buf):
        if buf[pos + 1] == SEL_JMP:
            return Terminal.JMP_IND
        if buf[pos + 1] == SEL_CALL:
            return Terminal.CALL_IND
    return None


def is_control(insn: Insn) -> bool:
    return insn.op in (RET, HALT, CALL, JMP, IND, JZ, JNZ)


# -- encoders -------------------------------------------------------------

def _rel(op: int, a: int, disp: int) -> bytes:
    return bytes((op, a)) + struct.pack("<i", disp)


def enc_call(disp: int = 0) -> bytes:
    return bytes((CALL,)) + struct.pack("<i", disp)


def enc_jmp(disp: int = 0) -> bytes:
    return bytes((JMP,)) + struct.pack("<i", disp)


def enc_callind(disp: int = 0) -> bytes:
    return _rel(IND, SEL_CALL, disp)


def enc_jmpind(disp: int = 0) -> bytes:
    return _rel(IND, SEL_JMP, disp)


def enc_lea(reg: int, disp: int = 0) -> bytes:
    return _rel(LEA, reg, disp)


def enc_ldgot(reg: int, disp: int = 0) -> bytes:
    return _rel(LD_GOT, reg, disp)


def enc_jz(reg: int, disp: int = 0) -> bytes:
    return _rel(JZ, reg, disp)


def enc_jnz(reg: int, disp: int = 0) -> bytes:
    return _rel(JNZ, reg, disp)


def enc_rr(op: int, dst: int, src: int) -> bytes:
    return bytes((op, dst << 4 | src))


def enc_r(op: int, reg: int) -> bytes:
    return bytes((op, reg))


def enc_movi(reg: int, value: int) -> bytes:
    return bytes((MOVI, reg)) + struct.pack("<Q", value & U64)


def enc_addi(reg: int, value: int) -> bytes:
    return _rel(ADDI, reg, value)


def enc_ldm(dst: int, src: int, disp: int = 0) -> bytes:
    return bytes((LDM, dst << 4 | src)) + struct.pack("<i", disp)


def enc_stm(dst: int, src: int, disp: int = 0) -> bytes:
    return bytes((STM, dst << 4 | src)) + struct.pack("<i", disp)


def enc_sys(service: int) -> bytes:
    return bytes((SYSRET,)) + struct.pack("<i", service)


def fits_rel32(disp: int) -> bool:
    return -(1 << 31) <= disp < (1 << 31)
