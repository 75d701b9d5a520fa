import pytest
from hypothesis import given, strategies as st

from rerand import isa
from rerand.asm import AsmError, assemble
from rerand.modfmt import Binding, Kind, RelocKind

regs = st.integers(0, isa.NGPR - 1)
i32 = st.integers(-(1 << 31), (1 << 31) - 1)

encodings = st.one_of(
    i32.map(isa.enc_call), i32.map(isa.enc_jmp), i32.map(isa.enc_callind),
    i32.map(isa.enc_jmpind), st.tuples(regs, i32).map(lambda a: isa.enc_lea(*a)),
    st.tuples(regs, i32).map(lambda a: isa.enc_ldgot(*a)),
    st.tuples(regs, st.integers(0, isa.U64)).map(lambda a: isa.enc_movi(*a)),
    st.tuples(regs, regs).map(lambda a: isa.enc_rr(isa.ADD, *a)),
    st.tuples(regs, regs, i32).map(lambda a: isa.enc_ldm(*a)),
    regs.map(lambda r: isa.enc_r(isa.PUSH, r)),
    st.sampled_from([bytes((isa.RET,)), bytes((isa.NOP,)), bytes((isa.HALT,))]),
)


@given(encodings)
def test_decode_length_matches_encoding(code):
    insn = isa.decode(code)
    assert insn.length == len(code) == isa.LENGTH[code[0]]


@given(st.lists(encodings, max_size=20))
def test_linear_decode_recovers_boundaries(codes):
    buf = b"".join(codes)
    pos, starts = 0, []
    while pos < len(buf):
        starts.append(pos)
        pos += isa.decode(buf, pos).length
    expect, off = [], 0
    for c in codes:
        expect.append(off)
        off += len(c)
    assert starts == expect


def test_direct_form_is_one_byte_shorter():
    assert len(isa.enc_callind()) - len(isa.enc_call()) == 1
    assert len(isa.enc_jmpind()) - len(isa.enc_jmp()) == 1


def test_decode_errors():
    with pytest.raises(isa.DecodeError):
        isa.decode(b"\x00")
    with pytest.raises(isa.DecodeError):
        isa.decode(isa.enc_call()[:3])
    with pytest.raises(isa.DecodeError):
        isa.decode(bytes((isa.IND, 0x99, 0, 0, 0, 0)))


def test_terminal_kinds():
    assert isa.terminal_kind(b"\xc3", 0) is isa.Terminal.RET
    assert isa.terminal_kind(isa.enc_jmpind(), 0) is isa.Terminal.JMP_IND
    assert isa.terminal_kind(isa.enc_callind(), 0) is isa.Terminal.CALL_IND
    assert isa.terminal_kind(isa.enc_call(), 0) is None


def test_assemble_minimal():
    img = assemble(".module m\n.text\n.global f\nf:\n  prologue\n  epilogue\n")
    assert img.name == "m" and img.exports == ("f",)
    assert img.symbol("f").binding is Binding.EXPORTED
    assert img.symbol("__key").binding is Binding.IMPORTED
    kinds = [r.kind for r in img.relocations]
    assert kinds == [RelocKind.GOT_KEY, RelocKind.GOT_KEY]
    assert img.sections[0].data[-1] == isa.RET


def test_assemble_got_locality():
    img = assemble("""
.text
f:  callind @g
    callind @printk
    ldgot @d, r1
g:  ret
.data
d:  .quad @g+8
""")
    kinds = {img.symbols[r.target].name: r.kind for r in img.relocations}
    assert kinds == {"g": RelocKind.ABS64, "printk": RelocKind.GOT_FIXED, "d": RelocKind.GOT_LOCAL}
    [abs64] = [r for r in img.relocations if r.kind is RelocKind.ABS64]
    assert abs64.addend == 8
    assert img.symbol("printk").binding is Binding.IMPORTED


def test_assemble_sections_and_directives():
    img = assemble("""
.rodata
msg: .ascii "hi"
.fixed
stub: ret
.data
.byte 1, 2, 3
.align 8
.zero 4
""")
    kinds = [s.kind for s in img.sections]
    assert kinds == [Kind.RODATA, Kind.FIXED_TEXT, Kind.DATA]
    assert img.sections[0].data == b"hi"
    assert img.sections[2].data == b"\x01\x02\x03" + bytes(5) + bytes(4)


@pytest.mark.parametrize("src, line", [
    (".text\n  bogus r1\n", 2),
    (".text\nf:\nf:\n", 3),
    (".text\n  mov r1, r99\n", 2),
    (".text\n\n  ld r1, r2\n", 3),
    (".wat\n", 1),
])
def test_assembler_errors_carry_line(src, line):
    with pytest.raises(AsmError) as exc:
        assemble(src)
    assert exc.value.lineno == line


def test_undefined_global_rejected():
    with pytest.raises(ValueError):
        assemble(".text\n.global nope\nf: ret\n")
