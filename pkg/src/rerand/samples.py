"""Sample modules written in the bundled assembly dialect.

``null``    one export returning its argument (the null-ioctl benchmark)
``arith``   a few small exports, including calls into the host
``driver``  internal calls, data, a pointer table and an update hook
``paged``   a module whose movable text spans an exact number of pages

``random_module`` generates a terminating module with an acyclic call
graph, used for differential testing of the patch optimizer.
"""

from __future__ import annotations

import random

from .asm import assemble
from .loader import PLT_STUB_LEN
from .modfmt import ModuleImage
from .vmem import PAGE_SIZE

NULL_SRC = """\
.module null
.text
.global null_ioctl
null_ioctl:
    prologue
    epilogue
"""

ARITH_SRC = """\
.module arith
.extern kmix, kadd
.text
.global add, sub, mix, mix_add
add:
    prologue
    add r0, r1
    epilogue
sub:
    prologue
    sub r0, r1
    epilogue
mix:
    prologue
    callind @kmix
    epilogue
mix_add:                    ; kadd(kmix(a), b)
    prologue
    push r1
    callind @kmix
    pop r1
    callind @kadd
    epilogue
"""

DRIVER_SRC = """\
.module driver
.extern kmix, printk
.hook on_move
.text
.global twice, sum_to, bump, table_entry, last_base, mix_twice
double:
    prologue
    add r0, r0
    epilogue
twice:
    prologue
    callind @double
    epilogue
sum_to:                     ; 1 + 2 + ... + n
    prologue
    mov r1, r0
    movi r0, 0
loop:
    jz r1, done
    add r0, r1
    addi r1, -1
    jmp loop
done:
    epilogue
bump:                       ; ++counter
    prologue
    lea @counter, r2
    ld r0, [r2+0]
    addi r0, 1
    st [r2+0], r0
    epilogue
table_entry:                ; table[0] - &double, zero while the table is rebased
    prologue
    lea @table, r2
    ld r0, [r2+0]
    ldgot @double, r1
    sub r0, r1
    epilogue
last_base:
    prologue
    lea @moved_to, r2
    ld r0, [r2+0]
    epilogue
mix_twice:
    prologue
    callind @kmix
    callind @double
    epilogue
on_move:                    ; (old_base, new_base)
    prologue
    lea @moved_to, r2
    st [r2+0], r1
    epilogue
.data
counter:
    .quad 0
moved_to:
    .quad 0
table:
    .quad @double
    .quad @sum_to
"""


def null_module() -> ModuleImage:
    return assemble(NULL_SRC)


def arith_module() -> ModuleImage:
    return assemble(ARITH_SRC)


def driver_module() -> ModuleImage:
    return assemble(DRIVER_SRC)


SOURCES = {"null": NULL_SRC, "arith": ARITH_SRC, "driver": DRIVER_SRC}


def sample(name: str) -> ModuleImage:
    if name.startswith("paged"):
        return paged_module(int(name[5:] or 4))
    return assemble(SOURCES[name])


def paged_source(text_pages: int, name: str | None = None) -> str:
    """A module whose movable text (code plus PLT) fills ``text_pages`` pages."""
    body = NULL_SRC.replace(".module null", f".module {name or f'paged{text_pages}'}")
    code_len = len(assemble(body).sections[0].data)
    pad = text_pages * PAGE_SIZE - code_len - PLT_STUB_LEN
    if pad < 0:
        raise ValueError("text_pages must be positive")
    return body + f"    .zero {pad}\n"


def paged_module(text_pages: int, name: str | None = None) -> ModuleImage:
    return assemble(paged_source(text_pages, name))


def random_source(rng: random.Random, nfuncs: int = 6, name: str = "gen",
                  fixed_funcs: int = 1) -> str:
    """Random module; function i only calls functions j > i, so every run ends.

    Each function takes r0 and returns a value in r0.  Call sites mix
    direct GOT calls, tail jumps, GOT loads and calls into the host.
    """
    lines = [f".module {name}", ".extern kmix, kadd", ".text"]
    names = [f"f{i}" for i in range(nfuncs)]
    fixed = [f"g{i}" for i in range(fixed_funcs)]
    lines.append(".global " + ", ".join(names))
    bodies: dict[str, list[str]] = {}
    for i, fn in enumerate(names):
        body = [f"{fn}:", "    prologue"]
        later = names[i + 1:] + fixed
        tail = None
        for _ in range(rng.randint(1, 4)):
            choice = rng.random()
            if later and choice < 0.35:
                body.append(f"    callind @{rng.choice(later)}")
            elif choice < 0.5:
                body.append("    callind @kmix")
            elif choice < 0.6:
                body += ["    mov r1, r0", "    callind @kadd"]
            elif names[i + 1:] and choice < 0.7:
                target = rng.choice(names[i + 1:])
                body += [f"    ldgot @{target}, r3", f"    lea @{target}, r4",
                         "    sub r3, r4", "    add r0, r3"]
            elif choice < 0.8:
                body += ["    lea @scratch, r2", "    ld r1, [r2+0]", "    add r0, r1",
                         "    st [r2+0], r0"]
            else:
                body.append(f"    addi r0, {rng.randint(-1000, 1000)}")
        if later and rng.random() < 0.3:
            tail = rng.choice(later)
        if tail is not None:
            body += ["    prologue", f"    jmpind @{tail}"]  # undo the key xor, then tail-jump
        else:
            body.append("    epilogue")
        bodies[fn] = body
    for fn in names:
        lines += bodies[fn]
    if fixed:
        lines.append(".fixed")
        for g in fixed:
            lines += [f"{g}:", f"    addi r0, {rng.randint(1, 99)}", "    ret"]
    lines += [".data", "scratch:", "    .quad 0"]
    return "\n".join(lines) + "\n"


def random_module(rng: random.Random, nfuncs: int = 6, name: str = "gen") -> ModuleImage:
    return assemble(random_source(rng, nfuncs, name))
