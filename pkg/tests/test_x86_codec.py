import pytest

from app.models.errors import NotInSubset, OperandRange, Truncated
from app.models.x86 import Field, ImmOp, MemOp, Mnemonic, Reg, RegOp, RelOp
from app.services.x86_codec import Asm, X86Codec, decode, encode

M = Mnemonic


def test_decode_wrpkru():
    instr = decode(b"\x0f\x01\xef")
    assert instr.mnemonic is M.WRPKRU
    assert instr.total_length == 3
    assert instr.extent(Field.OPCODE) == (0, 3)


def test_decode_or_memory_immediate_fields():
    instr = decode(bytes.fromhex("810f01ef0000"))
    assert instr.mnemonic is M.OR
    assert instr.operands[0] == MemOp(base=Reg.RDI, width=32)
    assert instr.operands[1] == ImmOp(0xEF01, 4)
    assert instr.extent(Field.OPCODE) == (0, 1)
    assert instr.extent(Field.MODRM) == (1, 2)
    assert instr.extent(Field.IMMEDIATE) == (2, 6)


def test_decode_rip_relative_load():
    instr = decode(bytes.fromhex("8b050f01ef00"))
    mem = instr.memory_operand()
    assert mem.rip and mem.disp == 0x00EF010F
    assert instr.is_pc_relative()
    assert instr.extent(Field.DISPLACEMENT) == (2, 6)


def test_decode_sib_with_displacement():
    # mov eax, [rbx + rcx*4 + 0x10]
    instr = decode(bytes.fromhex("8b448b10"))
    mem = instr.memory_operand()
    assert (mem.base, mem.index, mem.scale, mem.disp) == (Reg.RBX, Reg.RCX, 4, 0x10)
    assert instr.extent(Field.SIB) == (2, 3)


def test_decode_mov_imm64_and_rex_registers():
    instr = decode(bytes.fromhex("48b88877665544332211"))
    assert instr.operands == (RegOp(Reg.RAX, 64), ImmOp(0x1122334455667788, 8))
    instr = decode(bytes.fromhex("41b80f000000"))
    assert instr.operands[0] == RegOp(Reg.R8, 32)


def test_decode_branches():
    assert decode(b"\xeb\xfe").relative_operand().disp == -2
    jne = decode(bytes.fromhex("0f8510000000"))
    assert jne.mnemonic is M.JNE and jne.relative_operand().size == 4
    assert decode(bytes.fromhex("e800000000")).mnemonic is M.CALL


def test_decode_xrstor_and_bt():
    xrstor = decode(b"\x0f\xae\x2f")
    assert xrstor.mnemonic is M.XRSTOR
    assert xrstor.memory_operand().base == Reg.RDI
    bt = decode(bytes.fromhex("0fbae009"))
    assert bt.mnemonic is M.BT and bt.operands[1] == ImmOp(9, 1)


@pytest.mark.parametrize("data", [
    b"\x62\x00", b"\x0f\x01\xd0", b"\x0f\xae\xe8", b"\x40\x90", b"\xc7\xc8\x00\x00\x00\x00",
    bytes.fromhex("8b446000"),
])
def test_decode_rejects_bytes_outside_subset(data):
    with pytest.raises(NotInSubset):
        decode(data)


def test_decode_truncated():
    with pytest.raises(Truncated):
        decode(b"\x81")
    with pytest.raises(Truncated):
        decode(b"\x90", 5)
    assert X86Codec.try_decode(b"\x81") is None


def test_encode_is_inverse_of_decode_for_builders():
    instrs = [
        Asm.mov(Reg.RAX, Asm.mem(Reg.RSI, 0x00EF010F)),
        Asm.mov(Asm.mem(Reg.R12, 8), RegOp(Reg.R9, 64), 64),
        Asm.mov(Reg.RBX, 0x21_0000_0000, 64),
        Asm.mov(Reg.RSI, -0x10, 64),
        Asm.mov_imm32(Reg.R15, 0x0F01EF00),
        Asm.mov8(Reg.RAX, 0x0F),
        Asm.mov8(Reg.RSI, 0x0F),
        Asm.mov8(Reg.RAX, 0x12, high8=True),
        Asm.add(Reg.RBX, 0x00EF010F),
        Asm.sub(Asm.mem(Reg.RBP, -8), 3, 64),
        Asm.xor(RegOp(Reg.R10), RegOp(Reg.R11)),
        Asm.cmp(Reg.RAX, Asm.mem(Reg.RSP, 0x20)),
        Asm.alu_acc(M.CMP, 0x3),
        Asm.alu_imm32(M.OR, Asm.mem(Reg.R13, 0), 1),
        Asm.bt(Reg.RAX, 9),
        Asm.push(Reg.R11), Asm.pop(Reg.RBX),
        Asm.jmp(-5), Asm.jcc(M.JE, 7, size=1), Asm.call(0x100),
        Asm.call_indirect(Reg.RBX),
        Asm.xrstor(Asm.mem(Reg.RDI)),
        Asm.xrstor(Asm.mem(Reg.RBX, index=Reg.RCX, scale=8)),
        Asm.mov(Reg.RAX, Asm.mem(disp=0x1234, rip=True)),
        Asm.mov(Reg.RAX, Asm.mem(disp=0x600000)),
        Asm.nop(), Asm.ret(), Asm.int3(), Asm.syscall(), Asm.wrpkru(),
        Asm.pushfq(), Asm.popfq(),
    ]
    for instr in instrs:
        data = encode(instr)
        assert len(data) == instr.total_length
        again = decode(data)
        assert encode(again) == data
        assert again.mnemonic is instr.mnemonic


def test_builder_short_immediate_form():
    assert encode(Asm.add(Reg.RSI, 1)) == bytes.fromhex("83c601")
    assert encode(Asm.add(Reg.RBX, 0x00EF010F)) == bytes.fromhex("81c30f01ef00")
    assert encode(Asm.or_(Asm.mem(Reg.RDI), 0xEF01)) == bytes.fromhex("810f01ef0000")


def test_builder_operand_range():
    with pytest.raises(OperandRange):
        Asm.add(Reg.RAX, 1 << 40, 64)
    with pytest.raises(OperandRange):
        Asm.mov(Asm.mem(Reg.RAX), 1 << 40, 64)
    with pytest.raises(OperandRange):
        encode(Asm.jmp(0).with_operands(RelOp(300, 1)))


def test_sweep_lists_instruction_starts():
    code = Asm.assemble([Asm.xor(RegOp(Reg.RCX), RegOp(Reg.RCX)), Asm.mov_imm32(Reg.RAX, 3),
                         Asm.wrpkru(), Asm.ret()])
    assert [pos for pos, _ in X86Codec.sweep(code)] == [0, 2, 7, 10]
    with pytest.raises(NotInSubset):
        X86Codec.sweep(code + b"\x62")


def test_lengths_agree_with_capstone():
    capstone = pytest.importorskip("capstone")
    md = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_64)
    samples = [
        bytes.fromhex("810f01ef0000"), bytes.fromhex("8b050f01ef00"),
        bytes.fromhex("8b448b10"), bytes.fromhex("48b88877665544332211"),
        bytes.fromhex("0fbae009"), b"\x0f\xae\x2f", bytes.fromhex("41b80f000000"),
        bytes.fromhex("3d03000000"), bytes.fromhex("0f8510000000"),
    ]
    for data in samples:
        ours = decode(data).total_length
        theirs = next(md.disasm(data, 0)).size
        assert ours == theirs, data.hex()
