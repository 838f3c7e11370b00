"""Hypothesis strategies shared by the test modules."""

from hypothesis import strategies as st

from naivetpu import isa


def u(nbytes, lo=0):
    return st.integers(lo, (1 << (8 * nbytes)) - 1)


requant = st.builds(isa.RequantParams, st.integers(-(1 << 31), (1 << 31) - 1), st.integers(0, 31))
funcs = st.one_of(
    st.just(isa.IDENTITY),
    st.just(isa.RELU),
    st.builds(isa.MaxPool, st.integers(1, 255), st.integers(1, 255)),
)

instructions = st.one_of(
    st.builds(isa.ReadHostMemory, u(4), u(3), u(3, 1), u(2, 1)),
    st.builds(isa.ReadWeights, u(8), u(4, 1)),
    st.builds(isa.MatMulConv, u(3), u(3, 1), u(2), st.booleans(), st.booleans()),
    st.builds(isa.Activate, u(2), u(2, 1), funcs, requant, u(3)),
    st.builds(isa.WriteHostMemory, u(3), u(3, 1), u(4), u(2, 1)),
)

names = st.text(st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters="_-."),
                max_size=12)
programs = st.builds(isa.Program, st.lists(instructions, max_size=30), names, names)
