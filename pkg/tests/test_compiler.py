import io
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from naivetpu import golden, runner, sim
from naivetpu.arch import preset
from naivetpu.compiler import (CompileError, Dram, OnChip, Conv2D, FullyConnected, LayerWeights, MaxPool2D,
                               NetworkDesc, NetworkError, NetworkParseError, PLACEMENT_DRAM,
                               PLACEMENT_ONCHIP, ShapeError, TilingError, WeightsError, compile,
                               count_params, format_network, infer_shapes, lenet5, lower_conv,
                               lower_fc, lower_pool, merge_runs, parse_network, plan_memory,
                               read_weights, vgg16, write_weights)
from naivetpu.compiler.tiling import bias_digits, build_klayout, kmatrix
from naivetpu.isa import (Activate, MatMulConv, ReadHostMemory, ReadWeights, WriteHostMemory,
                          encode_program)

CFG = preset("naivetpu")


def params_oracle(layers):
    """Independent count: weights + biases straight from layer geometry."""
    total = 0
    for kind, *dims in layers:
        if kind == "conv":
            cin, cout, k = dims
            total += cout * cin * k * k + cout
        else:
            fin, fout = dims
            total += fin * fout + fout
    return total


class TestNetwork:
    def test_lenet_shapes(self):
        shapes = infer_shapes(lenet5())
        assert shapes[0] == (6, 28, 28)
        assert shapes[1] == (6, 14, 14)
        assert shapes[3] == (16, 5, 5)
        assert shapes[-1] == (10, 1, 1)

    def test_vgg_shapes(self):
        shapes = infer_shapes(vgg16())
        assert shapes[0] == (64, 224, 224)
        assert shapes[2] == (64, 112, 112)
        assert (512, 7, 7) in shapes
        assert shapes[-1] == (1000, 1, 1)

    def test_param_counts(self):
        lenet = [("conv", 1, 6, 5), ("conv", 6, 16, 5), ("fc", 400, 120), ("fc", 120, 84), ("fc", 84, 10)]
        assert count_params(lenet5())[1] == params_oracle(lenet) == 61706
        chans = [3, 64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]
        vgg = [("conv", a, b, 3) for a, b in zip(chans, chans[1:])]
        vgg += [("fc", 512 * 49, 4096), ("fc", 4096, 4096), ("fc", 4096, 1000)]
        assert count_params(vgg16())[1] == params_oracle(vgg) == 138357544

    def test_empty_network(self):
        net = NetworkDesc("empty", (3, 4, 4), ())
        assert count_params(net) == ([], 0)
        assert infer_shapes(net) == []

    def test_format_roundtrip(self):
        for net in (lenet5(), vgg16(32, 10, 256)):
            assert parse_network(format_network(net), net.name) == net

    def test_comments_and_defaults(self):
        net = parse_network("# tiny\ninput 2 5 5\nconv out=3 k=3  # trailing\npool w=2\nfc out=4\n")
        conv, pool, fc = net.layers
        assert (conv.stride, conv.pad, conv.act, conv.rq.multiplier, conv.rq.shift) == (1, 0, "identity", 1, 0)
        assert pool.stride == 2
        assert fc.in_dim == 3 * 1 * 1 * 4 // 4

    @pytest.mark.parametrize("text,line", [
        ("conv out=3 k=3\n", 1),
        ("input 1 8 8\nconv out=3\n", 2),
        ("input 1 8 8\n\nconv out=3 k=3 bogus=1\n", 3),
        ("input 1 8 8\nconv out=3 k=3 rq=x\n", 2),
        ("input 1 8 8\nconv out=3 k=9\n", 2),
        ("input 1 8 8\nwarp out=3\n", 2),
        ("input 1 8 8\ninput 1 8 8\n", 2),
        ("input 1 8 8\nconv out=3 k=3 act=tanh\n", 2),
        ("input 1 8 8\nconv out=3 k=3 rq=0:1\n", 2),
        ("name a b\n", 1),
        ("", 0),
    ])
    def test_parse_errors_carry_line(self, text, line):
        with pytest.raises(NetworkParseError) as ei:
            parse_network(text)
        assert ei.value.line == line

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="layer 1"):
            infer_shapes(NetworkDesc("bad", (1, 8, 8), (Conv2D(1, 4, 3, 3), Conv2D(5, 4, 3, 3))))
        with pytest.raises(NetworkError):
            Conv2D(1, 4, 0, 3)


class TestWeightsFile:
    def test_roundtrip(self, tmp_path):
        net = lenet5()
        w = golden.random_weights(net, 3)
        p = tmp_path / "w.bin"
        write_weights(w, p)
        assert read_weights(p, net) == w
        buf = io.BytesIO()
        write_weights(w, buf)
        assert read_weights(buf.getvalue(), net) == w

    def test_bad_magic(self):
        with pytest.raises(WeightsError, match="magic"):
            read_weights(b"NOTWGTS" + bytes(16), lenet5())

    def test_truncated(self):
        buf = io.BytesIO()
        write_weights(golden.random_weights(lenet5(), 0), buf)
        with pytest.raises(WeightsError):
            read_weights(buf.getvalue()[:-3], lenet5())

    def test_missing_layer(self):
        w = golden.random_weights(lenet5(), 0)
        del w[4]
        with pytest.raises(WeightsError):
            compile(lenet5(), CFG, w)

    def test_wrong_shape(self):
        w = golden.random_weights(lenet5(), 0)
        w[0] = LayerWeights(np.zeros((6, 1, 3, 3), np.int8), np.zeros(6, np.int32))
        with pytest.raises(WeightsError):
            compile(lenet5(), CFG, w)


class TestTiling:
    def test_pointwise_single_chunk(self):
        lo = lower_conv(Conv2D(32, 32, 1, 1), (32, 4, 4), CFG)
        mms = [i for i in lo.instructions if isinstance(i, MatMulConv)]
        assert (lo.k_chunks, lo.out_chunks) == (1, 1)
        assert [m.accumulate for m in mms] == [False]
        assert mms[0].num_rows == 16

    def test_k75_three_chunks(self):
        lo = lower_conv(Conv2D(3, 8, 5, 5), (3, 8, 8), CFG)
        assert lo.k_chunks == 3 == math.ceil(75 / 32)
        mms = [i for i in lo.instructions if isinstance(i, MatMulConv)]
        assert [m.accumulate for m in mms] == [False, True, True]

    def test_slots_never_straddle(self):
        lay = build_klayout(3, 5, 5, CFG)
        assert lay.used == (30, 30, 15)
        for s in lay.slots:
            assert s.lane + s.width <= lay.lanes

    def test_fc_400_120(self):
        lo = lower_fc(FullyConnected(400, 120), CFG)
        assert (lo.k_chunks, lo.out_chunks) == (13, 4)
        mms = [i for i in lo.instructions if isinstance(i, MatMulConv)]
        assert len(mms) == 52 and all(m.num_rows == 1 for m in mms)
        assert sum(isinstance(i, ReadWeights) for i in lo.instructions) == 52

    def test_fc_bias_lanes_fit_tail(self):
        lw = LayerWeights(np.ones((120, 400), np.int8), np.full(120, 1000, np.int32))
        lo = lower_fc(FullyConnected(400, 120), CFG, weights=lw)
        assert lo.k_chunks == 13
        assert lo.plan.klayout.bias_lanes == ((12, 16, 1), (12, 17, 127))

    def test_fc_32_single_matmul(self):
        lo = lower_fc(FullyConnected(32, 32), CFG)
        mms = [i for i in lo.instructions if isinstance(i, MatMulConv)]
        assert len(mms) == 1 and mms[0].num_rows == 1 and not mms[0].accumulate

    def test_pool_fragment(self):
        lo = lower_pool(MaxPool2D(2, 2), (6, 28, 28), CFG)
        kinds = [type(i).__name__ for i in lo.instructions]
        assert kinds[:4] == ["ReadWeights", "ReadHostMemory", "MatMulConv", "Activate"]
        act = next(i for i in lo.instructions if isinstance(i, Activate))
        # rows arrive window-major, so a 2x2 window reduces 4 consecutive rows
        assert act.func.window == 4 and act.func.stride == 4
        assert act.num_rows == 6 // 6 * 28 * 28

    @given(st.lists(st.integers(-2**24, 2**24), min_size=1, max_size=40))
    @settings(max_examples=300)
    def test_bias_digits_reconstruct(self, bias):
        consts, digits = bias_digits(bias)
        assert np.array_equal(consts @ digits.astype(np.int64), np.array(bias, np.int64))

    def test_bias_digits(self):
        consts, digits = bias_digits([0, 1, 126, 127, -1, 1000])
        assert list(consts) == [1, 127]
        assert (consts @ digits.astype(np.int64)).tolist() == [0, 1, 126, 127, -1, 1000]
        assert bias_digits([0, 0])[0].size == 0

    def test_kmatrix_matches_im2col_product(self):
        rng = np.random.default_rng(5)
        w = rng.integers(-128, 128, (5, 3, 3, 3)).astype(np.int8)
        lay = build_klayout(3, 3, 3, CFG)
        mat = kmatrix(lay, w, np.zeros(5, np.int32)).astype(np.int64)
        patch = rng.integers(-128, 128, (3, 3, 3))
        row = np.zeros((lay.n_chunks, lay.lanes), np.int64)
        for s in lay.slots:
            row[s.chunk, s.lane:s.lane + s.width] = patch[:, s.ky, s.kx]
        got = np.einsum("kl,klo->o", row, mat)
        assert np.array_equal(got, np.einsum("chw,ochw->o", patch, w.astype(np.int64)))

    def test_bias_lane_overflow(self):
        with pytest.raises(TilingError, match="bias lanes"):
            bias_digits([2**31 - 1, 0])


class TestMergeRuns:
    def test_contiguous(self):
        rows = np.arange(6)
        assert merge_runs(rows, 100 + 4 * rows, 4) == [(0, 100, 6)]

    def test_gap_splits(self):
        rows = np.arange(4)
        addrs = np.array([0, 4, 20, 24])
        assert merge_runs(rows, addrs, 4) == [(0, 0, 2), (2, 20, 2)]

    def test_stride_mismatch(self):
        rows = np.arange(3)
        runs = merge_runs(rows, np.array([0, 8, 16]), 4)
        assert len(runs) == 3

    @given(st.lists(st.integers(0, 50), unique=True, min_size=1, max_size=30), st.integers(1, 8))
    def test_covers_every_row_once(self, addr_slots, width):
        rows = np.arange(len(addr_slots))
        addrs = np.array(addr_slots) * width
        runs = merge_runs(rows, addrs, width)
        seen = {}
        for r, a, n in runs:
            for j in range(n):
                seen[r + j] = a + j * width
        assert seen == dict(zip(rows.tolist(), addrs.tolist()))


class TestMemoryPlan:
    def test_lenet_onchip(self):
        mm = plan_memory(lenet5(), CFG, golden.random_weights(lenet5(), 0))
        assert mm.placement == PLACEMENT_ONCHIP
        assert mm.weight_bits == 493648
        assert mm.weight_bits + mm.peak_activation_bits <= CFG.onchip_budget_bits
        assert mm.onchip_bits_used <= CFG.onchip_budget_bits
        assert all(isinstance(l.weight, OnChip) for l in mm.layers if l.kind != "pool")

    def test_vgg_dram(self):
        mm = plan_memory(vgg16(), CFG)
        assert mm.placement == PLACEMENT_DRAM
        assert mm.weight_bits > CFG.onchip_budget_bits
        assert mm.dram_bits_used + mm.host_bits_used <= CFG.dram_capacity_bits
        assert all(isinstance(l.weight, Dram) for l in mm.layers if l.kind != "pool")
        assert any(l.streamed for l in mm.layers)

    @pytest.mark.parametrize("net", [lenet5(), vgg16(32, 10, 256), vgg16()], ids=["lenet", "vgg32", "vgg"])
    def test_regions_disjoint(self, net):
        mm = plan_memory(net, CFG)
        assert mm.overlapping() == []
        for r in mm.regions():
            limit = {"ub": CFG.ub_rows, "acc": CFG.acc_rows}.get(r.space)
            if limit is not None:
                assert 0 <= r.start < r.stop <= limit

    def test_empty_network(self):
        mm = plan_memory(NetworkDesc("e", (2, 3, 3), ()), CFG)
        assert mm.onchip_bits_used == 0 and mm.weight_bits == 0

    def test_identity_program(self):
        cn = compile(NetworkDesc("e", (4, 3, 3), ()), CFG)
        kinds = [type(i) for i in cn.program]
        assert kinds == [ReadHostMemory, WriteHostMemory]
        x = golden.random_input((4, 3, 3), 2)
        out, _, _ = runner.run_compiled(cn, x)
        assert np.array_equal(out, x)

    def test_budget_shrink_forces_dram(self):
        net = lenet5()
        small = CFG.replace(onchip_budget_bits=400000)
        assert plan_memory(net, small).placement == PLACEMENT_DRAM

    def test_too_big_for_dram(self):
        with pytest.raises(CompileError):
            plan_memory(vgg16(), CFG.replace(dram_capacity_bits=10**6))

    @pytest.mark.parametrize("rows", [2048, 4096, 8192, 16384])
    def test_more_ub_never_shrinks_blocks(self, rows):
        net = lenet5()
        a = plan_memory(net, CFG.replace(ub_rows=rows))
        b = plan_memory(net, CFG.replace(ub_rows=rows * 2))
        for la, lb in zip(a.layers, b.layers):
            assert lb.block >= la.block
            assert lb.n_blocks <= la.n_blocks

    def test_tiny_ub_splits_blocks(self):
        cfg = CFG.replace(ub_rows=2048, acc_rows=256)
        net = lenet5()
        w = golden.random_weights(net, 1)
        mm = plan_memory(net, cfg, w)
        assert any(l.n_blocks > 1 for l in mm.layers)
        x = golden.random_input(net.input_shape, 0)
        assert runner.verify(net, w, x, cfg).ok


class TestLowering:
    def test_deterministic(self):
        net = lenet5()
        w = golden.random_weights(net, 0)
        a, b = compile(net, CFG, w), compile(net, CFG, w)
        assert encode_program(a.program) == encode_program(b.program)
        assert np.array_equal(a.dram_image, b.dram_image)

    def test_layer_instructions_partition(self):
        cn = compile(lenet5(), CFG, golden.random_weights(lenet5(), 0))
        total = sum(len(cn.layer_instructions(i)) for i in range(len(cn.net.layers)))
        assert total + (cn.spans[0][1] - cn.spans[0][0]) == len(cn.program)

    def test_pool_window_limit(self):
        net = NetworkDesc("p", (1, 16, 16), (MaxPool2D(16, 16),))
        with pytest.raises(CompileError):
            compile(net, CFG)

    def test_layer_outputs_match_golden(self):
        net = lenet5()
        w = golden.random_weights(net, 0)
        net = golden.calibrate(net, w, golden.random_input(net.input_shape, 9))
        cn = compile(net, CFG, w)
        x = golden.random_input(net.input_shape, 4)
        _, _, state = runner.run_compiled(cn, x)
        _, trace = golden.run_network_ref(net, x, w, trace=True)
        for (vals, known), ref in zip(cn.layer_outputs(state.host_mem), trace):
            assert known.any()
            assert np.array_equal(vals[known], ref.array()[known])


def random_layer(rng):
    kind = rng.choice(["conv", "conv", "fc", "pool"])
    c = int(rng.integers(1, 70))
    h = int(rng.integers(1, 12))
    w_ = int(rng.integers(1, 12))
    rq = golden.RequantParams(int(rng.choice([-1, 1]) * rng.integers(1, 200)), int(rng.integers(4, 20)))
    act = str(rng.choice(["relu", "identity"]))
    if kind == "conv":
        pad = int(rng.integers(0, 3))
        kh = int(rng.integers(1, min(h + 2 * pad, 5) + 1))
        kw = int(rng.integers(1, min(w_ + 2 * pad, 5) + 1))
        layer = Conv2D(c, int(rng.integers(1, 70)), kh, kw, stride=int(rng.integers(1, 3)), pad=pad,
                       rq=rq, act=act)
    elif kind == "fc":
        layer = FullyConnected(c * h * w_, int(rng.integers(1, 70)), rq=rq, act=act)
    else:
        win = int(rng.integers(1, min(h, w_, 4) + 1))
        layer = MaxPool2D(win, int(rng.integers(1, win + 1)))
    return NetworkDesc(kind, (c, h, w_), (layer,))


@pytest.mark.parametrize("seed", range(200))
def test_single_layer_equivalence(seed):
    rng = np.random.default_rng(1000 + seed)
    net = random_layer(rng)
    w = golden.random_weights(net, seed)
    x = golden.random_input(net.input_shape, seed)
    res = runner.verify(net, w, x, CFG)
    assert res.ok, str(res.divergence)


CONFIGS = [CFG, CFG.replace(mac_rows=8, mac_cols=8, ub_rows=2048, acc_rows=512),
           CFG.replace(mac_rows=8, mac_cols=16, ub_rows=4096, acc_rows=1024, weight_fifo_tiles=2),
           CFG.replace(mac_rows=16, mac_cols=16, ub_rows=1024, acc_rows=128, onchip_budget_bits=10**5)]


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10**6), st.sampled_from(range(len(CONFIGS))), st.sampled_from(["tiny", "small"]))
def test_fuzz_random_networks(seed, ci, size):
    cfg = CONFIGS[ci]
    net, w = golden.gen_random_network(seed, size)
    cn = compile(net, cfg, w)
    x = golden.random_input(net.input_shape, seed)
    res = runner.verify(net, w, x, cfg, compiled=cn)
    assert res.ok, str(res.divergence)
    assert res.report.total_cycles == (sum(res.report.cycles_by_opcode.values())
                                       + res.report.stall_cycles_weight_fifo)
