"""Model builders: block semantics, shape contracts, parameter accounting."""

import numpy as np
import pytest

from sparsect import ops
from sparsect.errors import GraphError, ParameterError
from sparsect.model import (AttentionGate, ModelConfig, ResConvBlock, build_model,
                            build_resattunet, build_unet, memory_report)
from sparsect.phantom import rng_from_seed
from sparsect.tensor import FP64, O0, PrecisionPolicy, Tensor, backward

SMALL = ModelConfig(encoder_filters=(4, 8, 16, 32, 64))

# frozen regression constants, from an independent per-layer counting formula
RESATT_DEFAULT_PARAMS = 7_941_413
UNET_DEFAULT_PARAMS = 7_765_409


def count_formula(f, cin=1, cout=1, k=3, attention=True):
    def conv(ci, co, kk):
        return co * ci * kk * kk + co

    def bn(c):
        return 2 * c

    def block(ci, co):
        return conv(ci, co, k) + bn(co) + conv(co, co, k) + bn(co)

    total = 0
    c = cin
    for co in f:
        total += block(c, co)
        c = co
    for i in range(len(f) - 2, -1, -1):
        fi, fb = f[i], f[i + 1]
        total += fb * fi * 4 + fi  # stride-2 transposed conv, 2x2 kernel
        if attention:
            total += conv(fi, fi, 1) + conv(fi, fi, 1) + conv(2 * fi, 1, 1)
        total += block(2 * fi, fi)
    return total + conv(f[0], cout, 1)


class TestResConvBlock:
    def test_zeroed_second_conv_degenerates_to_first(self):
        rng = np.random.default_rng(0)
        block = ResConvBlock("b", 3, 4, 3, 1, rng_from_seed(1), use_residual=True)
        block.conv2.w.master.data[...] = 0.0
        block.conv2.b.master.data[...] = 0.0
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        from sparsect.model import ForwardContext
        ctx = ForwardContext(mode="train")
        y = block.forward(x, ctx)
        y1 = ops.relu(block.bn1.forward(block.conv1.forward(x, ctx), ctx))
        np.testing.assert_allclose(y.data, y1.data, atol=1e-6)

    def test_shape_map(self):
        block = ResConvBlock("b", 32, 64, 3, 1, rng_from_seed(2), use_residual=True)
        from sparsect.model import ForwardContext
        x = Tensor(np.zeros((1, 32, 64, 64), np.float32))
        assert block.forward(x, ForwardContext(mode="train")).dims == (1, 64, 64, 64)

    def test_skip_gradient_matches_single_conv_net(self):
        """With the second conv zeroed, the loss gradient w.r.t. the first
        conv's weights equals that of the conv->BN->ReLU network alone."""
        from sparsect.model import ForwardContext
        rng = np.random.default_rng(3)
        x64 = rng.standard_normal((1, 2, 6, 6))
        target = rng.standard_normal((1, 3, 6, 6))

        def run(with_block):
            block = ResConvBlock("b", 2, 3, 3, 1, rng_from_seed(7), use_residual=True)
            block.conv2.w.master.data[...] = 0.0
            block.conv2.b.master.data[...] = 0.0
            for p in block.parameters():
                p.compute = Tensor(p.master.data.astype(np.float64), dtype=FP64,
                                   requires_grad=True)
            ctx = ForwardContext(mode="train")
            x = Tensor(x64, dtype=FP64)
            if with_block:
                y = block.forward(x, ctx)
            else:
                y = ops.relu(block.bn1.forward(block.conv1.forward(x, ctx), ctx))
            loss = ops.mse_loss(y, Tensor(target, dtype=FP64))
            backward(loss)
            return block.conv1.w.compute.grad

    # same seed -> identical weights, so the two runs share parameters
        g_block = run(True)
        g_single = run(False)
        np.testing.assert_allclose(g_block, g_single, atol=1e-5)


class TestAttentionGate:
    def _gate_and_inputs(self, seed=4, filters=8, size=8):
        rng = np.random.default_rng(seed)
        gate = AttentionGate("g", filters, rng_from_seed(seed))
        skip = Tensor(rng.standard_normal((2, filters, size, size)).astype(np.float32))
        g = Tensor(rng.standard_normal((2, filters, size, size)).astype(np.float32))
        return gate, skip, g

    def test_zero_final_conv_halves_gate(self):
        from sparsect.model import ForwardContext
        gate, skip, g = self._gate_and_inputs()
        gate.psi.w.master.data[...] = 0.0
        gate.psi.b.master.data[...] = 0.0
        out = gate.forward(skip, g, ForwardContext())
        np.testing.assert_allclose(out.data, 0.5 * g.data, rtol=1e-6, atol=1e-7)

    def test_saturated_bias_opens_gate(self):
        from sparsect.model import ForwardContext
        gate, skip, g = self._gate_and_inputs(5)
        gate.psi.w.master.data[...] = 0.0
        gate.psi.b.master.data[...] = 20.0
        out = gate.forward(skip, g, ForwardContext())
        np.testing.assert_allclose(out.data, g.data, atol=1e-6)

    def test_alpha_shape_and_range(self):
        from sparsect.model import ForwardContext
        gate, skip, g = self._gate_and_inputs(6)
        ctx = ForwardContext()
        a = gate.theta.forward(skip, ctx)
        b = gate.phi.forward(g, ctx)
        alpha = ops.sigmoid(gate.psi.forward(ops.relu(ops.concat_channels(a, b)), ctx))
        assert alpha.dims == (2, 1, 8, 8)
        assert np.all(alpha.data > 0.0) and np.all(alpha.data < 1.0)
        out = gate.forward(skip, g, ctx)
        np.testing.assert_allclose(out.data, g.data * alpha.data, rtol=1e-6)


class TestBuilders:
    def test_forward_preserves_dims_128(self):
        m = build_resattunet(seed=0)
        x = Tensor(np.zeros((1, 1, 128, 128), np.float32))
        assert m.forward(x).dims == (1, 1, 128, 128)

    def test_shape_contract_both_models(self):
        for build in (build_resattunet, build_unet):
            m = build(SMALL, seed=1)
            for s in (32, 48):
                x = Tensor(np.zeros((2, 1, s, s), np.float32))
                assert m.forward(x).dims == (2, 1, s, s)

    def test_indivisible_input_rejected(self):
        m = build_resattunet(SMALL, seed=1)
        with pytest.raises(GraphError):
            m.forward(Tensor(np.zeros((1, 1, 40, 40), np.float32)))

    def test_default_parameter_counts_frozen(self):
        assert build_resattunet(seed=0).parameter_count() == RESATT_DEFAULT_PARAMS
        assert build_unet(seed=0).parameter_count() == UNET_DEFAULT_PARAMS
        assert count_formula((32, 64, 128, 256, 512), attention=True) == RESATT_DEFAULT_PARAMS
        assert count_formula((32, 64, 128, 256, 512), attention=False) == UNET_DEFAULT_PARAMS

    def test_unet_smaller_than_resatt(self):
        assert (build_unet(SMALL, 0).parameter_count()
                < build_resattunet(SMALL, 0).parameter_count())

    def test_flags_off_resatt_builder_isomorphic_to_unet(self):
        cfg = ModelConfig(encoder_filters=SMALL.encoder_filters,
                          use_attention=False, use_residual=False)
        a = build_model("resattunet", cfg, seed=3)
        b = build_unet(SMALL, seed=3)
        assert [p.name for p in a.parameters()] == [p.name for p in b.parameters()]
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.master.data, pb.master.data)

    def test_forward_deterministic_bitwise(self):
        m = build_resattunet(SMALL, seed=4)
        x = Tensor(np.random.default_rng(0).random((1, 1, 32, 32)).astype(np.float32))
        y1 = m.forward(x, mode="train")
        y2 = m.forward(x, mode="train")
        assert y1.data.tobytes() == y2.data.tobytes()

    def test_gate_open_equivalence_with_unet(self):
        """All-open gates turn the no-residual attention model into the U-Net."""
        cfg = ModelConfig(encoder_filters=SMALL.encoder_filters,
                          use_attention=True, use_residual=False)
        att = build_model("resattunet", cfg, seed=5)
        un = build_unet(SMALL, seed=6)
        shared = un.named_parameters()
        for name, p in att.named_parameters().items():
            if name in shared:
                p.master.data[...] = shared[name].master.data
            elif name.endswith("psi.w"):
                p.master.data[...] = 0.0
            elif name.endswith("psi.b"):
                p.master.data[...] = 50.0   # sigmoid(50) == 1.0 in float32
        x = Tensor(np.random.default_rng(1).random((1, 1, 32, 32)).astype(np.float32))
        ya = att.forward(x, mode="train")
        yu = un.forward(x, mode="train")
        np.testing.assert_allclose(ya.data, yu.data, atol=1e-6)

    def test_all_batchnorms_on_exempt_list(self):
        m = build_resattunet(SMALL, seed=0)
        exempt = m.fp32_exempt_parameter_names()
        bns = m.batchnorms()
        assert len(bns) == 18  # 2 per block, 5 encoder + 4 decoder blocks
        for bn in bns:
            assert bn.gamma.name in exempt
            assert bn.beta.name in exempt
        assert len(exempt) == 2 * len(bns)

    def test_bad_config_rejected(self):
        with pytest.raises(ParameterError):
            ModelConfig(encoder_filters=(32, 64, 128, 256))
        with pytest.raises(ParameterError):
            ModelConfig(encoder_filters=(32, 64, 100, 200, 400))
        with pytest.raises(ParameterError):
            ModelConfig(kernel=4)
        with pytest.raises(ParameterError):
            build_model("transformer")


class TestMemoryReport:
    def test_single_conv_activation_bytes(self):
        x = Tensor(np.zeros((1, 16, 64, 64), np.float32))
        w = Tensor(np.zeros((32, 16, 3, 3), np.float32))
        b = Tensor(np.zeros(32, np.float32))
        with ops.record_activations() as tr0:
            ops.conv2d(x, w, b, pad=1)
        with ops.record_activations() as tr2:
            ops.conv2d(x, w, b, pad=1, fp16=True)
        o0 = tr0[0][1] * 4
        o2 = tr2[0][1] * 2
        assert o0 == 524288 and o2 == 262144  # 1x32x64x64 at 4 vs 2 bytes

    def test_o2_reduces_activations(self):
        m = build_resattunet(SMALL, seed=0)
        r0 = memory_report(m, O0, (1, 1, 32, 32))
        r2 = memory_report(m, PrecisionPolicy(level="O2"), (1, 1, 32, 32))
        assert r2["activations"] < r0["activations"]
        assert r0["gradients"] == r2["gradients"]

    def test_default_model_reduction_at_128(self):
        m = build_resattunet(seed=0)
        r0 = memory_report(m, O0, (1, 1, 128, 128))
        r2 = memory_report(m, PrecisionPolicy(level="O2"), (1, 1, 128, 128))
        reduction = 1.0 - r2["activations"] / r0["activations"]
        assert reduction >= 0.30

    def test_unresolved_shape_raises(self):
        m = build_resattunet(SMALL, seed=0)
        with pytest.raises(GraphError):
            memory_report(m, O0, (1, 1, 40, 40))
