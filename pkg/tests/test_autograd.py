"""Reverse-mode tape: per-op gradient checks and structural contracts."""

import numpy as np
import pytest

from egnet import autograd as ag
from egnet import ops
from egnet.autograd import Tape, finite_diff_check
from egnet.backbone import (
    BackboneConfig,
    Mode,
    ParamView,
    _pyramid_forward,
    _pyramid_loss,
    build_model,
    edge_attention,
    leg_block_forward,
)
from egnet.errors import ContractError, VerificationError
from egnet.tensor import Tensor


def check_op_grads(builder, arrays, *, coords=60, eps=1e-5, tol=1e-6, seed=0):
    """Compare taped gradients of a projected output against central differences.

    ``builder`` maps a dict of values (Var or Tensor) to the op output; the
    loss is a fixed random projection of that output, which exercises every
    output coordinate with a distinct weight.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    probe = builder({k: Tensor(v) for k, v in arrays.items()})
    proj = Tensor(np.random.default_rng(999).normal(size=probe.shape))

    tape = Tape()
    leaves = {k: tape.leaf(Tensor(v), name=k) for k, v in arrays.items()}
    loss = ag.sum_all(ag.mul(builder(leaves), proj))
    analytic = ag.backward(loss)

    def loss_fn(overrides):
        vals = {k: Tensor(overrides.get(k, arrays[k])) for k in arrays}
        out = builder(vals)
        return float((out.data * proj.data).sum())

    report = finite_diff_check(
        loss_fn, arrays, analytic, eps=eps, seed=seed, coords_per_tensor=coords
    )
    assert report.passed(tol), report.lines()
    return report


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        tape = Tape()
        xv = tape.leaf(Tensor(x), name="x")
        grads = ag.backward(ag.sum_all(xv))
        np.testing.assert_array_equal(grads["x"], np.ones_like(x))

    def test_half_quadratic_gradient_is_x(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        tape = Tape()
        xv = tape.leaf(Tensor(x), name="x")
        loss = ag.scale(ag.sum_all(ag.mul(xv, xv)), 0.5)
        grads = ag.backward(loss)
        np.testing.assert_allclose(grads["x"], x, rtol=1e-12)

    def test_add_splits_and_mul_cross_routes(self):
        a, b = 3.0, -2.0
        tape = Tape()
        av = tape.leaf(Tensor(np.array(a)), name="a")
        bv = tape.leaf(Tensor(np.array(b)), name="b")
        grads = ag.backward(ag.sum_all(ag.add(av, bv)))
        assert grads["a"] == 1.0 and grads["b"] == 1.0
        tape = Tape()
        av = tape.leaf(Tensor(np.array(a)), name="a")
        bv = tape.leaf(Tensor(np.array(b)), name="b")
        grads = ag.backward(ag.sum_all(ag.mul(av, bv)))
        assert grads["a"] == b and grads["b"] == a

    def test_non_scalar_loss_rejected(self, rng):
        tape = Tape()
        xv = tape.leaf(Tensor(rng.normal(size=(1, 1, 2, 2))), name="x")
        with pytest.raises(ContractError):
            ag.backward(xv)

    def test_mixed_tapes_rejected(self, rng):
        t1, t2 = Tape(), Tape()
        a = t1.leaf(Tensor(rng.normal(size=(1, 1, 2, 2))))
        b = t2.leaf(Tensor(rng.normal(size=(1, 1, 2, 2))))
        with pytest.raises(ContractError):
            ag.add(a, b)

    def test_unreached_leaf_gets_zeros(self, rng):
        tape = Tape()
        xv = tape.leaf(Tensor(rng.normal(size=(1, 1, 2, 2))), name="x")
        unused = tape.leaf(Tensor(rng.normal(size=(3,))), name="unused")
        grads = ag.backward(ag.sum_all(xv))
        np.testing.assert_array_equal(grads["unused"], np.zeros(3))

    def test_frozen_leaf_absent_from_gradients(self, rng):
        tape = Tape()
        xv = tape.leaf(Tensor(rng.normal(size=(1, 2, 4, 4))), name="x")
        k = tape.leaf(Tensor(np.ones((3, 3)) / 9.0), name="kern", frozen=True)
        grads = ag.backward(ag.sum_all(ag.depthwise_conv2d(xv, k)))
        assert "kern" not in grads
        assert "x" in grads


class TestPerOpGradients:
    def test_conv2d(self, rng):
        check_op_grads(
            lambda v: ag.conv2d(v["x"], v["w"], v["b"]),
            dict(x=rng.normal(size=(2, 3, 5, 5)), w=rng.normal(size=(4, 3, 3, 3)),
                 b=rng.normal(size=4)),
        )

    def test_conv2d_strided_replicate(self, rng):
        check_op_grads(
            lambda v: ag.conv2d(v["x"], v["w"], stride=2, padding=ops.REPLICATE),
            dict(x=rng.normal(size=(1, 2, 6, 6)), w=rng.normal(size=(3, 2, 5, 5))),
        )

    def test_depthwise_per_channel(self, rng):
        check_op_grads(
            lambda v: ag.depthwise_conv2d(v["x"], v["k"], padding=ops.REPLICATE),
            dict(x=rng.normal(size=(1, 3, 6, 6)), k=rng.normal(size=(3, 1, 3, 3))),
        )

    def test_depthwise_shared_kernel(self, rng):
        check_op_grads(
            lambda v: ag.depthwise_conv2d(v["x"], v["k"], padding=ops.REPLICATE),
            dict(x=rng.normal(size=(1, 4, 6, 6)), k=rng.normal(size=(5, 5))),
        )

    def test_conv1d_channels(self, rng):
        check_op_grads(
            lambda v: ag.conv1d_channels(v["v"], v["w"]),
            dict(v=rng.normal(size=(2, 16)), w=rng.normal(size=5)),
        )

    def test_maxpool(self, rng):
        check_op_grads(
            lambda v: ag.maxpool2d(v["x"]),
            dict(x=rng.normal(size=(2, 3, 6, 6))),
        )

    def test_global_avg_pool(self, rng):
        check_op_grads(
            lambda v: ag.global_avg_pool(v["x"]),
            dict(x=rng.normal(size=(2, 4, 5, 5))),
        )

    def test_batchnorm_batch_mode(self, rng):
        check_op_grads(
            lambda v: ag.batchnorm2d(v["x"], v["s"], v["b"], mode="batch"),
            dict(x=rng.normal(size=(2, 3, 4, 4)), s=rng.normal(size=3),
                 b=rng.normal(size=3)),
            tol=1e-5,
        )

    def test_batchnorm_running_mode(self, rng):
        check_op_grads(
            lambda v: ag.batchnorm2d(
                v["x"], v["s"], v["b"], mode="running", mean=v["m"], var=v["v2"]
            ),
            dict(x=rng.normal(size=(2, 3, 4, 4)), s=rng.normal(size=3),
                 b=rng.normal(size=3), m=rng.normal(size=3),
                 v2=rng.uniform(0.5, 2.0, size=3)),
        )

    def test_gelu(self, rng):
        check_op_grads(lambda v: ag.gelu(v["x"]), dict(x=rng.normal(size=(1, 2, 5, 5))))

    def test_sigmoid(self, rng):
        check_op_grads(lambda v: ag.sigmoid(v["x"]), dict(x=rng.normal(size=(2, 8))))

    def test_scale_channels(self, rng):
        check_op_grads(
            lambda v: ag.scale_channels(v["x"], v["g"]),
            dict(x=rng.normal(size=(2, 3, 4, 4)), g=rng.normal(size=(2, 3))),
        )

    def test_sqrt_eps(self, rng):
        check_op_grads(
            lambda v: ag.sqrt_eps(v["x"]),
            dict(x=rng.uniform(0.05, 2.0, size=(1, 2, 4, 4))),
        )

    def test_dropout_frozen_mask(self, rng):
        check_op_grads(
            lambda v: ag.dropout(v["x"], 0.3, training=True,
                                 rng=np.random.default_rng(5)),
            dict(x=rng.normal(size=(1, 2, 6, 6))),
        )


class TestSqrtEpsAtZero:
    def test_gradient_finite_at_zero_input(self):
        tape = Tape()
        xv = tape.leaf(Tensor(np.zeros((1, 1, 3, 3))), name="x")
        grads = ag.backward(ag.sum_all(ag.sqrt_eps(xv)))
        assert np.isfinite(grads["x"]).all()
        np.testing.assert_allclose(grads["x"], 0.5 / 1e-6, rtol=1e-6)


class TestEdgeAttentionGradient:
    def test_matches_finite_differences(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))

        def builder(v):
            return edge_attention(v["x"])

        # spec-level fragment check: plain sum loss, 64-bit, 1e-4
        tape = Tape()
        xv = tape.leaf(Tensor(x), name="x")
        analytic = ag.backward(ag.sum_all(builder({"x": xv})))

        def loss_fn(overrides):
            return float(builder({"x": Tensor(overrides["x"])}).data.sum())

        report = finite_diff_check(
            loss_fn, {"x": x}, analytic, eps=1e-5, coords_per_tensor=72
        )
        assert report.passed(1e-4), report.lines()


class TestLegBlockGradient:
    def test_stage1_block_matches_finite_differences(self, rng):
        model = build_model(BackboneConfig.for_variant("tiny"), seed=3)
        m64 = model.astype(np.float64)
        x = rng.normal(size=(1, 32, 16, 16))
        mode = Mode(stats="batch", dropout_seed=11)

        tape = Tape()
        pview = ParamView(m64, tape=tape)
        xv = tape.leaf(Tensor(x), name="input")
        out = leg_block_forward(xv, 1, pview, "s1.b1", m64.config, mode.fresh())
        analytic = ag.backward(ag.scale(ag.sum_all(out), 1e-6))

        block_params = {
            n: p.value.data for n, p in m64.learnable_items() if n.startswith("s1.b1.")
        }
        block_params["input"] = x

        def loss_fn(overrides):
            merged = dict(block_params)
            merged.update(overrides)
            pv = ParamView(m64, overrides=merged)
            xin = Tensor(merged["input"])
            out = leg_block_forward(xin, 1, pv, "s1.b1", m64.config, mode.fresh())
            return 1e-6 * float(out.data.sum())

        report = finite_diff_check(
            loss_fn, block_params, analytic, eps=1e-5, coords_per_tensor=40
        )
        assert report.passed(1e-4), [l for l in report.lines()[-3:]]


class TestZeroBranchResidual:
    def test_input_gradient_is_exactly_upstream(self, rng):
        model = build_model(BackboneConfig.for_variant("tiny"), seed=0)
        model = model.with_values(
            {"s1.b1.reduce": np.zeros((32, 64, 1, 1), dtype=np.float32)}
        ).astype(np.float64)
        x = rng.normal(size=(1, 32, 8, 8))
        tape = Tape()
        pview = ParamView(model, tape=tape)
        xv = tape.leaf(Tensor(x), name="input")
        out = leg_block_forward(xv, 1, pview, "s1.b1", model.config, Mode(stats="batch"))
        grads = ag.backward(ag.sum_all(out))
        np.testing.assert_array_equal(grads["input"], np.ones_like(x))


class TestFrozenKernelContract:
    def test_no_entries_and_bytes_stable_after_update(self, rng):
        model = build_model(BackboneConfig.for_variant("tiny"), seed=1)
        m64 = model.astype(np.float64)
        x = Tensor(rng.normal(size=(1, 3, 32, 32)))
        tape = Tape()
        pview = ParamView(m64, tape=tape)
        pyramid = _pyramid_forward(
            tape.leaf(x, name="input"), pview, m64.config, Mode(stats="batch", dropout_seed=0)
        )
        grads = ag.backward(_pyramid_loss(pyramid.levels))
        frozen = {n for n, p in model.params.items() if p.frozen}
        assert frozen == {
            "fixed.log7", "fixed.gauss9_s05", "fixed.gauss5_s05",
            "fixed.gauss5_s10", "fixed.scharr_x", "fixed.scharr_y",
        }
        assert not (set(grads) & frozen)
        # gradients flow through the frozen ops to their inputs
        assert np.abs(grads["stem.conv7"]).max() > 0
        # synthetic sgd step on every reported gradient
        before = {n: model.params[n].value.data.tobytes() for n in frozen}
        stepped = model.astype(np.float64).with_values(
            {n: m64.params[n].value.data - 0.01 * g for n, g in grads.items() if n != "input"}
        )
        for n in frozen:
            assert stepped.params[n].value.astype(np.float32).data.tobytes() == before[n]


class TestNoNaNBackward:
    def test_block_backward_clean_over_many_seeds(self):
        model = build_model(BackboneConfig.for_variant("tiny"), seed=0).astype(np.float64)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(1, 32, 8, 8))
            tape = Tape()
            pview = ParamView(model, tape=tape)
            xv = tape.leaf(Tensor(x), name="input")
            out = leg_block_forward(xv, 1, pview, "s1.b1", model.config,
                                    Mode(stats="batch", dropout_seed=seed))
            grads = ag.backward(ag.sum_all(out))
            for g in grads.values():
                assert np.isfinite(g).all()

    def test_full_backbone_backward_clean(self):
        model = build_model(BackboneConfig.for_variant("tiny"), seed=0).astype(np.float64)
        for seed in range(3):
            x = Tensor(np.random.default_rng(seed).normal(size=(1, 3, 32, 32)))
            tape = Tape()
            pview = ParamView(model, tape=tape)
            pyramid = _pyramid_forward(
                tape.leaf(x, name="input"), pview, model.config,
                Mode(stats="batch", dropout_seed=seed),
            )
            grads = ag.backward(_pyramid_loss(pyramid.levels))
            for g in grads.values():
                assert np.isfinite(g).all()


class TestFiniteDiffCheckApi:
    def test_linear_fragment_is_nearly_exact(self, rng):
        # central differences of a linear map have no truncation term
        x = rng.normal(size=(1, 4, 2, 2))
        w = rng.normal(size=(2, 4, 1, 1))
        b = rng.normal(size=2)
        arrays = dict(x=x, w=w, b=b)
        tape = Tape()
        leaves = {k: tape.leaf(Tensor(v), name=k) for k, v in arrays.items()}
        analytic = ag.backward(
            ag.sum_all(ag.conv2d(leaves["x"], leaves["w"], leaves["b"]))
        )

        def loss_fn(overrides):
            vals = {k: Tensor(overrides.get(k, arrays[k])) for k in arrays}
            return float(ops.conv2d(vals["x"], vals["w"], vals["b"]).data.sum())

        report = finite_diff_check(loss_fn, arrays, analytic, eps=1e-5, coords_per_tensor=60)
        assert report.passed(1e-9), report.lines()

    def test_nan_loss_reports_coordinate(self):
        def loss_fn(overrides):
            return float("nan")

        with pytest.raises(VerificationError) as err:
            finite_diff_check(loss_fn, {"p": np.ones(3)}, {"p": np.zeros(3)})
        assert err.value.param == "p"
        assert err.value.coord is not None

    def test_report_lines_format(self, rng):
        x = rng.normal(size=(1, 1, 3, 3))
        tape = Tape()
        xv = tape.leaf(Tensor(x), name="x")
        analytic = ag.backward(ag.sum_all(ag.gelu(xv)))

        def loss_fn(overrides):
            return float(ops.gelu(Tensor(overrides["x"])).data.sum())

        report = finite_diff_check(loss_fn, {"x": x}, analytic, coords_per_tensor=9)
        lines = report.lines()
        assert any(line.startswith("param=x ") for line in lines)
        assert lines[-1].startswith("gradcheck max_rel_err=")
