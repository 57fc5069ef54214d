import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuseunet.errors import ConfigError, NumericError, ShapeError
from fuseunet.losses import LossConfig, focal_loss, pathology_target_planes, total_loss, tversky_loss
from fuseunet.model import SegOutput
from fuseunet.tensor import Tape, Tensor, backward, finite_diff_check, softmax

from reference import focal_loss_reference, tversky_loss_reference


def cfg(**over):
    return LossConfig(**over)


def soft_pred(rng, shape, lo=0.1, hi=0.9, dtype=np.float64, requires_grad=False):
    return Tensor(rng.uniform(lo, hi, shape).astype(dtype), requires_grad=requires_grad)


def binary_target(rng, shape, p=0.3):
    return (rng.uniform(size=shape) < p).astype(np.uint8)


# ---------------------------------------------------------------------------
# tversky


def test_tversky_perfect_prediction_is_near_zero():
    rng = np.random.default_rng(0)
    target = binary_target(rng, (2, 8, 8))
    target[0, 0, 0] = 1  # nonempty
    loss = tversky_loss(Tensor(target.astype(np.float64)), target, cfg())
    assert loss.item() <= 1e-5


def test_tversky_total_miss_is_one():
    rng = np.random.default_rng(1)
    target = binary_target(rng, (1, 6, 6))
    pred = Tensor((1 - target).astype(np.float64))
    assert tversky_loss(pred, target, cfg()).item() == pytest.approx(1.0, abs=1e-9)


def test_tversky_matches_direct_formula_oracle():
    rng = np.random.default_rng(2)
    pred = soft_pred(rng, (3, 8, 8))
    target = binary_target(rng, (3, 8, 8))
    got = tversky_loss(pred, target, cfg(beta=0.7)).item()
    want = tversky_loss_reference(pred.data, target, beta=0.7, eps=1e-6)
    assert got == pytest.approx(want, abs=1e-10)


def test_tversky_audit_denominator_caps_perfect_index_at_half():
    rng = np.random.default_rng(3)
    target = binary_target(rng, (1, 8, 8), p=0.5)
    target[0, 0, 0] = 1
    pred = Tensor(target.astype(np.float64))
    loss = tversky_loss(pred, target, cfg(denominator="totals")).item()
    assert loss == pytest.approx(0.5, abs=1e-6)


def test_tversky_rejects_out_of_range_pred_and_nonbinary_target():
    target = np.zeros((1, 4, 4), dtype=np.uint8)
    with pytest.raises(NumericError):
        tversky_loss(Tensor(np.full((1, 4, 4), 1.5)), target, cfg())
    with pytest.raises(NumericError):
        tversky_loss(Tensor(np.full((1, 4, 4), 0.5)), target + 2, cfg())
    with pytest.raises(ShapeError):
        tversky_loss(Tensor(np.zeros((1, 4, 4))), np.zeros((1, 5, 5), dtype=np.uint8), cfg())


def test_beta_asymmetry_direction():
    rng = np.random.default_rng(4)
    target = np.zeros((1, 10, 10), dtype=np.uint8)
    target[0, 2:8, 2:8] = 1
    # pure false negatives: prediction misses part of the target
    pred_fn = target.astype(np.float64).copy()
    pred_fn[0, 2:8, 2:5] = 0.0
    # pure false positives: prediction spills outside the target
    pred_fp = target.astype(np.float64).copy()
    pred_fp[0, 8:10, 2:8] = 1.0
    betas = [0.3, 0.5, 0.7]
    fn_losses = [tversky_loss(Tensor(pred_fn), target, cfg(beta=b)).item() for b in betas]
    fp_losses = [tversky_loss(Tensor(pred_fp), target, cfg(beta=b)).item() for b in betas]
    assert fn_losses[0] < fn_losses[1] < fn_losses[2]
    assert fp_losses[0] > fp_losses[1] > fp_losses[2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 0.8))
def test_tversky_in_unit_interval(seed, beta):
    rng = np.random.default_rng(seed)
    pred = soft_pred(rng, (2, 5, 5), lo=0.0, hi=1.0)
    target = binary_target(rng, (2, 5, 5), p=0.4)
    val = tversky_loss(pred, target, cfg(beta=float(beta))).item()
    assert 0.0 <= val <= 1.0


def test_tversky_monotone_toward_target():
    rng = np.random.default_rng(5)
    target = binary_target(rng, (1, 8, 8), p=0.4)
    pred0 = rng.uniform(0.05, 0.95, (1, 8, 8))
    prev = None
    for t in np.linspace(0, 1, 6):
        pred = (1 - t) * pred0 + t * target.astype(np.float64)
        val = tversky_loss(Tensor(pred), target, cfg()).item()
        if prev is not None:
            assert val <= prev + 1e-12
        prev = val


def test_tversky_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    pred = soft_pred(rng, (2, 6, 6), requires_grad=True)
    target = binary_target(rng, (2, 6, 6))
    err = finite_diff_check(lambda: tversky_loss(pred, target, cfg()), [pred], step=1e-6)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# focal


def test_focal_perfect_prediction_is_near_zero():
    rng = np.random.default_rng(7)
    target = binary_target(rng, (2, 8, 8))
    loss = focal_loss(Tensor(target.astype(np.float64)), target, cfg())
    assert loss.item() < 1e-8


def test_focal_gamma_zero_is_masked_cross_entropy():
    rng = np.random.default_rng(8)
    pred = soft_pred(rng, (2, 8, 8))
    target = binary_target(rng, (2, 8, 8))
    got = focal_loss(pred, target, cfg(gamma=0.0)).item()
    ce = (-target.astype(np.float64) * np.log(pred.data)).sum(axis=(1, 2)).mean()
    assert got == pytest.approx(ce, abs=1e-8)


def test_focal_matches_direct_formula_oracle():
    rng = np.random.default_rng(9)
    pred = soft_pred(rng, (3, 7, 7))
    target = binary_target(rng, (3, 7, 7))
    got = focal_loss(pred, target, cfg(gamma=2.0)).item()
    want = focal_loss_reference(pred.data, target, gamma=2.0, eps=1e-6)
    assert got == pytest.approx(want, abs=1e-10)


def test_focal_nonnegative_and_monotone_toward_target():
    rng = np.random.default_rng(10)
    target = binary_target(rng, (1, 8, 8), p=0.4)
    pred0 = rng.uniform(0.05, 0.95, (1, 8, 8))
    prev = None
    for t in np.linspace(0, 1, 6):
        pred = (1 - t) * pred0 + t * target.astype(np.float64)
        val = focal_loss(Tensor(pred), target, cfg()).item()
        assert val >= 0.0
        if prev is not None:
            assert val <= prev + 1e-12
        prev = val


def test_focal_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    pred = soft_pred(rng, (2, 6, 6), requires_grad=True)
    target = binary_target(rng, (2, 6, 6))
    err = finite_diff_check(lambda: focal_loss(pred, target, cfg()), [pred], step=1e-6)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# combined objective


def one_hot_output(y_ana, y_pat, dtype=np.float64, jitter=0.0, rng=None, requires_grad=False):
    B, H, W = y_ana.shape
    ana = np.zeros((B, 4, H, W), dtype=dtype)
    for j in range(4):
        ana[:, j][y_ana == j] = 1.0
    infarct, edema = pathology_target_planes(y_pat)
    pat = np.zeros((B, 3, H, W), dtype=dtype)
    pat[:, 1][infarct] = 1.0
    pat[:, 2][edema] = 1.0
    pat[:, 0] = 1.0 - pat[:, 1] - pat[:, 2]
    if jitter:
        ana = np.clip(ana + rng.uniform(-jitter, jitter, ana.shape), 0.01, 0.99)
        pat = np.clip(pat + rng.uniform(-jitter, jitter, pat.shape), 0.01, 0.99)
    return SegOutput(Tensor(ana, requires_grad=requires_grad), Tensor(pat, requires_grad=requires_grad))


def synthetic_labels(rng, B=2, H=8, W=8):
    # every class present in every item: an absent class carries overlap
    # loss 1 by definition regardless of the prediction
    y_ana = rng.integers(0, 4, (B, H, W)).astype(np.uint8)
    y_pat = np.zeros((B, H, W), dtype=np.uint8)
    myo = y_ana == 1
    y_pat[myo & (rng.uniform(size=(B, H, W)) < 0.5)] = 3  # infarct inside edema
    y_pat[myo & (y_pat == 0) & (rng.uniform(size=(B, H, W)) < 0.3)] = 2
    for b in range(B):
        y_ana[b, 0, :4] = [1, 2, 3, 1]
        y_pat[b, 0, 0] = 3
        y_pat[b, 0, 3] = 2
    return y_ana, y_pat


def test_total_loss_near_zero_for_perfect_prediction():
    rng = np.random.default_rng(12)
    y_ana, y_pat = synthetic_labels(rng)
    out = one_hot_output(y_ana, y_pat)
    total, breakdown = total_loss(out, y_ana, y_pat, cfg())
    assert total.item() < 1e-3
    assert breakdown["total"] == pytest.approx(total.item())


def test_total_loss_zero_pathology_weights_zero_pathology_gradient():
    rng = np.random.default_rng(13)
    y_ana, y_pat = synthetic_labels(rng)
    out = one_hot_output(y_ana, y_pat, jitter=0.3, rng=rng, requires_grad=True)
    with Tape():
        total, _ = total_loss(out, y_ana, y_pat, cfg(lambda_infarct=0.0, lambda_edema=0.0))
        backward(total)
    assert np.all(out.pathology_probs.grad == 0.0)
    assert np.abs(out.anatomy_probs.grad).max() > 0.0


def test_total_loss_scaling_lambdas_scales_loss_and_keeps_direction():
    rng = np.random.default_rng(14)
    y_ana, y_pat = synthetic_labels(rng)
    c = 2.5

    def run(scale):
        out = one_hot_output(y_ana, y_pat, jitter=0.3, rng=np.random.default_rng(15), requires_grad=True)
        with Tape():
            total, _ = total_loss(
                out, y_ana, y_pat,
                cfg(lambda_anatomy=scale * 1.0, lambda_infarct=scale * 3.0, lambda_edema=scale * 5.0),
            )
            backward(total)
        return total.item(), out.anatomy_probs.grad.copy(), out.pathology_probs.grad.copy()

    l1, ga1, gp1 = run(1.0)
    l2, ga2, gp2 = run(c)
    assert l2 == pytest.approx(c * l1, rel=1e-9)
    assert np.allclose(ga2, c * ga1, rtol=1e-9, atol=1e-12)
    assert np.allclose(gp2, c * gp1, rtol=1e-9, atol=1e-12)


def test_total_loss_channel_mismatch_rejected():
    rng = np.random.default_rng(16)
    y_ana, y_pat = synthetic_labels(rng)
    out = one_hot_output(y_ana, y_pat)
    bad = SegOutput(out.anatomy_probs, Tensor(np.zeros((2, 4, 8, 8))))
    with pytest.raises(ShapeError):
        total_loss(bad, y_ana, y_pat, cfg())


def test_total_loss_through_softmax_gradcheck():
    rng = np.random.default_rng(17)
    y_ana, y_pat = synthetic_labels(rng, B=1, H=5, W=5)
    logits_a = Tensor(rng.standard_normal((1, 4, 5, 5)), requires_grad=True)
    logits_p = Tensor(rng.standard_normal((1, 3, 5, 5)), requires_grad=True)

    def f():
        out = SegOutput(softmax(logits_a, axis=1), softmax(logits_p, axis=1))
        return total_loss(out, y_ana, y_pat, cfg())[0]

    err = finite_diff_check(f, [logits_a, logits_p], step=1e-6)
    assert err < 1e-4


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        cfg(beta=0.0)
    with pytest.raises(ConfigError):
        cfg(gamma=-1.0)
    with pytest.raises(ConfigError):
        cfg(lambda_edema=-0.1)
    with pytest.raises(ConfigError):
        cfg(denominator="bogus")


def test_pathology_planes_precedence():
    y_pat = np.array([[0, 1, 2, 3]], dtype=np.uint8)
    infarct, edema = pathology_target_planes(y_pat)
    assert infarct.tolist() == [[False, True, False, True]]
    assert edema.tolist() == [[False, False, True, False]]
