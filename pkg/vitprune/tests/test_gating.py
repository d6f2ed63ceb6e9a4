import numpy as np
import pytest

from .. import gating
from .. import numerics as nx
from ..params import ModelDims, init_params

DIMS = ModelDims(layers=2, heads=2, width=16, patch=4, image_size=16,
                 channels=3, classes=4)


@pytest.mark.parametrize("design", ["mlp2", "dynamicvit"])
def test_gate_emits_two_way_probabilities(design):
    rng = np.random.default_rng(0)
    params = init_params(DIMS, rng, gated_layers=(2,), gate_design=design)
    x = nx.Var(rng.normal(size=(16, 16)))
    probs = gating.gate_logits(x, params.variables(), 2)
    assert probs.log_probs.shape == (16, 2)
    assert np.allclose(probs.p.sum(axis=1), 1.0, atol=1e-12)
    assert len(probs) == 16


def test_fresh_gate_prefers_keeping():
    rng = np.random.default_rng(1)
    params = init_params(DIMS, rng, gated_layers=(1,))
    x = nx.Var(rng.normal(size=(16, 16)))
    probs = gating.gate_logits(x, params.variables(), 1)
    assert np.all(probs.p_keep > 0.5)
    assert gating.select_mask_infer(probs).all()


def test_dynamicvit_gate_pools_over_kept_tokens():
    rng = np.random.default_rng(2)
    params = init_params(DIMS, rng, gated_layers=(1,),
                         gate_design="dynamicvit")
    p = params.variables()
    x = rng.normal(size=(16, 16))
    keep = np.zeros(16, dtype=bool)
    keep[:8] = True
    before = gating.gate_logits(nx.Var(x), p, 1, keep=keep).p
    x[8:] += 5.0
    after = gating.gate_logits(nx.Var(x), p, 1, keep=keep).p
    # pruned tokens change only their own row
    assert np.allclose(before[:8], after[:8], atol=1e-12)


def test_infer_ties_keep():
    probs = gating.GateProbs.from_probs([[0.5, 0.5], [0.4, 0.6], [0.6, 0.4]])
    assert gating.select_mask_infer(probs).tolist() == [True, False, True]


@pytest.mark.parametrize("p_keep", [0.1, 0.5, 0.9])
def test_gumbel_keep_frequency(p_keep):
    n = 10000
    probs = gating.GateProbs.from_probs(np.tile([p_keep, 1.0 - p_keep],
                                                (n, 1)))
    sampled = gating.sample_mask_train(probs, np.random.default_rng(42))
    sigma = np.sqrt(n * p_keep * (1.0 - p_keep))
    assert abs(sampled.keep.sum() - n * p_keep) <= 3 * sigma


def test_hard_sample_emits_binary_value():
    probs = gating.GateProbs.from_probs(np.tile([0.7, 0.3], (32, 1)))
    sampled = gating.sample_mask_train(probs, np.random.default_rng(3))
    assert sampled.value.shape == (32, 1)
    assert np.array_equal(sampled.value.value[:, 0],
                          sampled.keep.astype(np.float64))
    assert np.all((sampled.soft.value > 0.0) & (sampled.soft.value < 1.0))


def test_relaxed_sample_emits_soft_value():
    probs = gating.GateProbs.from_probs(np.tile([0.7, 0.3], (8, 1)))
    sampled = gating.sample_mask_train(probs, np.random.default_rng(3),
                                       hard=False)
    assert sampled.value is sampled.soft


def test_straight_through_gradient_is_the_soft_gradient():
    log_probs = np.log(np.tile([0.6, 0.4], (6, 1)))
    noise = gating.gumbel_noise(np.random.default_rng(4), (6, 2))
    grads = []
    for hard in (True, False):
        tape = nx.Tape()
        watched = tape.watch(log_probs)
        sampled = gating.sample_mask_train(gating.GateProbs(watched), None,
                                           tau=0.5, hard=hard, noise=noise)
        tape.backward(nx.total(sampled.value))
        grads.append(watched.grad)
    assert np.array_equal(grads[0], grads[1])


def test_lower_temperature_sharpens():
    probs = gating.GateProbs.from_probs(np.tile([0.7, 0.3], (64, 1)))
    noise = gating.gumbel_noise(np.random.default_rng(5), (64, 2))
    warm = gating.sample_mask_train(probs, None, tau=5.0, noise=noise).soft
    cold = gating.sample_mask_train(probs, None, tau=0.1, noise=noise).soft
    assert np.mean(np.abs(cold.value - 0.5)) > np.mean(np.abs(warm.value -
                                                              0.5))


def test_temperature_must_be_positive():
    probs = gating.GateProbs.from_probs([[0.5, 0.5]])
    with pytest.raises(ValueError):
        gating.sample_mask_train(probs, np.random.default_rng(0), tau=0.0)


def test_n_selected():
    assert gating.n_selected(0.7, 100) == 70
    assert gating.n_selected(0.343, 64) == 22
    assert gating.n_selected(0.01, 10) == 1
    assert gating.n_selected(1.0, 64) == 64


def test_attention_score_select_top_k():
    keep = gating.attention_score_select([0.1, 0.4, 0.3, 0.2], 0.5)
    assert keep.tolist() == [False, True, True, False]


def test_attention_score_select_ties_to_lower_index():
    keep = gating.attention_score_select([0.25] * 4, 0.5)
    assert keep.tolist() == [True, True, False, False]


def test_attention_score_select_validates():
    with pytest.raises(ValueError):
        gating.attention_score_select([0.5, 0.5], 0.0)
    with pytest.raises(ValueError):
        gating.attention_score_select([-0.5, 0.5], 0.5)


def gelu(h):
    return 0.5 * h * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) *
                                    (h + 0.044715 * h ** 3)))


def test_gate_matches_two_layer_oracle():
    rng = np.random.default_rng(6)
    params = init_params(DIMS, rng, gated_layers=(2,))
    params.tensors["gates.2.fc1.b"][:] = rng.normal(size=4)
    x = rng.normal(size=(16, 16))
    probs = gating.gate_logits(nx.Var(x), params.variables(), 2)
    hidden = gelu(x @ params["gates.2.fc1.w"] + params["gates.2.fc1.b"])
    z = hidden @ params["gates.2.fc2.w"] + params["gates.2.fc2.b"]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    expected = e / e.sum(axis=1, keepdims=True)
    assert np.max(np.abs(probs.p - expected)) <= 1e-12


@pytest.mark.parametrize("bias,p_keep", [((0.0, 0.0), 0.5),
                                         ((20.0, -20.0), 1.0 - 1e-8)])
def test_zero_weight_gate_follows_its_bias(bias, p_keep):
    params = init_params(DIMS, np.random.default_rng(7), gated_layers=(1,))
    for name in ("fc1.w", "fc1.b", "fc2.w"):
        params.tensors["gates.1." + name][:] = 0.0
    params.tensors["gates.1.fc2.b"][:] = bias
    x = nx.Var(np.random.default_rng(8).normal(size=(16, 16)))
    probs = gating.gate_logits(x, params.variables(), 1)
    if bias == (0.0, 0.0):
        assert np.allclose(probs.p, 0.5, atol=1e-15)
    else:
        assert np.all(probs.p_keep >= p_keep)


def test_infer_decision_ignores_logit_scale():
    z = np.random.default_rng(9).normal(size=(64, 2))
    expected = z[:, gating.KEEP] >= z[:, gating.PRUNE]
    for factor in (0.01, 1.0, 37.0):
        probs = gating.GateProbs(nx.log_softmax_rows(z * factor))
        assert np.array_equal(gating.select_mask_infer(probs), expected)


def test_relaxed_sampler_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    noise = gating.gumbel_noise(rng, (8, 2))

    def f(v):
        probs = gating.GateProbs(nx.log_softmax_rows(v["logits"]))
        sampled = gating.sample_mask_train(probs, None, tau=0.5, hard=False,
                                           noise=noise)
        return nx.mean(sampled.soft)

    report = nx.grad_check(f, {"logits": rng.normal(size=(8, 2))},
                           threshold=1e-3)
    assert report.passed, report.errors


def test_certain_keep_is_always_sampled():
    probs = gating.GateProbs.from_probs([[1.0, 0.0], [0.5, 0.5]] * 50)
    for seed in range(20):
        sampled = gating.sample_mask_train(probs, np.random.default_rng(seed))
        assert sampled.keep[::2].all()
