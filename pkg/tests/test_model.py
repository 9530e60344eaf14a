"""Autoregressive rule generator: sampling, scoring, marginalization."""

import numpy as np
import pytest

from scenegen import autodiff as ad
from scenegen import diagnostics
from scenegen.grammar import Derivation, parse_grammar
from scenegen.model import ModelConfig, RetryCapExceeded, StructureModel
from scenegen.pipeline import bundled_grammar_path

SMALL = ModelConfig(hidden_size=8, embed_size=4, latent_size=3, t_max=25)

CHAIN_GRAMMAR = """
# every nonterminal has exactly one rule -> a single derivation
S -> A B ;
A -> a ;
B -> b ;
@renderable a b ;
"""

TRUNCATED_DIGITS = """
# digit scenes capped at three digits; finitely many derivations
Scene -> bg Digits1 ;
Digits1 -> Digit Digits2 | eps ;
Digits2 -> Digit Digits3 | eps ;
Digits3 -> Digit | eps ;
Digit -> d0 | d1 ;
@renderable d0 d1 ;
"""


@pytest.fixture(scope="module")
def mnist_grammar():
    with open(bundled_grammar_path("mnist.g")) as f:
        return parse_grammar(f.read())


def make_model(grammar, seed=0, **overrides):
    cfg = ModelConfig(**{**SMALL.__dict__, **overrides})
    return StructureModel(grammar, cfg, np.random.default_rng(seed))


# -- init -------------------------------------------------------------------


def test_projection_width_matches_K(mnist_grammar):
    model = make_model(mnist_grammar)
    assert model.w_out.shape == (SMALL.hidden_size, 13)
    assert model.b_out.shape == (13,)


def test_default_single_latent(mnist_grammar):
    model = make_model(mnist_grammar)
    assert model.latents.shape == (1, SMALL.latent_size)


def test_same_seed_same_parameters(mnist_grammar):
    a = make_model(mnist_grammar, seed=3)
    b = make_model(mnist_grammar, seed=3)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa.value, pb.value)
    assert np.array_equal(a.latents, b.latents)


# -- sampling ---------------------------------------------------------------


def test_deterministic_grammar_logprob_zero():
    model = make_model(parse_grammar(CHAIN_GRAMMAR))
    seq = model.sample_structure(np.random.default_rng(0))
    assert seq.complete
    assert seq.total_log_prob == 0.0


def test_first_rule_is_scene_expansion(mnist_grammar):
    model = make_model(mnist_grammar)
    rng = np.random.default_rng(1)
    for _ in range(20):
        seq = model.sample_structure(rng)
        assert seq.rules[0] == mnist_grammar.rule_index("Scene", ["bg", "Digits"])


def test_sampled_rules_always_valid(mnist_grammar):
    model = make_model(mnist_grammar)
    rng = np.random.default_rng(2)
    batch = model.sample_batch(300, rng)
    for seq in batch.sequences:
        d = Derivation(mnist_grammar).replay(seq.rules)  # raises if invalid
        assert d.done


def test_incompleteness_is_flagged_not_raised(mnist_grammar):
    model = make_model(mnist_grammar)
    seq = model.sample_structure(np.random.default_rng(3), t_max=1)
    assert not seq.complete


def test_sample_complete_rejects_tmax_1(mnist_grammar):
    # shortest mnist derivation is 2 rules, so t_max=1 never completes
    model = make_model(mnist_grammar)
    with pytest.raises(RetryCapExceeded):
        model.sample_complete(np.random.default_rng(4), t_max=1, retry_cap=5)


def test_sample_complete_counts_rejections(mnist_grammar):
    model = make_model(mnist_grammar)
    seq, rejections = model.sample_complete(np.random.default_rng(5), t_max=25)
    assert seq.complete and rejections >= 0


def test_batch_sampler_r_reject(mnist_grammar):
    model = make_model(mnist_grammar)
    batch = model.sample_batch(100, np.random.default_rng(6), t_max=100)
    assert len(batch.sequences) == 100
    assert batch.r_reject == batch.rejections / 100


def test_batch_sampler_cap_raises(mnist_grammar):
    model = make_model(mnist_grammar, t_max=1, retry_cap=3)
    with pytest.raises(RetryCapExceeded):
        model.sample_batch(10, np.random.default_rng(7))


# -- scoring ----------------------------------------------------------------


def test_rescoring_matches_sampled_logprobs(mnist_grammar):
    model = make_model(mnist_grammar)
    rng = np.random.default_rng(8)
    for _ in range(10):
        seq, _ = model.sample_complete(rng)
        scored = model.sequence_log_prob(seq)
        assert float(scored.value) == seq.total_log_prob  # bitwise identical path


def test_uniform_step_contributes_minus_log_k(mnist_grammar):
    model = make_model(mnist_grammar)
    for p in model.params:
        p.value[:] = 0.0  # uniform logits everywhere
    seq = [
        mnist_grammar.rule_index("Scene", ["bg", "Digits"]),
        mnist_grammar.rule_index("Digits", ["Digit", "Digits"]),
        mnist_grammar.rule_index("Digit", ["d4"]),
        mnist_grammar.rule_index("Digits", []),
    ]
    lp = float(model.sequence_log_prob(seq).value)
    # steps: 1 valid Scene rule, 2 Digits rules, 10 Digit rules, 2 Digits rules
    assert np.isclose(lp, -(np.log(1) + np.log(2) + np.log(10) + np.log(2)))


def test_score_batch_matches_marginal(mnist_grammar):
    model = make_model(mnist_grammar, n_latents=2)
    rng = np.random.default_rng(9)
    seqs = [model.sample_complete(rng)[0] for _ in range(5)]
    batched = model.score_batch(seqs).value
    single = [float(model.marginal_log_prob(s).value) for s in seqs]
    assert np.allclose(batched, single, rtol=0, atol=1e-12)


def test_marginal_single_latent_equals_conditional(mnist_grammar):
    model = make_model(mnist_grammar)
    seq, _ = model.sample_complete(np.random.default_rng(10))
    assert float(model.marginal_log_prob(seq).value) == float(
        model.sequence_log_prob(seq).value
    )


def test_marginal_identical_latents_equals_conditional(mnist_grammar):
    model = make_model(mnist_grammar, n_latents=2)
    model.latents[1] = model.latents[0]
    seq, _ = model.sample_complete(np.random.default_rng(11))
    assert np.isclose(
        float(model.marginal_log_prob(seq).value),
        float(model.sequence_log_prob(seq, z_index=0).value),
    )


def test_marginal_is_log_mean_of_conditionals(mnist_grammar):
    model = make_model(mnist_grammar, n_latents=2, seed=12)
    seq, _ = model.sample_complete(np.random.default_rng(12))
    p1 = np.exp(float(model.sequence_log_prob(seq, z_index=0).value))
    p2 = np.exp(float(model.sequence_log_prob(seq, z_index=1).value))
    assert np.isclose(
        float(model.marginal_log_prob(seq).value), np.log((p1 + p2) / 2.0)
    )


def test_incomplete_sequence_scoring_flagged(mnist_grammar):
    model = make_model(mnist_grammar)
    prefix = [mnist_grammar.rule_index("Scene", ["bg", "Digits"])]
    with pytest.raises(Exception):
        model.sequence_log_prob(prefix)
    lp = model.score_batch([prefix], allow_incomplete=True)
    assert np.isfinite(lp.value).all()


# -- normalization oracle ---------------------------------------------------


def enumerate_complete(grammar, t_max=10):
    """All complete rule sequences of a finite grammar, by DFS."""
    out = []

    def rec(prefix):
        d = Derivation(grammar).replay(prefix)
        if d.done:
            out.append(prefix)
            return
        if len(prefix) >= t_max:
            return
        for r in grammar.rules_for(d.top()):
            rec(prefix + [r])

    rec([])
    return out


def test_probabilities_sum_to_one():
    grammar = parse_grammar(TRUNCATED_DIGITS)
    model = make_model(grammar, seed=13)
    seqs = enumerate_complete(grammar)
    assert len(seqs) == 1 + 2 + 4 + 8  # 0..3 digits over 2 classes
    total = sum(np.exp(float(model.marginal_log_prob(s).value)) for s in seqs)
    assert abs(total - 1.0) <= 1e-6


# -- gradients --------------------------------------------------------------


def test_sequence_logprob_gradient_matches_finite_differences():
    err = diagnostics.model_grad_check(np.random.default_rng(7))
    assert err <= diagnostics.TOLERANCE


def test_score_batch_gradient_matches_single_path(mnist_grammar):
    model = make_model(mnist_grammar)
    rng = np.random.default_rng(14)
    seqs = [model.sample_complete(rng)[0] for _ in range(3)]

    opt = ad.Adam(model.params)
    opt.zero_grad()
    ad.backward(ad.reduce_sum(model.score_batch(seqs)))
    batched = [p.grad.copy() for p in model.params]

    opt.zero_grad()
    combined = model.sequence_log_prob(seqs[0])
    for s in seqs[1:]:
        combined = ad.add(combined, model.sequence_log_prob(s))
    ad.backward(combined)
    single = [p.grad.copy() for p in model.params]

    for a, b in zip(batched, single):
        assert np.allclose(a, b, atol=1e-10)


# -- persistence ------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, mnist_grammar):
    model = make_model(mnist_grammar, seed=15)
    path = tmp_path / "model.npz"
    model.save(path)
    other = make_model(mnist_grammar, seed=99)
    other.load(path)
    for pa, pb in zip(model.params, other.params):
        assert np.array_equal(pa.value, pb.value)


def test_checkpoint_grammar_mismatch_rejected(tmp_path, mnist_grammar):
    model = make_model(mnist_grammar)
    path = tmp_path / "model.npz"
    model.save(path)
    other_grammar = parse_grammar(open(bundled_grammar_path("mnist.g")).read() + "\n")
    other = make_model(other_grammar)
    with pytest.raises(ValueError, match="different grammar"):
        other.load(path)
