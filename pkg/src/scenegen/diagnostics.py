"""Finite-difference gradient checks for every registered op and for the
end-to-end sequence scorer."""

import numpy as np

from . import autodiff as ad
from .grammar import parse_grammar
from .model import ModelConfig, StructureModel

TOLERANCE = 1e-4

_TINY_GRAMMAR = """
S -> A A | a ;
A -> a | b | eps ;
@renderable a b ;
"""


def _rand(rng, *shape):
    return ad.parameter(rng.standard_normal(shape))


def op_grad_checks(rng):
    """Yield (op name, max relative error) for the whole op set."""
    a = _rand(rng, 4, 3)
    b = _rand(rng, 3, 5)
    yield "matmul", ad.grad_check(lambda: ad.reduce_sum(ad.matmul(a, b)), [a, b])

    x = _rand(rng, 4, 5)
    y = _rand(rng, 4, 5)
    bias = _rand(rng, 5)
    yield "add", ad.grad_check(lambda: ad.reduce_sum(ad.add(x, y)), [x, y])
    yield "add_bias", ad.grad_check(lambda: ad.reduce_sum(ad.add(x, bias)), [x, bias])
    yield "mul", ad.grad_check(lambda: ad.reduce_sum(ad.mul(x, y)), [x, y])
    yield "scale", ad.grad_check(lambda: ad.reduce_sum(ad.scale(x, -2.5)), [x])
    yield "tanh", ad.grad_check(lambda: ad.reduce_sum(ad.tanh(x)), [x])
    yield "sigmoid", ad.grad_check(lambda: ad.reduce_sum(ad.sigmoid(x)), [x])
    # keep relu inputs away from the kink
    xr = ad.parameter(np.where(np.abs(x.value) < 0.1, 0.5, x.value))
    yield "relu", ad.grad_check(lambda: ad.reduce_sum(ad.relu(xr)), [xr])
    yield "exp", ad.grad_check(lambda: ad.reduce_sum(ad.exp(x)), [x])
    xp = ad.parameter(np.abs(x.value) + 0.5)
    yield "log", ad.grad_check(lambda: ad.reduce_sum(ad.log(xp)), [xp])
    yield "concat", ad.grad_check(
        lambda: ad.reduce_sum(ad.concat([x, y], axis=1)), [x, y]
    )
    table = _rand(rng, 6, 3)
    idx = np.array([0, 2, 2, 5])
    yield "embed_lookup", ad.grad_check(
        lambda: ad.reduce_sum(ad.gather_rows(table, idx)), [table]
    )
    yield "reduce_sum_axis", ad.grad_check(
        lambda: ad.reduce_sum(ad.reduce_sum(x, axis=1)), [x]
    )
    yield "reduce_mean", ad.grad_check(lambda: ad.scale(ad.reduce_mean(x), 3.0), [x])

    logits = _rand(rng, 3, 6)
    mask = rng.uniform(size=(3, 6)) > 0.4
    mask[:, 0] = True
    weights = rng.standard_normal((3, 6)) * mask
    yield "masked_log_softmax", ad.grad_check(
        lambda: ad.reduce_sum(
            ad.mul(ad.masked_log_softmax(logits, mask), ad.constant(weights))
        ),
        [logits],
    )


def model_grad_check(rng):
    """End-to-end check of the differentiable sequence scorer."""
    grammar = parse_grammar(_TINY_GRAMMAR)
    config = ModelConfig(hidden_size=6, embed_size=4, latent_size=3, n_latents=2, t_max=8)
    model = StructureModel(grammar, config, rng)
    seq, _ = model.sample_complete(rng)
    return ad.grad_check(lambda: model.marginal_log_prob(seq), model.params)


def run_all(rng=None):
    rng = rng or np.random.default_rng(7)
    results = dict(op_grad_checks(rng))
    results["sequence_log_prob"] = model_grad_check(rng)
    return results
