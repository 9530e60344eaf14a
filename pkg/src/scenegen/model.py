"""Autoregressive grammar-rule generator.

A single-layer gated recurrent (LSTM) cell consumes the one-hot of the
previous sampled rule and emits logits over all K rules; the derivation
stack supplies a validity mask at each step, so sampled sequences are
grammatical by construction.  Stochasticity lives in the rule sampling; a
small frozen latent set only seeds the initial hidden state, and sequence
probabilities marginalize over it.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .grammar import Derivation, DerivationError


@dataclass
class ModelConfig:
    hidden_size: int = 50
    embed_size: int = 16
    latent_size: int = 16
    n_latents: int = 1
    t_max: int = 25
    retry_cap: int = 50


@dataclass
class RuleSequence:
    rules: list
    step_log_probs: list = field(default_factory=list)
    complete: bool = True

    def __len__(self):
        return len(self.rules)

    @property
    def total_log_prob(self):
        return float(np.sum(np.asarray(self.step_log_probs)))


@dataclass
class SampleBatch:
    sequences: list
    rejections: int = 0
    truncated: list = field(default_factory=list)  # rejected prefixes, capped

    @property
    def r_reject(self):
        return self.rejections / max(1, len(self.sequences))


class RetryCapExceeded(RuntimeError):
    """The sampler failed to produce a complete derivation; the model has
    likely degenerated into unbounded recursion.  Carries the truncated
    prefixes and rejection count so a trainer can push the model back out
    of the degenerate region."""

    def __init__(self, message, truncated=(), rejections=0):
        super().__init__(message)
        self.truncated = list(truncated)
        self.rejections = rejections


class StructureModel:
    """Recurrent rule generator bound to one grammar."""

    PARAM_NAMES = ("embed", "w_x", "w_h", "b", "w_z", "w_out", "b_out")

    def __init__(self, grammar, config, rng):
        self.grammar = grammar
        self.config = config
        K, H, E, Zd = grammar.K, config.hidden_size, config.embed_size, config.latent_size

        def init(fan_in, *shape):
            a = 1.0 / np.sqrt(fan_in)
            return ad.parameter(rng.uniform(-a, a, size=shape))

        self.embed = init(K, K, E)
        self.w_x = init(E, E, 4 * H)
        self.w_h = init(H, H, 4 * H)
        self.b = ad.parameter(np.zeros(4 * H))
        self.w_z = init(Zd, Zd, H)
        self.w_out = init(H, H, K)
        self.b_out = ad.parameter(np.zeros(K))
        # latent set sampled once and frozen; not a trainable parameter
        self.latents = rng.standard_normal((config.n_latents, Zd))
        for name in self.PARAM_NAMES:
            getattr(self, name).name = name

    @property
    def params(self):
        return [getattr(self, name) for name in self.PARAM_NAMES]

    # -- differentiable batched forward ------------------------------------

    def _initial_state(self, z_index, batch):
        H = self.config.hidden_size
        z = self.latents[z_index][None, :]
        h0 = ad.tanh(ad.matmul(ad.constant(np.repeat(z, batch, axis=0)), self.w_z))
        c0 = ad.constant(np.zeros((batch, H)))
        return h0, c0

    def _cell(self, x, h, c):
        H = self.config.hidden_size
        gates = ad.add(ad.add(ad.matmul(x, self.w_x), ad.matmul(h, self.w_h)), self.b)
        gv = gates.value

        def part(lo, hi):
            idx = np.arange(lo, hi)
            return ad.Tensor(
                gv[:, lo:hi],
                parents=(gates,),
                backward=lambda g, t=None: _acc_cols(gates, lo, hi, g),
            )

        i = ad.sigmoid(part(0, H))
        f = ad.sigmoid(part(H, 2 * H))
        g = ad.tanh(part(2 * H, 3 * H))
        o = ad.sigmoid(part(3 * H, 4 * H))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new

    def _step_logits(self, prev_rules, h, c):
        """One recurrent step; prev_rules is an int array (or None at t=1)."""
        B = h.shape[0]
        if prev_rules is None:
            x = ad.constant(np.zeros((B, self.config.embed_size)))
        else:
            x = ad.gather_rows(self.embed, prev_rules)
        h, c = self._cell(x, h, c)
        logits = ad.add(ad.matmul(h, self.w_out), self.b_out)
        return logits, h, c

    # -- sampling ----------------------------------------------------------

    def sample_structure(self, rng, z_index=0, t_max=None):
        """Sample one rule sequence; incompleteness is flagged, not raised."""
        t_max = t_max or self.config.t_max
        d = Derivation(self.grammar)
        h, c = self._initial_state(z_index, 1)
        prev = None
        log_probs = []
        while not d.done and len(d.rules) < t_max:
            logits, h, c = self._step_logits(prev, h, c)
            mask = d.mask()[None, :]
            logp = ad.masked_log_softmax(logits, mask)
            probs = np.where(mask[0], np.exp(logp.value[0]), 0.0)
            r = int(rng.choice(self.grammar.K, p=probs / probs.sum()))
            d.step(r)
            log_probs.append(float(logp.value[0, r]))
            prev = np.array([r])
        return RuleSequence(rules=d.rules, step_log_probs=log_probs, complete=d.done)

    def sample_complete(self, rng, t_max=None, retry_cap=None):
        """Retry until a complete derivation; returns (sequence, rejections)."""
        cap = retry_cap or self.config.retry_cap
        rejections = 0
        for _ in range(cap):
            seq = self.sample_structure(rng, t_max=t_max)
            if seq.complete:
                return seq, rejections
            rejections += 1
        raise RetryCapExceeded(
            f"no complete derivation in {cap} attempts (t_max={t_max or self.config.t_max})"
        )

    def sample_batch(self, n, rng, t_max=None):
        """Fast lockstep batch sampler (plain numpy forward, no gradients).

        Incomplete derivations are rejected and redrawn; the rejection count
        feeds the termination penalty.
        """
        t_max = t_max or self.config.t_max
        done, truncated, rejections = [], [], 0
        rounds = 0
        while len(done) < n:
            rounds += 1
            if rounds > self.config.retry_cap:
                # Degenerate model: nearly all derivations hit t_max.  Return
                # the partial batch so the termination penalty can react; give
                # up only if there is nothing to train on.
                if len(done) >= 2:
                    break
                raise RetryCapExceeded(
                    f"batch sampler exceeded {self.config.retry_cap} rounds",
                    truncated=truncated, rejections=rejections,
                )
            want = n - len(done)
            seqs, cut = self._sample_round_np(want, rng, t_max)
            done.extend(seqs)
            rejections += len(cut)
            truncated.extend(cut[: n - len(truncated)])
        return SampleBatch(sequences=done, rejections=rejections, truncated=truncated)

    def _sample_round_np(self, batch, rng, t_max):
        K, H = self.grammar.K, self.config.hidden_size
        cfg = self.config
        z_idx = rng.integers(0, cfg.n_latents, size=batch)
        z = self.latents[z_idx]
        h = np.tanh(z @ self.w_z.value)
        c = np.zeros((batch, H))
        derivs = [Derivation(self.grammar) for _ in range(batch)]
        active = np.ones(batch, dtype=bool)
        x = np.zeros((batch, cfg.embed_size))
        for _ in range(t_max):
            gates = x @ self.w_x.value + h @ self.w_h.value + self.b.value
            i = _sigmoid_np(gates[:, :H])
            f = _sigmoid_np(gates[:, H : 2 * H])
            g = np.tanh(gates[:, 2 * H : 3 * H])
            o = _sigmoid_np(gates[:, 3 * H :])
            c = f * c + i * g
            h = o * np.tanh(c)
            logits = h @ self.w_out.value + self.b_out.value
            masks = np.zeros((batch, K), dtype=bool)
            for j, d in enumerate(derivs):
                if active[j] and not d.done:
                    masks[j] = d.mask()
                else:
                    masks[j, 0] = True  # dummy; row is ignored
            neg = np.where(masks, logits, -np.inf)
            gumbel = -np.log(-np.log(rng.uniform(size=(batch, K))))
            picks = np.argmax(neg + gumbel, axis=1)
            for j, d in enumerate(derivs):
                if active[j] and not d.done:
                    d.step(int(picks[j]))
            x = self.embed.value[picks]
            if all(d.done for j, d in enumerate(derivs) if active[j]):
                break
        complete, cut = [], []
        for d in derivs:
            if d.done:
                complete.append(RuleSequence(rules=d.rules, complete=True))
            else:
                cut.append(RuleSequence(rules=d.rules, complete=False))
        return complete, cut

    # -- scoring -----------------------------------------------------------

    def sequence_log_prob(self, seq, z_index=0):
        """Differentiable log q(T|z): replays the stack to rebuild masks."""
        rules = seq.rules if isinstance(seq, RuleSequence) else list(seq)
        d = Derivation(self.grammar)
        h, c = self._initial_state(z_index, 1)
        prev = None
        terms = []
        for r in rules:
            if d.done:
                raise DerivationError("sequence continues past a complete derivation")
            logits, h, c = self._step_logits(prev, h, c)
            logp = ad.masked_log_softmax(logits, d.mask()[None, :])
            d.step(r)  # validates r against the mask
            terms.append(ad.gather_rows(ad.reduce_sum(logp, axis=0), [r]))
            prev = np.array([r])
        if not d.done:
            raise DerivationError("incomplete sequence cannot be scored")
        return ad.reduce_sum(ad.concat(terms, axis=0))

    def marginal_log_prob(self, seq):
        """log q(T) = log-mean-exp of the per-latent conditionals."""
        conds = [
            self.sequence_log_prob(seq, z_index=zi)
            for zi in range(self.config.n_latents)
        ]
        if len(conds) == 1:
            return conds[0]
        return _log_mean_exp(conds)

    def score_batch(self, sequences, allow_incomplete=False):
        """Marginal log-probs of many sequences as one padded batched graph.

        Returns a Tensor of shape (len(sequences),).  With `allow_incomplete`
        the sequences may be truncated prefixes (used by the termination
        penalty); the result is then the log-probability of the prefix.
        """
        B = len(sequences)
        rules = [s.rules if isinstance(s, RuleSequence) else list(s) for s in sequences]
        L = max(len(r) for r in rules)
        K = self.grammar.K
        masks = np.zeros((L, B, K), dtype=bool)
        onehot = np.zeros((L, B, K))
        valid = np.zeros((L, B))
        prev = np.zeros((L, B), dtype=int)
        for j, rs in enumerate(rules):
            d = Derivation(self.grammar)
            for t, r in enumerate(rs):
                masks[t, j] = d.mask()
                d.step(r)
                onehot[t, j, r] = 1.0
                valid[t, j] = 1.0
                if t + 1 < L:
                    prev[t + 1, j] = r
            if not d.done and not allow_incomplete:
                raise DerivationError("incomplete sequence cannot be scored")
            masks[len(rs) :, j, 0] = True  # pad rows; zeroed by `valid`
        per_z = []
        for zi in range(self.config.n_latents):
            h, c = self._initial_state(zi, B)
            total = ad.constant(np.zeros(B))
            for t in range(L):
                logits, h, c = self._step_logits(prev[t] if t else None, h, c)
                logp = ad.masked_log_softmax(logits, masks[t])
                picked = ad.reduce_sum(ad.mul(logp, ad.constant(onehot[t])), axis=1)
                total = ad.add(total, ad.mul(picked, ad.constant(valid[t])))
            per_z.append(total)
        if len(per_z) == 1:
            return per_z[0]
        return _log_mean_exp(per_z)

    # -- persistence -------------------------------------------------------

    def state_arrays(self):
        arrays = {name: getattr(self, name).value for name in self.PARAM_NAMES}
        arrays["latents"] = self.latents
        return arrays

    def save(self, path):
        ad.save_checkpoint(
            path, self.state_arrays(), meta={"grammar_hash": self.grammar.source_hash()}
        )

    def load(self, path):
        expected = {k: v.shape for k, v in self.state_arrays().items()}
        arrays, meta = ad.load_checkpoint(path, expected_shapes=expected)
        if meta.get("grammar_hash") != self.grammar.source_hash():
            raise ValueError("checkpoint was trained against a different grammar")
        for name in self.PARAM_NAMES:
            getattr(self, name).value = arrays[name]
        self.latents = arrays["latents"]


def _acc_cols(tensor, lo, hi, g):
    if tensor.requires_grad:
        tensor.grad[:, lo:hi] += g


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def _log_mean_exp(tensors):
    """Elementwise log-mean-exp of same-shape tensors, max-shifted for
    stability (the shift is a constant, so gradients stay exact)."""
    shift = np.maximum.reduce([t.value for t in tensors])
    shifted = [ad.exp(ad.add(t, ad.constant(-shift))) for t in tensors]
    acc = shifted[0]
    for t in shifted[1:]:
        acc = ad.add(acc, t)
    return ad.add(ad.log(ad.scale(acc, 1.0 / len(tensors))), ad.constant(shift))


def init_model(grammar, config, rng):
    return StructureModel(grammar, config, rng)
