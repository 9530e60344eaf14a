"""Distribution-matching objective: KDE log-densities, per-sample reverse-KL
rewards, the REINFORCE step with moving-average baseline and termination
penalty, and the batch-level MMD objective used for comparison.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

REWARD_SCALE = 1e-2  # log-ratio magnitudes are large; keeps steps stable
PENALTY_WEIGHT = 1.0  # in scaled units the penalty weight equals REWARD_SCALE
REJECT_THRESHOLD = 1.0
SUPPRESSION_CAP = 100.0  # bound on the rejection-proportional prefix weight


class KdeModel:
    """Mean of multivariate normal kernels with bandwidth H = h*I (h = d
    by default, per the training objective)."""

    def __init__(self, support, bandwidth=None):
        support = np.atleast_2d(np.asarray(support, dtype=float))
        if len(support) < 1:
            raise ValueError("KDE needs at least one support point")
        self.support = support
        self.d = support.shape[1]
        self.bandwidth = float(bandwidth) if bandwidth is not None else float(self.d)
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        # log of (2*pi)^(-d/2) * det(hI)^(-1/2)
        self._log_norm = -0.5 * self.d * (np.log(2 * np.pi) + np.log(self.bandwidth))

    def log_density(self, queries, exclude_diagonal=False):
        """Log mean kernel value at each query row, via log-sum-exp."""
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if q.shape[1] != self.d:
            raise ValueError(f"query dim {q.shape[1]} != support dim {self.d}")
        sq = (
            (q * q).sum(axis=1)[:, None]
            + (self.support * self.support).sum(axis=1)[None, :]
            - 2.0 * q @ self.support.T
        )
        logk = self._log_norm - 0.5 * np.maximum(sq, 0.0) / self.bandwidth
        if exclude_diagonal:
            if q.shape[0] != len(self.support):
                raise ValueError("leave-one-out requires queries == support")
            np.fill_diagonal(logk, -np.inf)
        m = logk.max(axis=1)
        out = m + np.log(np.exp(logk - m[:, None]).sum(axis=1))
        n = len(self.support) - (1 if exclude_diagonal else 0)
        return out - np.log(n)


def kde_log_density(kde, query):
    out = kde.log_density(np.atleast_2d(query))
    return float(out[0]) if np.asarray(query).ndim == 1 else out


@dataclass
class RewardBatch:
    values: np.ndarray  # scaled per-sample reward, lower is better
    log_q: np.ndarray
    log_p: np.ndarray
    penalty: float = 0.0  # scaled batch-level termination penalty

    @property
    def total(self):
        return self.values + self.penalty


def reward(generated_feats, real_feats, leave_one_out=False, scale=REWARD_SCALE,
           bandwidth=None):
    """Per-sample log q~ - log p~ over the two batches, scaled.

    The generated-batch KDE includes each evaluated sample in its own
    support set unless `leave_one_out` is set.  `bandwidth` overrides the
    default kernel width (the feature dimension) for both density models.
    """
    gen = np.atleast_2d(generated_feats)
    real = np.atleast_2d(real_feats)
    if len(gen) < 2 or len(real) < 2:
        raise ValueError("reward needs at least two samples per batch")
    log_q = KdeModel(gen, bandwidth=bandwidth).log_density(
        gen, exclude_diagonal=leave_one_out)
    log_p = KdeModel(real, bandwidth=bandwidth).log_density(gen)
    return RewardBatch(values=scale * (log_q - log_p), log_q=log_q, log_p=log_p)


def termination_penalty(r_reject, weight=PENALTY_WEIGHT, threshold=REJECT_THRESHOLD,
                        scale=REWARD_SCALE):
    """Scaled batch-level penalty: active only above the rejection threshold."""
    return scale * weight * (1.0 if r_reject > threshold else 0.0)


@dataclass
class BaselineState:
    value: float = 0.0
    alpha: float = 0.05
    initialized: bool = False

    def update(self, mean_reward):
        if not self.initialized:
            self.value = mean_reward
            self.initialized = True
        else:
            self.value = (1 - self.alpha) * self.value + self.alpha * mean_reward


def reinforce_loss(log_probs, rewards, baseline, r_reject=0.0,
                   truncated_log_probs=None):
    """Surrogate loss whose gradient is the scaled REINFORCE estimator.

    `log_probs` is the (B,) tensor of marginal sequence log-probabilities;
    the advantage is (reward + penalty - baseline), held constant w.r.t.
    model parameters.  The baseline is updated after the advantage is taken.

    When the rejection rate crosses the penalty threshold, the scaled
    penalty also acts as a positive advantage on the truncated prefixes
    (`truncated_log_probs`), directly lowering the probability of
    derivations that failed to terminate within the step budget.  The
    prefix weight grows with the rejection rate (capped): with a shared
    batch reward a rejection spike makes the whole batch look bad, which
    suppresses the completed sequences too and feeds the spike, so the
    restoring force has to outgrow the advantage noise to win.
    """
    penalty = termination_penalty(r_reject)
    total = rewards.values + penalty
    if not np.isfinite(total).all():
        raise ad.AutodiffError("non-finite reward; aborting the step")
    advantage = total - baseline.value
    loss = ad.reduce_mean(ad.mul(log_probs, ad.constant(advantage)))
    if penalty > 0.0 and truncated_log_probs is not None:
        weight = penalty * min(r_reject, SUPPRESSION_CAP)
        loss = ad.add(loss, ad.scale(ad.reduce_mean(truncated_log_probs), weight))
    baseline.update(float(total.mean()))
    return loss


def reinforce_step(model, opt, sequences, rewards, baseline, r_reject=0.0,
                   truncated=None):
    """One gradient accumulation + optimizer step; returns the loss value."""
    opt.zero_grad()
    log_probs = model.score_batch(sequences)
    truncated_log_probs = None
    if truncated and termination_penalty(r_reject) > 0.0:
        truncated_log_probs = model.score_batch(truncated, allow_incomplete=True)
    loss = reinforce_loss(log_probs, rewards, baseline, r_reject=r_reject,
                          truncated_log_probs=truncated_log_probs)
    ad.backward(loss)
    opt.step()
    return float(loss.value)


def suppression_step(model, opt, truncated, r_reject):
    """Recovery step when the sampler produced no usable batch: only the
    termination penalty acts, lowering the truncated prefixes' probability
    with the same rejection-proportional weight reinforce_loss uses."""
    opt.zero_grad()
    trunc_log_probs = model.score_batch(truncated, allow_incomplete=True)
    weight = termination_penalty(r_reject) * min(r_reject, SUPPRESSION_CAP)
    loss = ad.scale(ad.reduce_mean(trunc_log_probs), weight)
    ad.backward(loss)
    opt.step()
    return float(loss.value)


def _pairwise_sq(x, y):
    return (
        (x * x).sum(axis=1)[:, None]
        + (y * y).sum(axis=1)[None, :]
        - 2.0 * x @ y.T
    )


def median_bandwidth_sq(x, y):
    """Median heuristic over pooled pairwise squared distances."""
    z = np.vstack([x, y])
    sq = _pairwise_sq(z, z)
    upper = sq[np.triu_indices(len(z), k=1)]
    med = float(np.median(upper)) if len(upper) else 1.0
    return med if med > 0 else 1.0


def mmd2(generated_feats, real_feats, bandwidth_sq=None):
    """Biased squared-MMD with a Gaussian kernel (single batch-level score)."""
    x = np.atleast_2d(generated_feats)
    y = np.atleast_2d(real_feats)
    if bandwidth_sq is None:
        bandwidth_sq = median_bandwidth_sq(x, y)
    c = -0.5 / bandwidth_sq
    kxx = np.exp(c * np.maximum(_pairwise_sq(x, x), 0.0)).mean()
    kyy = np.exp(c * np.maximum(_pairwise_sq(y, y), 0.0)).mean()
    kxy = np.exp(c * np.maximum(_pairwise_sq(x, y), 0.0)).mean()
    return float(kxx + kyy - 2.0 * kxy)


def mmd_reward(generated_feats, real_feats, scale=REWARD_SCALE):
    """The MMD objective as a shared reward: identical for every sample,
    which is exactly the credit-assignment deficiency under comparison.

    The same 1e-2 loss-gradient scale is applied as for the log-ratio
    reward, keeping the two objectives' REINFORCE step sizes comparable;
    unscaled, the shared advantage noise dwarfs the termination penalty
    and training avalanches into non-terminating recursion."""
    value = mmd2(generated_feats, real_feats)
    m = len(np.atleast_2d(generated_feats))
    shared = np.full(m, scale * value)
    return RewardBatch(values=shared, log_q=shared, log_p=np.zeros(m))
