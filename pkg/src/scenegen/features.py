"""Feature extractors for distribution matching.

Two interchangeable implementations behind one interface: deterministic
handcrafted structural features (default) and a small trained MLP whose
penultimate activations are used once its auxiliary heads reach the target
accuracy.  Either way the extractor is frozen, with fitted per-dimension
normalization, before structure training starts.
"""

import hashlib

import numpy as np

from . import autodiff as ad

GRID = 8
PROFILE_BINS = 8
POOL = 16  # trained extractor input: POOL x POOL mean-pooled image


def _to_gray(image):
    return image if image.ndim == 2 else image.mean(axis=2)


def _pool(gray, bins):
    size = gray.shape[0]
    if size % bins:
        raise ValueError(f"canvas size {size} not divisible by {bins}")
    k = size // bins
    return gray.reshape(bins, k, bins, k).mean(axis=(1, 3))


class FeatureExtractor:
    """Common surface: fit normalization once, then pure extraction."""

    kind = None

    def __init__(self):
        self._mean = None
        self._scale = None

    @property
    def d(self):
        raise NotImplementedError

    def raw(self, image):
        raise NotImplementedError

    def fit_normalizer(self, images):
        raws = np.stack([self.raw(im) for im in images])
        self._mean = raws.mean(axis=0)
        std = raws.std(axis=0)
        self._scale = np.where(std > 1e-8, std, 1.0)

    @property
    def frozen(self):
        return self._mean is not None

    def extract(self, image):
        if not self.frozen:
            raise RuntimeError("extractor not frozen: call fit_normalizer first")
        return (self.raw(image) - self._mean) / self._scale

    def extract_batch(self, images):
        return np.stack([self.extract(im) for im in images])

    def state_hash(self):
        h = hashlib.sha256()
        for arr in self._state_arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def _state_arrays(self):
        return [self._mean, self._scale]


class HandcraftedExtractor(FeatureExtractor):
    """Grid occupancy + total foreground mass + pooled row/column profiles."""

    kind = "handcrafted"

    @property
    def d(self):
        return GRID * GRID + 1 + 2 * PROFILE_BINS

    def raw(self, image):
        gray = _to_gray(image)
        cells = _pool(gray, GRID).ravel()
        mass = gray.sum() / gray.size
        rows = _pool_profile(gray.mean(axis=1))
        cols = _pool_profile(gray.mean(axis=0))
        return np.concatenate([cells, [mass], rows, cols])


def _pool_profile(profile):
    k = profile.size // PROFILE_BINS
    return profile[: k * PROFILE_BINS].reshape(PROFILE_BINS, k).mean(axis=1)


class TrainedExtractor(FeatureExtractor):
    """MLP over the mean-pooled image; features are the penultimate layer."""

    kind = "trained"

    def __init__(self, scenario, hidden=64, rng=None):
        super().__init__()
        self.scenario = scenario
        self.hidden = hidden
        out = 10 if scenario == "mnist" else 2 * 25  # presence vs count heads
        rng = rng or np.random.default_rng(0)

        def init(fan_in, *shape):
            a = 1.0 / np.sqrt(fan_in)
            return ad.parameter(rng.uniform(-a, a, size=shape))

        n_in = POOL * POOL
        self.w1 = init(n_in, n_in, 128)
        self.b1 = ad.parameter(np.zeros(128))
        self.w2 = init(128, 128, hidden)
        self.b2 = ad.parameter(np.zeros(hidden))
        self.w3 = init(hidden, hidden, out)
        self.b3 = ad.parameter(np.zeros(out))

    @property
    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    @property
    def d(self):
        return self.hidden

    def _inputs(self, images):
        return np.stack([_pool(_to_gray(im), POOL).ravel() for im in images])

    def _forward(self, x):
        h1 = ad.relu(ad.add(ad.matmul(ad.constant(x), self.w1), self.b1))
        h2 = ad.relu(ad.add(ad.matmul(h1, self.w2), self.b2))
        logits = ad.add(ad.matmul(h2, self.w3), self.b3)
        return h2, logits

    def raw(self, image):
        x = self._inputs([image])
        h2, _ = self._forward(x)
        return h2.value[0]

    def _state_arrays(self):
        return [p.value for p in self.params] + super()._state_arrays()


def presence_targets(label_sets):
    """Binary digit-class presence per image, from render labels."""
    out = np.zeros((len(label_sets), 10))
    for i, labels in enumerate(label_sets):
        for lab in labels:
            out[i, int(lab.cls[1:])] = 1.0
    return out


def count_targets(label_sets, cap=24):
    """(car count, road count) per image, clipped to the head range."""
    out = np.zeros((len(label_sets), 2), dtype=int)
    for i, labels in enumerate(label_sets):
        out[i, 0] = min(cap, sum(1 for l in labels if l.cls == "car"))
        out[i, 1] = min(cap, sum(1 for l in labels if l.cls == "Road"))
    return out


def _bce_loss(logits, targets):
    # mean binary cross-entropy over classes; eps keeps log finite
    p = ad.sigmoid(logits)
    t = ad.constant(targets)
    one = ad.constant(np.ones_like(targets))
    eps = 1e-9
    ll = ad.add(
        ad.mul(t, ad.log(ad.add(p, ad.constant(np.full_like(targets, eps))))),
        ad.mul(ad.sub(one, t),
               ad.log(ad.add(ad.sub(one, p), ad.constant(np.full_like(targets, eps))))),
    )
    return ad.scale(ad.reduce_mean(ll), -1.0)


def _count_loss(logits, targets, cap=24):
    B = targets.shape[0]
    full = np.ones((B, cap + 1), dtype=bool)
    losses = []
    for head in range(2):
        part = ad.Tensor(
            logits.value[:, head * (cap + 1) : (head + 1) * (cap + 1)],
            parents=(logits,),
            backward=_col_slice_backward(logits, head * (cap + 1), (head + 1) * (cap + 1)),
        )
        logp = ad.masked_log_softmax(part, full)
        onehot = np.zeros((B, cap + 1))
        onehot[np.arange(B), targets[:, head]] = 1.0
        picked = ad.reduce_sum(ad.mul(logp, ad.constant(onehot)), axis=1)
        losses.append(ad.scale(ad.reduce_mean(picked), -1.0))
    return ad.scale(ad.add(losses[0], losses[1]), 0.5)


def _col_slice_backward(tensor, lo, hi):
    def backward(g, t=None):
        if tensor.requires_grad:
            tensor.grad[:, lo:hi] += g

    return backward


def _accuracy(extractor, x, targets):
    _, logits = extractor._forward(x)
    if extractor.scenario == "mnist":
        pred = logits.value > 0
        return float((pred == (targets > 0.5)).mean())
    cap = 24
    accs = []
    for head in range(2):
        part = logits.value[:, head * (cap + 1) : (head + 1) * (cap + 1)]
        accs.append(float((part.argmax(axis=1) == targets[:, head]).mean()))
    return float(np.mean(accs))


def train_extractor(images, label_sets, scenario, rng, target_accuracy=0.75,
                    max_epochs=40, batch_size=50, lr=1e-3, holdout_frac=0.1):
    """Fit the MLP on prior data until the auxiliary heads reach the target
    accuracy (or the epoch cap, with a warning flag), then freeze."""
    ex = TrainedExtractor(scenario, rng=rng)
    x = ex._inputs(images)
    if scenario == "mnist":
        y = presence_targets(label_sets)
        loss_fn = _bce_loss
    else:
        y = count_targets(label_sets)
        loss_fn = _count_loss
    n_hold = max(1, int(len(images) * holdout_frac))
    x_tr, y_tr = x[:-n_hold], y[:-n_hold]
    x_ho, y_ho = x[-n_hold:], y[-n_hold:]
    opt = ad.Adam(ex.params, lr=lr)
    reached = False
    accuracy = 0.0
    for _ in range(max_epochs):
        order = rng.permutation(len(x_tr))
        for lo in range(0, len(x_tr), batch_size):
            idx = order[lo : lo + batch_size]
            opt.zero_grad()
            _, logits = ex._forward(x_tr[idx])
            loss = loss_fn(logits, y_tr[idx])
            ad.backward(loss)
            opt.step()
        accuracy = _accuracy(ex, x_ho, y_ho)
        if accuracy >= target_accuracy:
            reached = True
            break
    ex.fit_normalizer(images[: min(1000, len(images))])
    ex.holdout_accuracy = accuracy
    ex.reached_target = reached
    return ex


def make_extractor(kind, scenario):
    if kind == "handcrafted":
        return HandcraftedExtractor()
    if kind == "trained":
        return TrainedExtractor(scenario)
    raise KeyError(f"unknown extractor kind {kind!r}")
