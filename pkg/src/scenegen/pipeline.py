"""Run orchestration: configuration, pretraining, structure training, and
evaluation with histogram reports.

A run config is a plain key=value text file; every field of RunConfig is a
valid key.  Outputs land under `out_dir`: metadata.json, epochs.csv,
hist_*.csv / hist_*.svg, checkpoints/ and optional samples/.
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import objective
from .features import HandcraftedExtractor, train_extractor
from .grammar import parse_grammar, sequence_to_scene_graph
from .model import ModelConfig, RetryCapExceeded, StructureModel
from .render import RenderConfig, render
from .scene import (
    digit_classes,
    digit_count,
    make_prior,
    make_target,
    road_car_counts,
    sample_parameters,
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str = "mnist"
    grammar: str = ""  # path; defaults to the bundled grammar for the scenario
    prior: str = ""  # defaults to the scenario prior
    target: str = ""  # defaults to the scenario target
    target_count: str = "binomial"  # digit-count distribution of the mnist target
    canvas_size: int = 64
    glyph_frac: float = 0.0  # 0 -> native 28 px glyphs on the configured canvas
    t_max: int = 0  # 0 -> scenario default (mnist 25, aerial 60)
    m: int = 200
    l: int = 200
    epochs: int = 20
    steps_per_epoch: int = 0  # 0 -> target_pool // l
    target_pool: int = 5000
    lr: float = 1e-4
    pretrain_epochs: int = 10
    pretrain_samples: int = 5000
    pretrain_batch: int = 100
    pretrain_lr: float = 1e-3
    objective: str = "kde-kl"
    kde_bandwidth: float = 0.0  # 0 -> feature dimension (the default kernel)
    extractor: str = "handcrafted"
    normalizer_samples: int = 1000
    hidden_size: int = 50
    embed_size: int = 16
    latent_size: int = 16
    n_latents: int = 1
    seed: int = 0
    workers: int = 1
    out_dir: str = "out"

    def resolved(self):
        cfg = dataclasses.replace(self)
        if cfg.scenario not in ("mnist", "aerial"):
            raise ConfigError(f"unknown scenario {cfg.scenario!r}")
        if not cfg.grammar:
            cfg.grammar = bundled_grammar_path(
                "mnist.g" if cfg.scenario == "mnist" else "aerial.g"
            )
        if not cfg.prior:
            cfg.prior = cfg.scenario
        if not cfg.target:
            cfg.target = "mnist_row" if cfg.scenario == "mnist" else "aerial_context"
        if not cfg.t_max:
            cfg.t_max = 25 if cfg.scenario == "mnist" else 60
        if not cfg.glyph_frac:
            cfg.glyph_frac = min(0.5, 28.0 / cfg.canvas_size)
        if not cfg.steps_per_epoch:
            cfg.steps_per_epoch = max(1, cfg.target_pool // cfg.l)
        if cfg.m < 2 or cfg.l < 2:
            raise ConfigError("batch sizes m and l must be >= 2")
        if cfg.objective not in ("kde-kl", "mmd"):
            raise ConfigError(f"unknown objective {cfg.objective!r}")
        if cfg.extractor not in ("handcrafted", "trained"):
            raise ConfigError(f"unknown extractor {cfg.extractor!r}")
        if not os.path.exists(cfg.grammar):
            raise ConfigError(f"grammar file not found: {cfg.grammar}")
        return cfg


def bundled_grammar_path(name):
    return os.path.join(os.path.dirname(__file__), "grammars", name)


def bundled_config_path(name):
    return os.path.join(os.path.dirname(__file__), "configs", name)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def load_config(path, overrides=None):
    values = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}")
    for ln, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    values.update(overrides or {})
    kwargs = {}
    for key, value in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        typ = _FIELD_TYPES[key]
        caster = typ if isinstance(typ, type) else {"int": int, "float": float, "str": str}[typ]
        try:
            kwargs[key] = caster(value)
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {value!r}")
    return RunConfig(**kwargs).resolved()


# ---------------------------------------------------------------------------
# run context


class Run:
    """Shared state for one configured run: grammar, model, samplers, RNGs."""

    def __init__(self, config):
        self.config = config
        with open(config.grammar) as f:
            self.grammar = parse_grammar(f.read())
        seeds = np.random.SeedSequence(config.seed).spawn(5)
        self.rng_init, self.rng_pretrain, self.rng_target, self.rng_train, self.rng_eval = (
            np.random.default_rng(s) for s in seeds
        )
        self.model = StructureModel(
            self.grammar,
            ModelConfig(
                hidden_size=config.hidden_size,
                embed_size=config.embed_size,
                latent_size=config.latent_size,
                n_latents=config.n_latents,
                t_max=config.t_max,
            ),
            self.rng_init,
        )
        self.prior = make_prior(config.prior, self.grammar)
        self.target = make_target(config.target, config.target_count)
        self.render_config = RenderConfig(
            scenario=config.scenario,
            canvas_size=config.canvas_size,
            glyph_frac=config.glyph_frac,
        )
        self.extractor = None

    def prior_graph(self, rng):
        g = sequence_to_scene_graph(self.grammar, self.prior.sample(rng))
        return sample_parameters(g, self.config.scenario, rng)

    def render_graphs(self, graphs):
        return [render(g, self.render_config) for g in graphs]

    def sequences_to_images(self, sequences, rng):
        graphs = []
        for seq in sequences:
            assert seq.complete, "invalid structure reached the render batch"
            g = sequence_to_scene_graph(self.grammar, seq.rules)
            graphs.append(sample_parameters(g, self.config.scenario, rng))
        return graphs, [out.image for out in self.render_graphs(graphs)]


# ---------------------------------------------------------------------------
# pretraining


def pretrain(run, log=None):
    """MLE of the model on prior-sampled structures (supplement recipe)."""
    cfg = run.config
    rng = run.rng_pretrain
    sequences = [run.prior.sample(rng) for _ in range(cfg.pretrain_samples)]
    opt = ad.Adam(run.model.params, lr=cfg.pretrain_lr)
    history = []
    worse = 0
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(len(sequences))
        losses = []
        for lo in range(0, len(sequences), cfg.pretrain_batch):
            batch = [sequences[i] for i in order[lo : lo + cfg.pretrain_batch]]
            opt.zero_grad()
            nll = ad.scale(ad.reduce_mean(run.model.score_batch(batch)), -1.0)
            ad.backward(nll)
            opt.step()
            losses.append(float(nll.value))
        epoch_nll = float(np.mean(losses))
        history.append(epoch_nll)
        if log:
            log(f"pretrain epoch {epoch}: nll {epoch_nll:.4f}")
        worse = worse + 1 if len(history) > 1 and epoch_nll > history[-2] else 0
        if worse >= 3:
            raise RuntimeError(
                f"pretraining diverged: NLL rose 3 consecutive epochs {history[-4:]}"
            )
    return history


# ---------------------------------------------------------------------------
# structure training


def build_target_pool(run):
    """Fixed pool of pre-rendered target images, per-epoch subsampled."""
    graphs = run.target.sample(run.config.target_pool, run.rng_target)
    return [render(g, run.render_config).image for g in graphs]


def fit_extractor(run, log=None):
    """Build and freeze the feature extractor on prior data."""
    cfg = run.config
    rng = run.rng_target
    if cfg.extractor == "handcrafted":
        ex = HandcraftedExtractor()
        images = [
            render(run.prior_graph(rng), run.render_config).image
            for _ in range(cfg.normalizer_samples)
        ]
        ex.fit_normalizer(images)
    else:
        outs = [
            render(run.prior_graph(rng), run.render_config)
            for _ in range(cfg.pretrain_samples)
        ]
        ex = train_extractor(
            [o.image for o in outs], [o.labels for o in outs], cfg.scenario, rng
        )
        if log and not ex.reached_target:
            log(f"warning: extractor accuracy {ex.holdout_accuracy:.3f} below target")
    run.extractor = ex
    return ex


def train(run, target_images=None, log=None):
    """REINFORCE training against the frozen target pool; returns epoch rows."""
    cfg = run.config
    rng = run.rng_train
    if run.extractor is None:
        fit_extractor(run, log=log)
    if target_images is None:
        target_images = build_target_pool(run)
    pool_feats = run.extractor.extract_batch(target_images)
    extractor_hash = run.extractor.state_hash()
    opt = ad.Adam(run.model.params, lr=cfg.lr)
    baseline = objective.BaselineState()

    def capture():
        return (
            [p.value.copy() for p in run.model.params],
            {i: m.copy() for i, m in opt.state.m.items()},
            {i: v.copy() for i, v in opt.state.v.items()},
            opt.state.step_count,
        )

    def restore(snap):
        values, ms, vs, t = snap
        for p, val in zip(run.model.params, values):
            p.value[...] = val
        opt.state.m = {i: m.copy() for i, m in ms.items()}
        opt.state.v = {i: v.copy() for i, v in vs.items()}
        opt.state.step_count = t

    snapshot = None
    rows = []
    for epoch in range(cfg.epochs):
        rewards_acc, rejects, penalties, lengths = [], [], 0, []
        for _ in range(cfg.steps_per_epoch):
            try:
                batch = run.model.sample_batch(cfg.m, rng, t_max=cfg.t_max)
            except RetryCapExceeded as exc:
                # The model avalanched into (near-)total non-termination; a
                # collapsed state cannot be escaped by descent in reasonable
                # time, so roll back to the last samplable parameters and
                # spend this step on the penalty alone, pushing the prefixes
                # that refused to terminate back down.
                if snapshot is not None:
                    restore(snapshot)
                r_reject = exc.rejections / cfg.m
                objective.suppression_step(run.model, opt,
                                           exc.truncated[: cfg.m], r_reject)
                rewards_acc.append(baseline.value)
                rejects.append(r_reject)
                penalties += 1
                lengths.extend(len(s) for s in exc.truncated[: cfg.m])
                continue
            snapshot = capture()
            _, images = run.sequences_to_images(batch.sequences, rng)
            feats = run.extractor.extract_batch(images)
            real = pool_feats[rng.choice(len(pool_feats), size=cfg.l, replace=False)]
            if cfg.objective == "kde-kl":
                rew = objective.reward(feats, real,
                                       bandwidth=cfg.kde_bandwidth or None)
            else:
                rew = objective.mmd_reward(feats, real)
            objective.reinforce_step(
                run.model, opt, batch.sequences, rew, baseline,
                r_reject=batch.r_reject, truncated=batch.truncated,
            )
            rewards_acc.append(float(rew.values.mean()))
            rejects.append(batch.r_reject)
            penalties += int(objective.termination_penalty(batch.r_reject) > 0)
            lengths.extend(len(s) for s in batch.sequences)
        assert run.extractor.state_hash() == extractor_hash, "extractor changed mid-run"
        rows.append(
            {
                "epoch": epoch,
                "mean_reward": float(np.mean(rewards_acc)),
                "baseline": baseline.value,
                "r_reject": float(np.mean(rejects)),
                "penalty_steps": penalties,
                "mean_len": float(np.mean(lengths)),
            }
        )
        if log:
            log(
                "epoch {epoch}: reward {mean_reward:.5f} baseline {baseline:.5f} "
                "r_reject {r_reject:.3f} len {mean_len:.1f}".format(**rows[-1])
            )
    return rows


# ---------------------------------------------------------------------------
# evaluation


def structure_stats(graphs, scenario, max_count=None):
    """Count histograms and class frequencies of a set of scene graphs."""
    if scenario == "mnist":
        counts = [digit_count(g) for g in graphs]
        classes = np.zeros(10)
        for g in graphs:
            for c in digit_classes(g):
                classes[c] += 1
        hist = np.bincount(counts, minlength=(max_count or 0) + 1)
        return {"count_hist": hist, "class_freq": classes, "counts": counts}
    road_counts, cars_by_index = [], {}
    for g in graphs:
        per_road = road_car_counts(g)
        road_counts.append(len(per_road))
        for i, c in enumerate(per_road):
            cars_by_index.setdefault(i + 1, []).append(c)
    return {
        "count_hist": np.bincount(road_counts, minlength=(max_count or 0) + 1),
        "cars_by_road": {
            i: float(np.mean(v)) for i, v in sorted(cars_by_index.items())
        },
        "counts": road_counts,
    }


def tv_distance(hist_a, hist_b):
    """Total variation between two count histograms (any supports)."""
    n = max(len(hist_a), len(hist_b))
    pa = np.zeros(n)
    pb = np.zeros(n)
    pa[: len(hist_a)] = hist_a
    pb[: len(hist_b)] = hist_b
    pa = pa / pa.sum()
    pb = pb / pb.sum()
    return 0.5 * float(np.abs(pa - pb).sum())


def chi_square(observed, reference):
    """Chi-square statistic of observed counts against reference proportions."""
    n = max(len(observed), len(reference))
    obs = np.zeros(n)
    ref = np.zeros(n)
    obs[: len(observed)] = observed
    ref[: len(reference)] = reference
    expected = ref / ref.sum() * obs.sum()
    keep = expected > 0
    if not np.all(obs[~keep] == 0):
        return float("inf")
    return float(((obs[keep] - expected[keep]) ** 2 / expected[keep]).sum())


def sample_model_graphs(run, n, rng=None):
    rng = rng if rng is not None else run.rng_eval
    batch = run.model.sample_batch(n, rng, t_max=run.config.t_max)
    return [sequence_to_scene_graph(run.grammar, s.rules) for s in batch.sequences]


def evaluate(run, n_samples=1000, out_dir=None, reference_graphs=None):
    """Histograms and distances of model samples against the target."""
    if n_samples < 1:
        raise ConfigError("evaluation needs at least one sample")
    model_graphs = sample_model_graphs(run, n_samples)
    if reference_graphs is None:
        reference_graphs = run.target.sample(n_samples, run.rng_eval)
    scenario = run.config.scenario
    model_stats = structure_stats(model_graphs, scenario)
    ref_stats = structure_stats(reference_graphs, scenario)
    summary = {
        "scenario": scenario,
        "n_samples": n_samples,
        "tv_count": tv_distance(model_stats["count_hist"], ref_stats["count_hist"]),
        "chi_square_count": chi_square(
            model_stats["count_hist"], ref_stats["count_hist"]
        ),
    }
    if scenario == "aerial":
        summary["cars_by_road_model"] = model_stats["cars_by_road"]
        summary["cars_by_road_target"] = ref_stats["cars_by_road"]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_hist_report(
            os.path.join(out_dir, "hist_count"),
            model_stats["count_hist"],
            ref_stats["count_hist"],
            title=f"{scenario}: object count",
        )
        if scenario == "mnist":
            _write_hist_report(
                os.path.join(out_dir, "hist_class"),
                model_stats["class_freq"],
                ref_stats["class_freq"],
                title="mnist: digit class frequency",
            )
        with open(os.path.join(out_dir, "eval_summary.json"), "w") as f:
            json.dump(summary, f, indent=1, sort_keys=True)
    return summary, model_stats, ref_stats


# ---------------------------------------------------------------------------
# reports


def write_epochs_csv(path, rows):
    cols = ["epoch", "mean_reward", "baseline", "r_reject", "penalty_steps", "mean_len"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(x):
    return str(x) if isinstance(x, int) else format(float(x), ".10g")


def _write_hist_report(stem, model_hist, ref_hist, title=""):
    n = max(len(model_hist), len(ref_hist))
    mh = np.zeros(n)
    rh = np.zeros(n)
    mh[: len(model_hist)] = model_hist
    rh[: len(ref_hist)] = ref_hist
    mh = mh / max(1.0, mh.sum())
    rh = rh / max(1.0, rh.sum())
    with open(stem + ".csv", "w") as f:
        f.write("bin,model,reference\n")
        for i in range(n):
            f.write(f"{i},{_fmt(mh[i])},{_fmt(rh[i])}\n")
    write_svg_bars(stem + ".svg", {"model": mh, "reference": rh}, title=title)


_SERIES_COLORS = ("#4878cf", "#d65f5f", "#6acc65")


def write_svg_bars(path, series, title="", width=640, height=320):
    """Grouped bar chart of one or more equal-length series."""
    names = list(series)
    n = len(next(iter(series.values())))
    top = max(1e-12, max(max(v) for v in series.values()))
    margin, plot_h = 40, height - 80
    group_w = (width - 2 * margin) / max(1, n)
    bar_w = group_w * 0.8 / len(names)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width/2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    for si, name in enumerate(names):
        color = _SERIES_COLORS[si % len(_SERIES_COLORS)]
        parts.append(
            f'<text x="{margin + 90*si}" y="{height-8}" fill="{color}" font-size="12">{name}</text>'
        )
        for i, v in enumerate(series[name]):
            h = plot_h * float(v) / top
            x = margin + i * group_w + si * bar_w
            y = 40 + plot_h - h
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{h:.1f}" fill="{color}"/>'
            )
    for i in range(n):
        parts.append(
            f'<text x="{margin + (i+0.4)*group_w:.1f}" y="{height-28}" font-size="10" '
            f'text-anchor="middle">{i}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))


def write_metadata(run, path):
    meta = {
        "config": dataclasses.asdict(run.config),
        "grammar_hash": run.grammar.source_hash(),
        "K": run.grammar.K,
    }
    if run.extractor is not None:
        meta["extractor"] = {
            "kind": run.extractor.kind,
            "d": run.extractor.d,
            "state_hash": run.extractor.state_hash(),
        }
    with open(path, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
