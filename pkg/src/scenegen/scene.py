"""Scene graphs with continuous parameters, structure priors, and the
hidden target samplers for each experiment.

Positions are normalized to [0, 1] in the parent frame.  Roads stack top to
bottom with a random gap, so road index always maps to a vertical band.
"""

from dataclasses import dataclass

import numpy as np

from .grammar import Derivation, GraphNode, sequence_to_scene_graph

# Aerial layout: vertical placement of the first road, gap between
# consecutive roads, and the band height used by the renderer.
# Road placement keeps only a little vertical jitter: wide position spread
# smears the image features, and the per-road car-count signal the objective
# must pick up is small next to it.
FIRST_ROAD_OFFSET = (0.11, 0.13)
ROAD_GAP = (0.23, 0.25)
ROAD_BAND_HEIGHT = 0.10

# Digit rotation range (degrees) used by the scene prior; targets are upright.
DIGIT_ROTATION_RANGE = 45.0

# Placement margin keeping a digit stamp fully on the canvas (half the stamp
# width plus a pixel of slack), so generated and target scenes carry the same
# per-digit foreground mass.
DIGIT_MARGIN = 0.06

# Center-to-center spacing of target-row digits, as a canvas fraction.
TARGET_ROW_SPACING = 0.16


@dataclass
class NodeParams:
    x: float
    y: float
    rotation: float = 0.0
    scale: float = 1.0


def iter_object_nodes(graph):
    """All non-root nodes of a scene graph, in deterministic tree order."""
    for node in graph.walk():
        if node is not graph:
            yield node


def digit_classes(graph):
    return [int(n.cls[1:]) for n in graph.children if n.cls.startswith("d")]


def digit_count(graph):
    return len(digit_classes(graph))


def road_car_counts(graph):
    """Cars per road, ordered by road index (top road first)."""
    return [len(road.children) for road in graph.children if road.cls == "Road"]


# ---------------------------------------------------------------------------
# structure priors


class StructurePrior:
    """Named sampler of complete rule sequences under a bound grammar."""

    name = "base"

    def __init__(self, grammar):
        self.grammar = grammar

    def sample(self, rng):
        raise NotImplementedError


class MnistPrior(StructurePrior):
    """n_d ~ U{0..10} digits with uniformly random classes."""

    name = "mnist"

    def __init__(self, grammar, max_digits=10):
        super().__init__(grammar)
        self.max_digits = max_digits
        self._scene = grammar.rule_index("Scene", ["bg", "Digits"])
        self._more = grammar.rule_index("Digits", ["Digit", "Digits"])
        self._stop = grammar.rule_index("Digits", [])
        self._digit = [grammar.rule_index("Digit", [f"d{c}"]) for c in range(10)]

    def sample(self, rng, n_digits=None):
        if n_digits is None:
            n_digits = int(rng.integers(0, self.max_digits + 1))
        seq = [self._scene]
        for _ in range(n_digits):
            seq.append(self._more)
            seq.append(self._digit[int(rng.integers(0, 10))])
        seq.append(self._stop)
        return seq


class AerialPrior(StructurePrior):
    """n_r ~ U{0..4} roads, each carrying c ~ U{0..8} cars."""

    name = "aerial"

    def __init__(self, grammar, max_roads=4, max_cars=8):
        super().__init__(grammar)
        self.max_roads = max_roads
        self.max_cars = max_cars
        self._scene = grammar.rule_index("Scene", ["Roads"])
        self._more_road = grammar.rule_index("Roads", ["Road", "Roads"])
        self._stop_road = grammar.rule_index("Roads", [])
        self._road = grammar.rule_index("Road", ["Cars"])
        self._more_car = grammar.rule_index("Cars", ["car", "Cars"])
        self._stop_car = grammar.rule_index("Cars", [])

    def sample(self, rng, n_roads=None):
        if n_roads is None:
            n_roads = int(rng.integers(0, self.max_roads + 1))
        seq = [self._scene]
        for _ in range(n_roads):
            seq.append(self._more_road)
            seq.append(self._road)
            for _ in range(int(rng.integers(0, self.max_cars + 1))):
                seq.append(self._more_car)
            seq.append(self._stop_car)
        seq.append(self._stop_road)
        return seq


class UniformRulePrior(StructurePrior):
    """Expands each popped nonterminal with a uniformly random valid rule.

    Used for the driving-grammar fixtures, where no handcrafted prior is
    defined; retries the rare derivations that exceed `max_len`.
    """

    name = "uniform"

    def __init__(self, grammar, max_len=400):
        super().__init__(grammar)
        self.max_len = max_len

    def sample(self, rng):
        while True:
            d = Derivation(self.grammar)
            while not d.done and len(d.rules) < self.max_len:
                choices = self.grammar.rules_for(d.top())
                d.step(choices[int(rng.integers(0, len(choices)))])
            if d.done:
                return d.rules


_PRIORS = {
    "mnist": MnistPrior,
    "aerial": AerialPrior,
    "uniform": UniformRulePrior,
}


def make_prior(name, grammar):
    if name not in _PRIORS:
        raise KeyError(f"unknown prior {name!r}; have {sorted(_PRIORS)}")
    return _PRIORS[name](grammar)


def sample_prior_structure(prior, rng):
    return prior.sample(rng)


# ---------------------------------------------------------------------------
# parameter priors


def _place_roads(roads, rng=None, gaps=None):
    """Sequential vertical placement; each road sits a random gap below the
    previous one, so ordering by index is strict."""
    y = 0.0
    for i, road in enumerate(roads):
        lo, hi = FIRST_ROAD_OFFSET if i == 0 else ROAD_GAP
        gap = gaps[i] if gaps is not None else rng.uniform(lo, hi)
        y += gap
        road.params = NodeParams(x=0.5, y=min(y, 0.98))


def sample_parameters(graph, scenario, rng):
    """Attach parameters from the prior q(.|T) to a structure-only graph."""
    if scenario == "mnist":
        for node in graph.children:
            node.params = NodeParams(
                x=rng.uniform(DIGIT_MARGIN, 1.0 - DIGIT_MARGIN),
                y=rng.uniform(DIGIT_MARGIN, 1.0 - DIGIT_MARGIN),
                rotation=rng.uniform(-DIGIT_ROTATION_RANGE, DIGIT_ROTATION_RANGE),
            )
    elif scenario == "aerial":
        _place_roads([n for n in graph.children if n.cls == "Road"], rng)
        for road in graph.children:
            # Cars are laid out evenly along the road, the same layout the
            # target sampler uses.  Random placement loses pixel mass to
            # overlap, which shifts the count that best matches the target's
            # image statistics away from the target's actual count.
            cars = road.children
            for j, car in enumerate(cars):
                car.params = NodeParams(x=(j + 0.5) / len(cars), y=0.5,
                                        rotation=0.0)
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    return graph


# ---------------------------------------------------------------------------
# target samplers


class TargetSpec:
    """Named sampler of complete target scene graphs (structure + params)."""

    name = "base"
    scenario = None

    def sample(self, n, rng):
        raise NotImplementedError


class MnistRowTarget(TargetSpec):
    """Digits centered in an upright row; count from a configured
    distribution over {0..max_digits}."""

    name = "mnist_row"
    scenario = "mnist"

    def __init__(self, count_probs, max_digits=10):
        probs = np.asarray(count_probs, dtype=float)
        if probs.shape != (max_digits + 1,) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("count_probs must be a distribution over 0..max")
        self.count_probs = probs
        self.max_digits = max_digits

    def sample_one(self, rng):
        n = int(rng.choice(self.max_digits + 1, p=self.count_probs))
        root = GraphNode("scene")
        spacing = TARGET_ROW_SPACING if n < 2 else min(
            TARGET_ROW_SPACING, 0.9 / (n - 1)
        )
        for i in range(n):
            node = GraphNode(f"d{int(rng.integers(0, 10))}")
            node.params = NodeParams(
                x=0.5 + (i - (n - 1) / 2.0) * spacing, y=0.5, rotation=0.0
            )
            root.children.append(node)
        return root

    def sample(self, n, rng):
        return [self.sample_one(rng) for _ in range(n)]


class AerialContextTarget(TargetSpec):
    """Context-dependent road scenes: road count categorical on {1..4} with
    probs (0.05, 0.15, 0.4, 0.4); the first road gets Poisson(9) cars, every
    later road Poisson(3), all cars evenly spaced and axis aligned."""

    name = "aerial_context"
    scenario = "aerial"

    ROAD_COUNT_PROBS = (0.05, 0.15, 0.4, 0.4)
    FIRST_ROAD_CAR_MEAN = 9.0
    OTHER_ROAD_CAR_MEAN = 3.0

    def sample_one(self, rng):
        n_roads = 1 + int(rng.choice(4, p=self.ROAD_COUNT_PROBS))
        root = GraphNode("scene")
        roads = [GraphNode("Road") for _ in range(n_roads)]
        root.children.extend(roads)
        _place_roads(roads, rng)
        for i, road in enumerate(roads):
            mean = self.FIRST_ROAD_CAR_MEAN if i == 0 else self.OTHER_ROAD_CAR_MEAN
            c = int(rng.poisson(mean))
            for j in range(c):
                car = GraphNode("car")
                car.params = NodeParams(x=(j + 0.5) / c, y=0.5, rotation=0.0)
                road.children.append(car)
        return root

    def sample(self, n, rng):
        return [self.sample_one(rng) for _ in range(n)]


def _parse_count_spec(spec, max_digits=10):
    """'point:5', 'uniform', 'binomial', or comma-separated probabilities."""
    if spec == "binomial":
        # symmetric binomial over 0..max, centered at max/2
        from math import comb

        probs = np.array([comb(max_digits, k) for k in range(max_digits + 1)], float)
        return probs / probs.sum()
    if spec.startswith("point:"):
        k = int(spec.split(":", 1)[1])
        probs = np.zeros(max_digits + 1)
        probs[k] = 1.0
        return probs
    if spec == "uniform":
        return np.full(max_digits + 1, 1.0 / (max_digits + 1))
    probs = np.array([float(x) for x in spec.split(",")])
    return probs / probs.sum()


def make_target(name, count_spec="point:5"):
    if name == "mnist_row":
        return MnistRowTarget(_parse_count_spec(count_spec))
    if name == "aerial_context":
        return AerialContextTarget()
    raise KeyError(f"unknown target {name!r}")


def sample_target(spec, n, rng):
    return spec.sample(n, rng)


def prior_scene_graphs(grammar, prior, scenario, n, rng):
    """Convenience: structures from the prior with parameters attached."""
    graphs = []
    for _ in range(n):
        g = sequence_to_scene_graph(grammar, prior.sample(rng))
        graphs.append(sample_parameters(g, scenario, rng))
    return graphs
