"""Grammar DSL parsing, masks, and stack-based derivation."""

import numpy as np
import pytest

from scenegen.grammar import (
    Derivation,
    DerivationError,
    GrammarError,
    expand_step,
    mask_for,
    parse_grammar,
    sequence_to_scene_graph,
)
from scenegen.pipeline import bundled_grammar_path
from scenegen.scene import make_prior

ALL_GRAMMARS = ["mnist.g", "aerial.g", "city.g", "suburban.g", "rural.g"]


def load(name):
    with open(bundled_grammar_path(name)) as f:
        return parse_grammar(f.read())


# -- parse_grammar ----------------------------------------------------------


def test_mnist_grammar_has_13_rules():
    g = load("mnist.g")
    assert g.K == 13  # 1 Scene + 2 Digits + 10 Digit
    assert g.start == "Scene"
    for c in range(10):
        assert g.symbols[f"d{c}"].is_terminal
        assert g.symbols[f"d{c}"].renderable


def test_eps_only_grammar():
    g = parse_grammar("S -> eps ;")
    assert g.K == 1
    assert g.rules[0].rhs == ()


def test_city_grammar_street_alternatives():
    g = load("city.g")
    assert len(g.rules_for("Street")) == 6


@pytest.mark.parametrize("name", ALL_GRAMMARS)
def test_bundled_grammars_parse(name):
    g = load(name)
    assert g.K >= 1


def test_rule_indices_follow_source_order():
    g = parse_grammar("S -> a | b ;\nT -> c ;\nS -> T ;\n")
    assert [(r.lhs, r.rhs) for r in g.rules] == [
        ("S", ("a",)), ("S", ("b",)), ("T", ("c",)), ("S", ("T",)),
    ]


def test_parse_is_deterministic():
    text = open(bundled_grammar_path("aerial.g")).read()
    a, b = parse_grammar(text), parse_grammar(text)
    assert [(r.lhs, r.rhs) for r in a.rules] == [(r.lhs, r.rhs) for r in b.rules]
    assert a.source_hash() == b.source_hash()


def test_syntax_error_reports_line():
    with pytest.raises(GrammarError) as e:
        parse_grammar("S -> a ;\nT -> $ ;\n")
    assert e.value.line == 2


def test_missing_semicolon_rejected():
    with pytest.raises(GrammarError, match="missing ';'"):
        parse_grammar("S -> a")


def test_unknown_symbol_in_renderable_rejected():
    with pytest.raises(GrammarError, match="unknown symbol"):
        parse_grammar("S -> a ;\n@renderable nope ;")


def test_unterminable_nonterminal_rejected():
    with pytest.raises(GrammarError, match="unterminable"):
        parse_grammar("S -> A ;\nA -> A a ;")


def test_duplicate_rule_rejected():
    with pytest.raises(GrammarError, match="duplicate rule"):
        parse_grammar("S -> a | a ;")


def test_unreachable_nonterminal_rejected():
    with pytest.raises(GrammarError, match="unreachable"):
        parse_grammar("S -> a ;\nT -> b ;")


def test_eps_must_stand_alone():
    with pytest.raises(GrammarError):
        parse_grammar("S -> a eps ;")


# -- mask_for ---------------------------------------------------------------


def test_digit_mask_has_10_bits():
    g = load("mnist.g")
    assert mask_for(g, "Digit").sum() == 10


def test_scene_mask_has_1_bit():
    g = load("mnist.g")
    assert mask_for(g, "Scene").sum() == 1


def test_single_rule_grammar_mask_all_ones():
    g = parse_grammar("S -> eps ;")
    assert mask_for(g, "S").tolist() == [True]


def test_mask_for_terminal_raises():
    g = load("mnist.g")
    with pytest.raises(GrammarError):
        mask_for(g, "d0")


@pytest.mark.parametrize("name", ALL_GRAMMARS)
def test_masks_partition_rule_space(name):
    g = load(name)
    nts = [s.name for s in g.symbols.values() if not s.is_terminal]
    total = np.zeros(g.K, dtype=int)
    for nt in nts:
        m = mask_for(g, nt)
        assert m.sum() == len(g.rules_for(nt))
        total += m
    assert (total == 1).all()  # disjoint and covering


# -- expand_step ------------------------------------------------------------


def test_expand_pushes_rhs_reversed():
    g = load("mnist.g")
    d = Derivation(g)
    d.step(g.rule_index("Scene", ["bg", "Digits"]))
    d.step(g.rule_index("Digits", ["Digit", "Digits"]))
    assert d.top() == "Digit"  # leftmost rhs nonterminal expanded next
    assert [nt for nt, _ in d.stack] == ["Digits", "Digit"]


def test_eps_expansion_empties_stack():
    g = load("mnist.g")
    d = Derivation(g)
    d.step(g.rule_index("Scene", ["bg", "Digits"]))
    d.step(g.rule_index("Digits", []))
    assert d.done


def test_scene_expansion_drops_nonrenderable_bg():
    g = load("mnist.g")
    d = Derivation(g)
    d.step(g.rule_index("Scene", ["bg", "Digits"]))
    assert [nt for nt, _ in d.stack] == ["Digits"]
    assert d.root.children == []  # bg is not renderable


def test_lhs_mismatch_raises_and_preserves_stack():
    g = load("mnist.g")
    d = Derivation(g)
    with pytest.raises(DerivationError):
        d.step(g.rule_index("Digits", []))
    assert d.top() == "Scene"


def test_expand_on_empty_stack_raises():
    g = parse_grammar("S -> eps ;")
    d = Derivation(g)
    d.step(0)
    with pytest.raises(DerivationError):
        expand_step(d, g.rules[0])


# -- sequence_to_scene_graph ------------------------------------------------


def test_empty_scene_graph():
    g = load("mnist.g")
    seq = [g.rule_index("Scene", ["bg", "Digits"]), g.rule_index("Digits", [])]
    graph = sequence_to_scene_graph(g, seq)
    assert graph.cls == "scene"
    assert graph.children == []


def test_single_digit_graph():
    g = load("mnist.g")
    seq = [
        g.rule_index("Scene", ["bg", "Digits"]),
        g.rule_index("Digits", ["Digit", "Digits"]),
        g.rule_index("Digit", ["d7"]),
        g.rule_index("Digits", []),
    ]
    graph = sequence_to_scene_graph(g, seq)
    assert [c.cls for c in graph.children] == ["d7"]


def test_aerial_cars_attach_to_their_road():
    g = load("aerial.g")
    seq = [
        g.rule_index("Scene", ["Roads"]),
        g.rule_index("Roads", ["Road", "Roads"]),
        g.rule_index("Road", ["Cars"]),
        g.rule_index("Cars", ["car", "Cars"]),
        g.rule_index("Cars", []),
        g.rule_index("Roads", ["Road", "Roads"]),
        g.rule_index("Road", ["Cars"]),
        g.rule_index("Cars", ["car", "Cars"]),
        g.rule_index("Cars", ["car", "Cars"]),
        g.rule_index("Cars", []),
        g.rule_index("Roads", []),
    ]
    graph = sequence_to_scene_graph(g, seq)
    roads = graph.children
    assert [r.cls for r in roads] == ["Road", "Road"]
    assert [len(r.children) for r in roads] == [1, 2]
    assert all(c.cls == "car" for r in roads for c in r.children)


def test_incomplete_sequence_rejected():
    g = load("mnist.g")
    with pytest.raises(DerivationError, match="incomplete"):
        sequence_to_scene_graph(g, [g.rule_index("Scene", ["bg", "Digits"])])


def test_invalid_rule_mid_sequence_rejected():
    g = load("mnist.g")
    with pytest.raises(DerivationError):
        sequence_to_scene_graph(g, [g.rule_index("Digit", ["d0"])])


# -- replay round trip ------------------------------------------------------


@pytest.mark.parametrize("name", ALL_GRAMMARS)
def test_prior_sequences_replay_to_empty_stack(name):
    g = load(name)
    prior_name = {"mnist.g": "mnist", "aerial.g": "aerial"}.get(name, "uniform")
    prior = make_prior(prior_name, g)
    rng = np.random.default_rng(0)
    for _ in range(200):
        seq = prior.sample(rng)
        d = Derivation(g).replay(seq)
        assert d.done
        assert d.rules == list(seq)
