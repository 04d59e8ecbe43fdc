"""
Tests for the prompt language parser.
"""
import pytest

from errors import GrammarError
from models import Entity, Relation, SceneAST
from prompt_dsl import parse_prompt_dsl, render_ast, render_entity


class TestParsePrompt:
    """Test parse_prompt_dsl."""

    def test_single_entity(self):
        """Test the smallest prompt."""
        ast = parse_prompt_dsl("a red circle")
        assert ast.entities == (Entity(noun="circle", attributes=("red",), count=1),)
        assert ast.relations == ()
        assert ast.background is None

    def test_counts_and_plurals(self):
        """Test number words, digits and plural nouns."""
        assert parse_prompt_dsl("three blue squares").entities[0].count == 3
        assert parse_prompt_dsl("4 triangles").entities[0].count == 4
        assert parse_prompt_dsl("two butterflies").entities[0].noun == "butterfly"

    def test_relation_forms(self):
        """Test long and short relation spellings."""
        long_form = parse_prompt_dsl("a red circle to the left of a blue square")
        short_form = parse_prompt_dsl("a red circle left of a blue square")
        assert long_form == short_form
        assert long_form.relations == (Relation(subject=0, relation="left of", object=1),)

    def test_hidden_behind_wins_over_behind(self):
        """Test that the longest relation phrase is matched."""
        ast = parse_prompt_dsl("a cat hidden behind a dog")
        assert ast.relations[0].relation == "hidden behind"

    def test_relation_chain(self):
        """Test that relations link consecutive entities."""
        ast = parse_prompt_dsl("a red circle left of a blue square above a green triangle")
        assert [(r.subject, r.relation, r.object) for r in ast.relations] == [
            (0, "left of", 1), (1, "above", 2)]

    def test_background_clause(self):
        """Test the optional background clause."""
        assert parse_prompt_dsl("a red circle on a plain dark gray background").background == "dark gray"
        assert parse_prompt_dsl("a red circle on a gray background").background == "gray"

    def test_on_top_of_is_a_relation(self):
        """Test that 'on top of' is not mistaken for a background clause."""
        ast = parse_prompt_dsl("a cat on top of a dog")
        assert ast.relations[0].relation == "on top of"

    def test_case_and_trailing_period(self):
        """Test that case is ignored and a final full stop is allowed."""
        assert parse_prompt_dsl("A Red Circle.") == parse_prompt_dsl("a red circle")

    @pytest.mark.parametrize("text", [
        "",
        "a purple circle",
        "two circle",
        "a circles",
        "a red blue circle",
        "a red circle near a blue square",
        "a red circle on a plain blue background",
        "a red circle on a gray background please",
        "0 circles",
    ])
    def test_grammar_errors(self, text):
        """Test that invalid prompts raise GrammarError with a position."""
        with pytest.raises(GrammarError) as exc_info:
            parse_prompt_dsl(text)
        assert exc_info.value.position >= 0

    def test_error_position_points_at_problem(self):
        """Test the reported character offset."""
        with pytest.raises(GrammarError) as exc_info:
            parse_prompt_dsl("a red circle near a blue square")
        assert exc_info.value.position == len("a red circle ")


class TestRender:
    """Test the canonical text form."""

    def test_render_entity(self):
        """Test articles and number words."""
        assert render_entity(Entity(noun="circle", attributes=("red",))) == "a red circle"
        assert render_entity(Entity(noun="cup")) == "a cup"
        assert render_entity(Entity(noun="square", count=2)) == "two squares"

    def test_render_roundtrip_on_chain(self):
        """Test that rendered text parses back to the same AST."""
        ast = SceneAST(
            entities=(Entity(noun="circle", attributes=("red",), count=2),
                      Entity(noun="square", attributes=("blue",))),
            relations=(Relation(subject=0, relation="below", object=1),),
            background="light gray",
        )
        assert parse_prompt_dsl(render_ast(ast)) == ast
