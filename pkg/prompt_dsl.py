"""
Parser for the constrained prompt language understood by the rule planner.

    prompt     := entity (relation entity)* [background]
    entity     := [count] [color] noun
    relation   := "to the left of" | "left of" | "to the right of" | "right of"
                | "above" | "below" | "on top of" | "in front of"
                | "behind" | "hidden behind"
    background := "on a" ["plain"] ("gray" | "light gray" | "dark gray") "background"

Relations chain: in "A left of B above C" the relations are (A, left of, B)
and (B, above, C).
"""
import re
from typing import List, Optional, Tuple

from errors import GrammarError
from models import (
    BACKGROUNDS, COLORS, COUNT_WORDS, NOUNS, NUMBER_WORDS, PLURALS, RELATION_PHRASES,
    Entity, Relation, SceneAST,
)

_SINGULAR = {noun: noun for noun in NOUNS}
_PLURAL = {plural: noun for noun, plural in PLURALS.items()}

# Longest phrases first so "to the left of" wins over "left of"
_RELATION_FORMS: List[Tuple[Tuple[str, ...], str]] = sorted(
    [
        (("to", "the", "left", "of"), "left of"),
        (("left", "of"), "left of"),
        (("to", "the", "right", "of"), "right of"),
        (("right", "of"), "right of"),
        (("above",), "above"),
        (("below",), "below"),
        (("on", "top", "of"), "on top of"),
        (("in", "front", "of"), "in front of"),
        (("hidden", "behind"), "hidden behind"),
        (("behind",), "behind"),
    ],
    key=lambda form: -len(form[0]),
)

_BACKGROUND_FORMS = sorted((tuple(name.split()), name) for name in BACKGROUNDS)
_BACKGROUND_FORMS.sort(key=lambda form: -len(form[0]))

_TOKEN_RE = re.compile(r"[A-Za-z]+|\d+|\S")


class _Tokens:
    def __init__(self, text: str):
        self.text = text
        self.items = [(m.group(0).lower(), m.start()) for m in _TOKEN_RE.finditer(text)]
        # a single trailing full stop is tolerated
        if self.items and self.items[-1][0] == ".":
            self.items.pop()
        self.index = 0

    def peek(self, offset: int = 0) -> Optional[str]:
        i = self.index + offset
        return self.items[i][0] if i < len(self.items) else None

    def position(self) -> int:
        if self.index < len(self.items):
            return self.items[self.index][1]
        return len(self.text)

    def matches(self, words: Tuple[str, ...]) -> bool:
        return all(self.peek(k) == w for k, w in enumerate(words))

    def advance(self, n: int = 1) -> None:
        self.index += n

    def done(self) -> bool:
        return self.index >= len(self.items)


def _parse_count(tokens: _Tokens) -> Tuple[int, bool]:
    word = tokens.peek()
    if word in COUNT_WORDS:
        tokens.advance()
        return COUNT_WORDS[word], True
    if word is not None and word.isdigit():
        position = tokens.position()
        value = int(word)
        if value < 1:
            raise GrammarError(f"count must be at least 1, got {word!r}", position)
        tokens.advance()
        return value, True
    return 1, False


def _parse_entity(tokens: _Tokens) -> Entity:
    if tokens.done():
        raise GrammarError("expected an object description", tokens.position())

    count, _ = _parse_count(tokens)

    attributes = []
    while tokens.peek() in COLORS:
        attributes.append(tokens.peek())
        tokens.advance()
    if len(attributes) > 1:
        raise GrammarError("at most one colour per object", tokens.position())

    position = tokens.position()
    word = tokens.peek()
    if word is None:
        raise GrammarError("expected a noun", position)
    if count == 1:
        if word not in _SINGULAR:
            hint = " (plural noun needs a count above one)" if word in _PLURAL else ""
            raise GrammarError(f"unknown noun {word!r}{hint}", position)
        noun = _SINGULAR[word]
    else:
        if word not in _PLURAL:
            hint = " (count above one needs a plural noun)" if word in _SINGULAR else ""
            raise GrammarError(f"unknown plural noun {word!r}{hint}", position)
        noun = _PLURAL[word]
    tokens.advance()
    return Entity(noun=noun, attributes=tuple(attributes), count=count)


def _try_relation(tokens: _Tokens) -> Optional[str]:
    for words, relation in _RELATION_FORMS:
        if tokens.matches(words):
            tokens.advance(len(words))
            return relation
    return None


def _try_background(tokens: _Tokens) -> Optional[str]:
    if not tokens.matches(("on", "a")):
        return None
    tokens.advance(2)
    if tokens.peek() == "plain":
        tokens.advance()
    for words, name in _BACKGROUND_FORMS:
        if tokens.matches(words):
            tokens.advance(len(words))
            break
    else:
        raise GrammarError("expected gray, light gray or dark gray", tokens.position())
    if tokens.peek() != "background":
        raise GrammarError("expected 'background'", tokens.position())
    tokens.advance()
    return name


def parse_prompt_dsl(text: str) -> SceneAST:
    tokens = _Tokens(text)
    entities = [_parse_entity(tokens)]
    relations = []
    background = None

    while not tokens.done():
        background = _try_background(tokens)
        if background is not None:
            break
        position = tokens.position()
        relation = _try_relation(tokens)
        if relation is None:
            raise GrammarError(f"expected a relation, got {tokens.peek()!r}", position)
        entities.append(_parse_entity(tokens))
        relations.append(Relation(subject=len(entities) - 2, relation=relation, object=len(entities) - 1))

    if not tokens.done():
        raise GrammarError(f"unexpected text after background clause: {tokens.peek()!r}", tokens.position())

    return SceneAST(entities=tuple(entities), relations=tuple(relations), background=background)


def _article(next_word: str) -> str:
    return "an" if next_word[:1] in "aeiou" else "a"


def render_entity(entity: Entity) -> str:
    words = list(entity.attributes)
    if entity.count == 1:
        words.append(entity.noun)
        return " ".join([_article(words[0])] + words)
    words.append(PLURALS[entity.noun])
    count = NUMBER_WORDS[entity.count] if entity.count < len(NUMBER_WORDS) else str(entity.count)
    return " ".join([count] + words)


def render_ast(ast: SceneAST) -> str:
    """Canonical DSL text for an AST; parse_prompt_dsl(render_ast(a)) == a for chained ASTs."""
    parts = [render_entity(ast.entities[0])]
    for relation in ast.relations:
        parts.append(RELATION_PHRASES[relation.relation])
        parts.append(render_entity(ast.entities[relation.object]))
    if ast.background is not None:
        parts.append(f"on a plain {ast.background} background")
    return " ".join(parts)
