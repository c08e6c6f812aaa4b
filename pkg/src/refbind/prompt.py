"""Anchored-prompt grammar: parsing, templating, rewriting, toy tokenizer.

An anchored prompt attaches a bracketed anchor token ([R1], [R2], ...) right
after each concept description; anchor k binds the k-th reference image.
The vocabulary is a closed word-level toy (no subwords) so anchors are
guaranteed to stay atomic tokens with their own reserved ids.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field


class PromptError(ValueError):
    pass


class DuplicateAnchor(PromptError):
    pass


class NonContiguousAnchors(PromptError):
    pass


class MalformedAnchor(PromptError):
    pass


class OutOfOrderAnchors(PromptError):
    pass


class EmptyConceptSpan(PromptError):
    pass


class TooManyConcepts(PromptError):
    pass


class AnchorTruncated(PromptError):
    pass


_ANCHOR_RE = re.compile(r"\[([^\[\]]*)\]")
_VALID_ANCHOR_RE = re.compile(r"R([1-9][0-9]*)$")
_PUNCT = ".,;!?"

# Leading words stripped from a concept span: verbs, motion/direction
# vocabulary, and connective words. Articles are kept so spans read like
# noun phrases ("a woman nurse", not "woman nurse").
STOPWORDS = frozenset("""
    moves stays sways bobs while and then with at on under over near by
    during left right up down centered sideways vertically slowly softly
    gently discussing listening talking walking sitting standing smiling
    watching resting drifting
""".split())

_TEMPLATE_WORDS = """
    glyph sprite moves stays sways bobs left right up down centered sideways
    vertically while and then , .
""".split()

_SCENE_WORDS = """
    at on in under over near by dusk dawn morning evening night a the dim
    pale quiet soft field sky yard light shadow corner edge slowly softly
    gently
""".split()

_FREETEXT_WORDS = """
    woman man person nurse dentist senior child wheelchair appointment
    consultation smiling discussing listening talking walking sitting
    standing watching resting drifting with her his their during two dog
    cat pet calm lake beach park garden room table chair window door
    holding playing reading eating drinking moving turning looking facing
    wearing white black red blue green small large young old tall short
    happy tired busy early late first second other same new
""".split()

_FILLER_WORDS = """
    about above across after again against along among around away back
    before behind below beneath beside between beyond both bright center
    close cloud cold cool dark day deep distant down early east evening
    every few floor fog front full gentle glass grass ground half heavy
    high hill inside last leaf line long loud low middle mist moon most
    music next noise north ocean once only open outside part path plain
    point rain rest river road rock roof round sand sea season shade
    shape side silent sing sky slow snow sound south space spring star
    step still stone storm street strong summer sun sunset surface swift
    thick thin tide tiny top tree twilight upper valley vast warm water
    wave west wide wind winter wood
""".split()


@dataclass(frozen=True)
class Anchor:
    index: int                      # k in [Rk], 1-based
    token_id: int                   # reserved vocabulary id
    char_span: tuple[int, int]      # [start, end) in the source text

    def __post_init__(self):
        if self.index < 1:
            raise MalformedAnchor(f"anchor index must be >= 1, got {self.index}")


@dataclass(frozen=True)
class ConceptSpan:
    text: str
    anchor: Anchor


@dataclass
class AnchoredPrompt:
    raw_text: str
    anchors: list[Anchor]
    spans: list[ConceptSpan]
    token_ids: list[int] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.anchors)

    def plain_text(self) -> str:
        """The prompt with all anchor tokens removed (naive-baseline form)."""
        text = _ANCHOR_RE.sub("", self.raw_text)
        return re.sub(r"\s+", " ", text).strip()


class Vocabulary:
    """Closed word-level vocabulary with reserved control and anchor ids.

    Ids: PAD=0, BOS=1, EOS=2, UNK=3, then R1..R_MAX, then words in sorted
    order. Construction is deterministic, so ids are stable across runs.
    """

    PAD, BOS, EOS, UNK = 0, 1, 2, 3

    def __init__(self, words, r_max: int = 4):
        self.r_max = r_max
        self.anchor_ids = {i: 3 + i for i in range(1, r_max + 1)}
        self.word_to_id: dict[str, int] = {}
        next_id = 4 + r_max
        for w in sorted(set(words)):
            self.word_to_id[w] = next_id
            next_id += 1
        self.id_to_word = {v: k for k, v in self.word_to_id.items()}

    def __len__(self) -> int:
        return 4 + self.r_max + len(self.word_to_id)

    def anchor_id(self, index: int) -> int:
        if index not in self.anchor_ids:
            raise TooManyConcepts(
                f"anchor index {index} exceeds configured maximum {self.r_max}")
        return self.anchor_ids[index]

    def lookup(self, word: str) -> int:
        return self.word_to_id.get(word, self.UNK)

    def to_json(self) -> str:
        return json.dumps({"r_max": self.r_max, "words": sorted(self.word_to_id)},
                          indent=0, sort_keys=True)

    @classmethod
    def from_json(cls, raw: str) -> "Vocabulary":
        doc = json.loads(raw)
        return cls(doc["words"], r_max=doc["r_max"])

    @classmethod
    def default(cls, r_max: int = 4) -> "Vocabulary":
        words = (_TEMPLATE_WORDS + _SCENE_WORDS + _FREETEXT_WORDS + _FILLER_WORDS)
        return cls(words, r_max=r_max)


def _find_anchors(text: str, vocab: Vocabulary) -> list[Anchor]:
    anchors = []
    for m in _ANCHOR_RE.finditer(text):
        inner = m.group(1)
        valid = _VALID_ANCHOR_RE.match(inner)
        if not valid:
            raise MalformedAnchor(f"bad anchor token [{inner}] at offset {m.start()}")
        index = int(valid.group(1))
        anchors.append(Anchor(index, vocab.anchor_id(index), (m.start(), m.end())))

    indices = [a.index for a in anchors]
    if len(set(indices)) != len(indices):
        dup = sorted({i for i in indices if indices.count(i) > 1})
        raise DuplicateAnchor(f"anchor indices repeated: {dup}")
    if indices and sorted(indices) != list(range(1, len(indices) + 1)):
        raise NonContiguousAnchors(
            f"anchor indices {sorted(indices)} are not 1..{len(indices)}")
    if indices != sorted(indices):
        raise OutOfOrderAnchors(f"anchors appear out of index order: {indices}")
    return anchors


def _extract_spans(text: str, anchors: list[Anchor]) -> list[ConceptSpan]:
    spans: list[ConceptSpan] = []
    prev_end = 0
    for anchor in anchors:
        region = text[prev_end:anchor.char_span[0]]
        # Span starts after the nearest clause boundary: previous anchor,
        # sentence start, or punctuation.
        cut = max((region.rfind(p) for p in _PUNCT), default=-1)
        region_tail = region[cut + 1:] if cut >= 0 else region
        words = region_tail.split()
        while words and words[0].lower() in STOPWORDS:
            words.pop(0)
        span_text = " ".join(words)
        if not span_text:
            if spans and not region.strip():
                # Adjacent anchor pair ([Ri] [Rj]): both bind one concept.
                span_text = spans[-1].text
            else:
                raise EmptyConceptSpan(
                    f"no concept description before anchor [R{anchor.index}]")
        spans.append(ConceptSpan(span_text, anchor))
        prev_end = anchor.char_span[1]
    return spans


def normalize_text(text: str) -> str:
    """Lowercased, punctuation-separated form; anchor tokens kept verbatim."""
    pieces = []
    pos = 0
    for m in _ANCHOR_RE.finditer(text):
        pieces.append((text[pos:m.start()], False))
        pieces.append((m.group(0), True))
        pos = m.end()
    pieces.append((text[pos:], False))
    out: list[str] = []
    for chunk, is_anchor in pieces:
        if is_anchor:
            out.append(chunk)
            continue
        chunk = chunk.lower()
        for p in _PUNCT:
            chunk = chunk.replace(p, f" {p} ")
        out.extend(chunk.split())
    return " ".join(out)


def parse(text: str, vocab: Vocabulary) -> AnchoredPrompt:
    """Parse free text into an AnchoredPrompt, validating anchor structure."""
    anchors = _find_anchors(text, vocab)
    spans = _extract_spans(text, anchors)
    prompt = AnchoredPrompt(raw_text=text, anchors=anchors, spans=spans)
    prompt.token_ids = _encode(prompt, vocab)
    return prompt


# -- templating ---------------------------------------------------------

ENTITY_WORDS = {"person": "glyph", "pet": "sprite"}

MOTION_PHRASES = {
    "stays": "stays centered",
    "left": "moves left",
    "right": "moves right",
    "up": "moves up",
    "down": "moves down",
    "sways": "sways sideways",
    "bobs": "bobs vertically",
}


def render_template(scene, vocab: Vocabulary) -> AnchoredPrompt:
    """Deterministic anchored prompt for a scripted scene.

    `scene` provides `.entities` (each with `.kind`, `.has_body`, `.motion`)
    and an optional `.prefix` clause. Each entity contributes one anchor,
    or an adjacent pair when it carries a body reference.
    """
    total_anchors = sum(2 if e.has_body else 1 for e in scene.entities)
    if total_anchors > vocab.r_max:
        raise TooManyConcepts(
            f"scene needs {total_anchors} anchors but R_MAX is {vocab.r_max}")

    clauses = []
    next_index = 1
    for entity in scene.entities:
        word = ENTITY_WORDS[entity.kind]
        marks = f"[R{next_index}]"
        next_index += 1
        if entity.has_body:
            marks += f" [R{next_index}]"
            next_index += 1
        clauses.append(f"{word} {marks} {MOTION_PHRASES[entity.motion]}")
    text = " while ".join(clauses)
    prefix = getattr(scene, "prefix", "")
    if prefix:
        text = f"{prefix} , {text}"
    return parse(text, vocab)


def rewrite_add_body_anchors(p: AnchoredPrompt, vocab: Vocabulary) -> AnchoredPrompt:
    """Replace every anchor [Ri] with the adjacent pair [R2i-1] [R2i].

    Used to turn a faces-only prompt into a face+body prompt where each
    pair binds a single concept; span texts are unchanged.
    """
    if not p.anchors:
        return p
    if 2 * p.k > vocab.r_max:
        raise TooManyConcepts(
            f"rewriting {p.k} anchors needs {2 * p.k} ids but R_MAX is {vocab.r_max}")
    out = []
    pos = 0
    for anchor in p.anchors:
        start, end = anchor.char_span
        out.append(p.raw_text[pos:start])
        i = anchor.index
        out.append(f"[R{2 * i - 1}] [R{2 * i}]")
        pos = end
    out.append(p.raw_text[pos:])
    return parse("".join(out), vocab)


# -- tokenizer ------------------------------------------------------------


def _encode(p: AnchoredPrompt, vocab: Vocabulary) -> list[int]:
    ids = [vocab.BOS]
    for token in normalize_text(p.raw_text).split():
        m = _ANCHOR_RE.fullmatch(token)
        if m:
            ids.append(vocab.anchor_id(int(_VALID_ANCHOR_RE.match(m.group(1)).group(1))))
        else:
            ids.append(vocab.lookup(token))
    ids.append(vocab.EOS)
    return ids


def tokenize(p: AnchoredPrompt, vocab: Vocabulary, max_len: int) -> list[int]:
    """Fixed-length id sequence: BOS ... EOS then PAD; anchors never dropped."""
    ids = _encode(p, vocab)
    if len(ids) > max_len:
        kept = ids[:max_len - 1] + [vocab.EOS]
        anchor_ids = set(vocab.anchor_ids.values())
        if anchor_ids & set(ids) != anchor_ids & set(kept):
            raise AnchorTruncated(
                f"prompt of {len(ids)} tokens exceeds max_len {max_len} and would drop an anchor")
        ids = kept
    return ids + [vocab.PAD] * (max_len - len(ids))


def detokenize(ids, vocab: Vocabulary) -> str:
    anchor_words = {v: f"[R{k}]" for k, v in vocab.anchor_ids.items()}
    words = []
    for i in ids:
        i = int(i)
        if i in (vocab.PAD, vocab.BOS, vocab.EOS):
            continue
        if i in anchor_words:
            words.append(anchor_words[i])
        elif i == vocab.UNK:
            words.append("<unk>")
        else:
            words.append(vocab.id_to_word[i])
    return " ".join(words)


def motion_clause(p: AnchoredPrompt, anchor_index: int) -> str:
    """Motion descriptor following anchor k, up to the next anchor or clause.

    For body pairs pass the pair's second anchor (the one the verb follows).
    """
    by_index = {a.index: a for a in p.anchors}
    anchor = by_index[anchor_index]
    end = len(p.raw_text)
    for other in p.anchors:
        if other.char_span[0] > anchor.char_span[1]:
            end = min(end, other.char_span[0])
    tail = p.raw_text[anchor.char_span[1]:end].split(" while ")[0]
    words = [w.strip(_PUNCT) for w in tail.split()]
    return " ".join(w for w in words if w)
