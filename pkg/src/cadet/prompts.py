"""Caption templates and the closed vocabulary.

Captions enumerate placed components ("a red pin and a red pin and a blue
bolt"), wrapped in one of several CLIP-style photo templates. The vocabulary
is closed: template words + component nouns + color adjectives + a couple of
generic init words. No subword tokenization.
"""

from __future__ import annotations

# (prefix, suffix); items slot in between. Empty item list collapses to
# "<prefix> a board".
_TEMPLATES = [
    ("a photo of", "on a board"),
    ("a picture of", "on a board"),
    ("a close up photo of", "on a board"),
    ("a top view of", "on a board"),
    ("a rendering of", "on a board"),
    ("a snapshot of", "on a board"),
    ("a cropped photo of", "on a board"),
    ("a bright photo of", "on a board"),
    ("a photo of a board with", ""),
]

NOUNS = ("pin", "bolt", "cap", "tube", "screw", "washer")
ADJECTIVES = ("red", "blue", "green", "yellow", "magenta", "cyan", "orange", "white")
GENERIC_WORDS = ("object", "thing", "part")

PAD_WORD = "<pad>"


def num_templates() -> int:
    return len(_TEMPLATES)


def make_template_prompt(
    names: list[str],
    template_id: int,
    adjectives: list[str] | None = None,
) -> str:
    """Join nouns (optionally with color adjectives) into a caption.

    Nouns appear in the given order, each exactly once per list entry.
    """
    if not 0 <= template_id < len(_TEMPLATES):
        raise ValueError(f"template id {template_id} out of range")
    prefix, suffix = _TEMPLATES[template_id]
    if not names:
        # The empty scene: every template degrades to its board-only form.
        if template_id == len(_TEMPLATES) - 1:
            return "a photo of a board"
        return f"{prefix} a board"
    if adjectives is not None and len(adjectives) != len(names):
        raise ValueError("need one adjective per noun")
    items = []
    for i, n in enumerate(names):
        if adjectives is not None:
            items.append(f"a {adjectives[i]} {n}")
        else:
            items.append(f"a {n}")
    body = " and ".join(items)
    parts = [prefix, body]
    if suffix:
        parts.append(suffix)
    return " ".join(parts)


def parse_caption(caption: str) -> tuple[int, list[tuple[str | None, str]]]:
    """Invert make_template_prompt: (template_id, [(adjective | None, noun)]).

    Raises ValueError if the caption matches no template.
    """
    for tid, (prefix, suffix) in enumerate(_TEMPLATES):
        if not caption.startswith(prefix + " "):
            continue
        body = caption[len(prefix) + 1 :]
        if suffix:
            if not body.endswith(" " + suffix):
                continue
            body = body[: -len(suffix) - 1]
        if body == "a board" and tid != len(_TEMPLATES) - 1:
            return tid, []
        items = []
        ok = True
        for chunk in body.split(" and "):
            words = chunk.split()
            if len(words) == 2 and words[0] == "a" and words[1] in NOUNS:
                items.append((None, words[1]))
            elif (
                len(words) == 3
                and words[0] == "a"
                and words[1] in ADJECTIVES
                and words[2] in NOUNS
            ):
                items.append((words[1], words[2]))
            else:
                ok = False
                break
        if ok:
            return tid, items
    if caption == "a photo of a board":
        return len(_TEMPLATES) - 1, []
    raise ValueError(f"caption does not match any template: {caption!r}")


def vocabulary_words() -> list[str]:
    """All words of the closed vocabulary; PAD_WORD always at index 0."""
    words: list[str] = [PAD_WORD]
    seen = {PAD_WORD}
    def add(w: str):
        if w not in seen:
            seen.add(w)
            words.append(w)
    for prefix, suffix in _TEMPLATES:
        for w in (prefix + " " + suffix).split():
            add(w)
    add("and")
    add("board")
    for w in NOUNS + ADJECTIVES + GENERIC_WORDS:
        add(w)
    return words
