import numpy as np
import pytest
import torch

from cadet.anogen import PromptEdit, _edited_prompt, _ls_prompt, modify_prompt
from cadet.prompts import make_template_prompt, parse_caption
from cadet.textenc import MAX_CONTEXT


BASE = make_template_prompt(["pin", "bolt", "pin"], 0,
                            adjectives=["red", "blue", "red"])


def _nouns(prompt):
    return [n for _, n in parse_caption(prompt)[1]]


def test_remove_edit_drops_one_occurrence():
    out = modify_prompt(BASE, PromptEdit("remove", 0))
    assert _nouns(out) == ["bolt", "pin"]


def test_duplicate_edit_repeats_occurrence():
    out = modify_prompt(BASE, PromptEdit("duplicate", 1))
    assert _nouns(out).count("bolt") == 2


def test_swap_edit_exchanges_nouns():
    out = modify_prompt(BASE, PromptEdit("swap", 0, 1))
    assert _nouns(out) == ["bolt", "pin", "pin"]


def test_recolor_edit_changes_adjective_only():
    out = modify_prompt(BASE, PromptEdit("recolor-adjective", 1, "green"))
    _, items = parse_caption(out)
    assert items[1] == ("green", "bolt")
    assert _nouns(out) == _nouns(BASE)


def test_edit_preserves_template():
    for tid in range(3):
        base = make_template_prompt(["pin", "bolt"], tid,
                                    adjectives=["red", "blue"])
        out = modify_prompt(base, PromptEdit("remove", 0))
        assert parse_caption(out)[0] == tid


def test_edited_prompt_kinds(rule):
    rng = np.random.default_rng(0)
    for kind in ("remove", "duplicate", "swap", "recolor-adjective"):
        edited, full = _edited_prompt(rule, kind, rng)
        assert full  # full pre-edit prompt always present
        if kind == "remove":
            assert len(_nouns(edited)) == len(_nouns(full)) - 1
        elif kind == "duplicate":
            if len(full.split()) + 4 > MAX_CONTEXT:
                # caption cannot grow: duplication falls back to a removal
                assert len(_nouns(edited)) == len(_nouns(full)) - 1
            else:
                assert len(_nouns(edited)) == len(_nouns(full)) + 1


def test_edited_prompt_none_kind_is_identity(rule):
    rng = np.random.default_rng(1)
    edited, full = _edited_prompt(rule, "none", rng)
    assert edited == full


def test_edited_prompt_rejects_unknown_kind(rule):
    with pytest.raises(ValueError):
        _edited_prompt(rule, "explode", np.random.default_rng(0))


def test_ls_prompt_parses_and_varies(rule):
    rng = np.random.default_rng(2)
    seen = set()
    for _ in range(30):
        p = _ls_prompt(rule, rng)
        _, items = parse_caption(p)  # must stay parseable
        seen.add(tuple(n for _, n in items))
    assert len(seen) > 3  # combinations actually vary


def test_filter_by_distance_band(rule):
    from cadet.anogen import GenCandidate, calibrate_band, filter_by_distance
    from cadet.refbank import FeatureEncoder, build_bank
    from cadet.scenegen import render_scene, sample_normal

    torch.manual_seed(0)
    enc = FeatureEncoder(n_components=len(rule.components)).eval()
    normals = [render_scene(sample_normal(rule, s), rule, seed=s)[0]
               for s in range(12)]
    bank = build_bank(normals[:8], enc)
    lo, hi = calibrate_band(normals[8:], bank, enc)
    assert 0 < lo < hi
    assert hi >= 3 * lo  # widen factor is a lower bound on the ceiling

    rng = np.random.default_rng(3)
    cands = [
        GenCandidate(image=normals[9], prompt="p", full_prompt="p",
                     edit_kind="none", seed=0, tokens=None, attention=None),
        GenCandidate(image=rng.random((64, 64, 3)).astype(np.float32),
                     prompt="q", full_prompt="q", edit_kind="ls", seed=1,
                     tokens=None, attention=None),
    ]
    accepted = filter_by_distance(cands, bank, enc, lo, hi)
    for c in cands:  # provenance filled on every candidate
        assert c.d is not None and c.delta is not None and c.nn_index is not None
    for c in accepted:
        assert lo <= c.delta <= hi
