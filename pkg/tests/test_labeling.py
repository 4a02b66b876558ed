import numpy as np
import pytest
from hypothesis import given, strategies as st

from phrasedet.geometry import Box, InvalidBox
from phrasedet.labeling import (Corpus, ImageRecord, LabelConfig, RegionAnnotation, RegionTextLabel,
                                ambiguous_set, best_overlap, effective_pairs, label, label_matrix,
                                moderate_set, positive_set)
from phrasedet.textsim import normalize, similarity

from oracles import plain_iou, relabel
from strategies import mini_corpus

RC, BS, GT = normalize("red circle"), normalize("blue square"), normalize("green triangle")
CFG = LabelConfig()
G = Box(0, 0, 10, 10)


def _rec(*anns, proposals=(), image_id="a"):
    return ImageRecord(image_id, 40, 40, tuple(RegionAnnotation(b, t) for b, t in anns), tuple(proposals))


def test_record_rejects_out_of_bounds():
    with pytest.raises(ValueError, match="out of bounds"):
        _rec((Box(30, 30, 41, 35), RC))
    with pytest.raises(InvalidBox):
        Box(3, 3, 2, 5)


def test_corpus_frequency_index():
    c = Corpus((_rec((G, RC), (Box(5, 5, 9, 9), RC), (G, BS)), _rec((G, RC), image_id="b")))
    assert c.freq == {RC: 3, BS: 1}
    assert sum(c.freq.values()) == sum(len(r.annotations) for r in c.images)
    assert set(c.phrases) == {RC, BS}


def test_best_overlap_cases():
    rec = _rec((G, RC), (Box(0, 0, 10, 20), RC))
    assert best_overlap(rec, G, RC) == 1.0
    assert best_overlap(rec, G, BS) == 0.0
    r = Box(0, 0, 10, 16)
    ious = [plain_iou(b.to_list(), r.to_list()) for b in (G, Box(0, 0, 10, 20))]
    assert best_overlap(rec, r, RC) == max(ious) == 0.8


def test_threshold_boundaries():
    rec = _rec((G, RC))
    at_pos = Box(0, 0, 10, 9)     # IoU exactly 0.9
    at_neg = Box(0, 0, 10, 1)     # IoU exactly 0.1
    assert best_overlap(rec, at_pos, RC) == 0.9
    assert RC in positive_set(rec, at_pos, CFG)
    assert RC not in moderate_set(rec, at_pos, CFG)
    assert best_overlap(rec, at_neg, RC) == 0.1
    assert RC not in moderate_set(rec, at_neg, CFG)
    assert RC in moderate_set(rec, Box(0, 0, 10, 5), CFG)
    assert RC not in positive_set(rec, Box(0, 0, 10, 7), CFG)


def test_label_variants():
    corpus = Corpus((_rec((G, RC), (Box(20, 20, 30, 30), BS)), _rec((G, GT), image_id="b")))
    rec = corpus.images[0]
    assert label(corpus, rec, G, RC, CFG) is RegionTextLabel.POSITIVE
    assert label(corpus, rec, Box(0, 0, 10, 5), RC, CFG) is RegionTextLabel.UNCERTAIN
    assert label(corpus, rec, Box(0, 0, 10, 5), GT, CFG) is RegionTextLabel.NEGATIVE
    assert label(corpus, rec, Box(0, 0, 10, 5), BS, CFG) is RegionTextLabel.NEGATIVE


def test_ambiguous_uses_global_phrase_set():
    arc = normalize("a red circle")
    corpus = Corpus((_rec((G, RC)), _rec((G, arc), image_id="b")))
    rec = corpus.images[0]
    r = Box(0, 0, 10, 5)
    assert similarity(arc, RC) > CFG.tau
    assert ambiguous_set(corpus, rec, r, CFG) == {RC, arc}
    assert ambiguous_set(corpus, rec, G, CFG) == set()  # no moderate phrase
    off = LabelConfig(prune_ambiguous=False)
    assert ambiguous_set(corpus, rec, r, off) == set()


def test_positive_phrase_is_never_ambiguous():
    # the same phrase both exactly matched by one box and moderately by another
    rec = _rec((G, RC), (Box(0, 0, 10, 20), RC))
    corpus = Corpus((rec,))
    assert label(corpus, rec, G, RC, CFG) is RegionTextLabel.POSITIVE


def test_effective_pairs_partition():
    corpus = Corpus((_rec((G, RC), (Box(20, 20, 30, 30), BS), proposals=(Box(0, 0, 10, 5),)),
                     _rec((G, GT), image_id="b")))
    rec = corpus.images[0]
    ep = effective_pairs(corpus, rec, CFG, rest_phrases=[])
    assert ep.rest == []
    assert (G, RC) in ep.pos and (Box(20, 20, 30, 30), BS) in ep.pos
    assert (Box(0, 0, 10, 5), RC) not in ep.pos + ep.neg  # uncertain pair dropped
    ep = effective_pairs(corpus, rec, CFG, rest_phrases=[GT])
    assert {t for _, t in ep.rest} == {GT}
    with pytest.raises(ValueError):
        effective_pairs(corpus, rec, CFG, rest_phrases=[RC])


def test_config_validation():
    with pytest.raises(ValueError):
        LabelConfig(eta_pos=0.1, eta_neg=0.1)
    with pytest.raises(ValueError):
        LabelConfig(tau=1.5)


def _oracle_label(corpus, rec, r, t, cfg):
    anns = [(a.region.to_list(), a.phrase) for a in rec.annotations]
    return relabel(anns, r.to_list(), t, corpus.phrases, cfg.eta_pos, cfg.eta_neg, cfg.tau,
                   cfg.prune_ambiguous, lambda a, b: similarity(a, b))


@given(st.integers(0, 2**31), st.sampled_from([0.2, 0.3, 0.6]), st.booleans())
def test_labels_match_brute_force(seed, tau, prune):
    rng = np.random.default_rng(seed)
    corpus = mini_corpus(rng)
    cfg = LabelConfig(tau=tau, prune_ambiguous=prune)
    for rec in corpus.images:
        regions = rec.regions
        if not regions:
            continue
        mat = label_matrix(rec, np.array([r.to_list() for r in regions]), corpus.phrases, cfg)
        for i, r in enumerate(regions):
            for j, t in enumerate(corpus.phrases):
                want = _oracle_label(corpus, rec, r, t, cfg)
                assert int(label(corpus, rec, r, t, cfg)) == want
                assert mat[i, j] == want


@given(st.integers(0, 2**31))
def test_partition_and_monotonicity(seed):
    rng = np.random.default_rng(seed)
    corpus = mini_corpus(rng)
    T = set(corpus.phrases)
    for rec in corpus.images:
        for r in rec.regions:
            P = positive_set(rec, r, CFG)
            A = ambiguous_set(corpus, rec, r, CFG)
            N = {t for t in T if label(corpus, rec, r, t, CFG) is RegionTextLabel.NEGATIVE}
            assert not (P & A) and not (P & N) and not (A & N)
            assert P | A | N == T
            assert positive_set(rec, r, LabelConfig(eta_pos=0.95)) <= P
            assert ambiguous_set(corpus, rec, r, LabelConfig(tau=0.6)) <= A
        for a in rec.annotations:
            assert best_overlap(rec, a.region, a.phrase) == 1.0


@given(st.integers(0, 2**31))
def test_no_pruning_keeps_every_pair(seed):
    rng = np.random.default_rng(seed)
    corpus = mini_corpus(rng)
    cfg = LabelConfig(prune_ambiguous=False)
    for rec in corpus.images:
        others = [t for t in corpus.phrases if t not in set(rec.phrases)]
        ep = effective_pairs(corpus, rec, cfg, rest_phrases=others)
        total = len(ep.pos) + len(ep.neg) + len(ep.rest)
        assert total == len(rec.regions) * (len(rec.phrases) + len(others))
        for a in rec.annotations:
            assert (a.region, a.phrase) in ep.pos
