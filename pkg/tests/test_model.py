import numpy as np
import pytest
from hypothesis import given, strategies as st

from phrasedet.geometry import InvalidBox
from phrasedet.model import (ALPHABET, DEFAULT_ALPHABET, Alphabet, DynamicHead, ModelConfig,
                             PhraseRegionModel, TextPathway, TextPathwayConfig, VisualPathway,
                             VisualPathwayConfig, classifier_from_text, dynamic_regularizer,
                             encode_phrase, image_to_input, render_phrase, score, score_matrix)
from phrasedet.neuralcore import ParameterStore, Tensor
from phrasedet.textsim import normalize

NARROW = TextPathwayConfig(conv=((7, 4, 2), (7, 4, 0), (3, 4, 0), (3, 4, 2), (3, 6, 0), (3, 6, 2)),
                           dense=(8, 8))


def test_alphabet():
    assert len(DEFAULT_ALPHABET) == 74 and " " in ALPHABET and len(set(ALPHABET)) == 74
    with pytest.raises(ValueError):
        Alphabet(("a", "a", " "))


def test_encoding_is_one_hot():
    enc = encode_phrase(normalize("Red circle, left!"))
    assert enc.shape == (74, 256)
    assert np.all(enc.sum(axis=0) == 1)


def test_cat_replicates_with_spaces():
    enc = encode_phrase(normalize("cat"))
    text = ("cat " * 64)[:256]
    want = np.zeros((74, 256))
    for j, ch in enumerate(text):
        want[ALPHABET.index(ch), j] = 1
    assert np.array_equal(enc, want)


def test_exact_length_phrase_not_replicated():
    raw = ("ab " * 90)[:255] + "z"
    assert len(raw) == 256
    assert render_phrase(raw) == raw


def test_unknown_characters_become_space():
    enc = encode_phrase("aéb", input_length=4)
    space = ALPHABET.index(" ")
    assert enc[space, 1] == 1 and enc[ALPHABET.index("a"), 0] == 1


def test_empty_phrase_rejected():
    with pytest.raises(ValueError):
        encode_phrase("")


def test_table_s1_lengths_and_width():
    cfg = TextPathwayConfig()
    assert cfg.lengths() == [128, 128, 128, 64, 64, 32]
    assert cfg.out_dim == 2048


@pytest.mark.slow
def test_full_text_pathway_forward_shapes():
    store = ParameterStore()
    tp = TextPathway(TextPathwayConfig(), store, np.random.default_rng(0))
    trace = []
    out = tp.forward(encode_phrase(normalize("red circle")), trace)
    assert out.shape == (2048,)
    assert [s[2] for s in trace[:6]] == [128, 128, 128, 64, 64, 32]
    assert [s[1] for s in trace[:6]] == [256, 256, 256, 256, 512, 512]


def test_text_forward_zero_and_determinism(rng):
    store = ParameterStore()
    tp = TextPathway(NARROW, store, rng)
    trace = []
    a = tp.forward(encode_phrase(normalize("blue square")), trace).data
    assert [s[2] for s in trace[:6]] == [128, 128, 128, 64, 64, 32]
    b = tp.forward(encode_phrase(normalize("blue square"))).data
    assert np.array_equal(a, b) and a.shape == (8,)
    for p in store:
        p.data[...] = 0
    assert np.all(tp.forward(np.zeros((74, 256))).data == 0)
    with pytest.raises(ValueError):
        tp.forward(np.zeros((74, 128)))


def _visual(rng, **kw):
    store = ParameterStore()
    return VisualPathway(VisualPathwayConfig(**kw), store, rng)


def test_visual_stride_matches_downscale(rng):
    vp = _visual(rng, channels=(4, 4))
    assert vp.cfg.stride == 4
    assert vp.feature_map(np.zeros((3, 32, 24))).shape == (4, 8, 6)


def test_visual_per_box_equals_batched(rng):
    vp = _visual(rng, channels=(4, 4, 4), dense=(6,))
    img = image_to_input(rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8))
    boxes = np.array([[0, 0, 20, 20], [5, 10, 40, 47], [0, 0, 20, 20], [30, 2, 48, 16]], dtype=float)
    all_rows = vp.forward(img, boxes).data
    assert np.array_equal(all_rows[0], all_rows[2])
    for i, b in enumerate(boxes):
        # BLAS may sum in a different order for a different batch size
        np.testing.assert_allclose(vp.forward(img, b[None]).data[0], all_rows[i], rtol=0, atol=1e-12)


def test_visual_identity_backbone_gives_global_max(rng):
    vp = _visual(rng, channels=(), roi_bins=1, dense=())
    img = rng.normal(size=(3, 8, 8))
    out = vp.forward(img, np.array([[0, 0, 8, 8]], dtype=float)).data
    np.testing.assert_array_equal(out[0], img.reshape(3, -1).max(axis=1))


def test_visual_rejects_bad_box_by_index(rng):
    vp = _visual(rng, channels=(4,), dense=(4,))
    with pytest.raises(InvalidBox, match="#1"):
        vp.forward(np.zeros((3, 16, 16)), np.array([[0, 0, 4, 4], [2, 2, 20, 8]], dtype=float))


def _head(rng, d_txt=5, d_rgn=4, bias=True):
    return DynamicHead(d_txt, d_rgn, ParameterStore(), rng, bias)


def test_classifier_from_text(rng):
    head = _head(rng)
    w, b = classifier_from_text(np.zeros(5), head)
    assert np.all(w.data == 0) and b.data == 0
    phi = rng.normal(size=5)
    w, b = classifier_from_text(phi, head)
    A, a = head.A_w.data, head.a_b.data
    np.testing.assert_allclose(w.data, [sum(A[i, j] * phi[i] for i in range(5)) for j in range(4)], atol=1e-12)
    assert b.item() == pytest.approx(sum(a[i] * phi[i] for i in range(5)), abs=1e-12)
    head.A_w.data[...] = 0
    assert np.all(classifier_from_text(phi, head)[0].data == 0)


def test_score_cases(rng):
    rg = rng.normal(size=4)
    assert score(np.zeros(4), Tensor(np.array(1.5)), rg).item() == 1.5
    head = _head(rng)
    w, b = classifier_from_text(np.zeros(5), head)
    assert score(w, b, rg).item() == 0.0
    wv = rng.normal(size=4)
    assert score(wv, Tensor(np.array(0.3)), rg).item() == pytest.approx(float(wv @ rg) + 0.3, abs=1e-12)


def test_score_matrix_equals_per_pair(rng):
    head = _head(rng)
    phi_t = rng.normal(size=(7, 5))
    phi_t[3] = 0
    phi_r = rng.normal(size=(5, 4))
    w, b = classifier_from_text(phi_t, head)
    m = score_matrix(phi_r, w, b).data
    assert m.shape == (5, 7)
    assert np.all(m[:, 3] == 0)
    for i in range(5):
        for j in range(7):
            assert m[i, j] == pytest.approx(score(w.data[j], Tensor(b.data[j]), phi_r[i]).item(), abs=1e-12)
    one = score_matrix(phi_r[:1], Tensor(w.data[:1]), Tensor(b.data[:1])).data
    assert one[0, 0] == pytest.approx(score(w.data[0], Tensor(b.data[0]), phi_r[0]).item(), abs=1e-12)


def test_dynamic_regularizer(rng):
    assert dynamic_regularizer(np.zeros(3), np.array(0.0)).item() == 0
    assert dynamic_regularizer(np.array([3.0, 4.0]), np.array(0.0)).item() == 25
    head = _head(rng)
    phi = rng.normal(size=5)
    g1 = dynamic_regularizer(*classifier_from_text(phi, head)).item()
    g2 = dynamic_regularizer(*classifier_from_text(2 * phi, head)).item()
    assert g2 == pytest.approx(4 * g1, rel=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_head_is_bilinear_plus_bias(alpha, beta):
    rng = np.random.default_rng(5)
    head = _head(rng)
    p1, p2, r = rng.normal(size=5), rng.normal(size=5), rng.normal(size=4)

    def f(phi, rg):
        return score(*classifier_from_text(phi, head), rg).item()

    assert f(alpha * p1 + beta * p2, r) == pytest.approx(alpha * f(p1, r) + beta * f(p2, r), abs=1e-9)
    r2 = rng.normal(size=4)
    b = classifier_from_text(p1, head)[1].item()
    lhs = f(p1, alpha * r + beta * r2) - b
    assert lhs == pytest.approx(alpha * (f(p1, r) - b) + beta * (f(p1, r2) - b), abs=1e-9)


def test_head_without_bias_is_plain_bilinear(rng):
    head = _head(rng, bias=False)
    phi, rg = rng.normal(size=5), rng.normal(size=4)
    got = score(*classifier_from_text(phi, head), rg).item()
    assert got == pytest.approx(float(phi @ head.A_w.data @ rg), abs=1e-12)
    assert not head.a_b.requires_grad


def test_ranking_invariant_to_constant_shift(rng):
    s = rng.normal(size=20)
    assert np.array_equal(np.argsort(-s, kind="stable"), np.argsort(-(s + 7.5), kind="stable"))


def test_model_config_round_trip():
    cfg = ModelConfig(text=NARROW, visual=VisualPathwayConfig(channels=(8, 8)), head_bias=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_model_scores_shape(small_data):
    rec = small_data.corpus.images[0]
    model = PhraseRegionModel(ModelConfig(text=NARROW, visual=VisualPathwayConfig(channels=(4, 4, 4), dense=(8,))))
    s = model.scores(small_data.pixels[rec.image_id], np.array([p.to_list() for p in rec.proposals[:5]]),
                     list(rec.phrases))
    assert s.shape == (5, len(rec.phrases)) and np.isfinite(s).all()
