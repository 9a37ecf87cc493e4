import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnf2bnf import toycorpus as tc
from bnf2bnf.config import CorpusConfig
from bnf2bnf.errors import ContractError

from conftest import naive_translate


@pytest.fixture(scope="module")
def spec():
    return tc.make_language(CorpusConfig(), 7)


@pytest.fixture(scope="module")
def renderer():
    return tc.make_renderer(CorpusConfig(), 16, 8, 7)


# language --------------------------------------------------------------------------------


def test_substitution_is_bijection(spec):
    assert sorted(spec.substitution) == list(range(spec.n_source))
    spec.validate()


def test_language_roundtrip_json(spec):
    again = tc.ToyLanguageSpec.from_json(spec.to_json())
    assert again.to_json() == spec.to_json()


def test_degenerate_length_range(spec):
    fixed = tc.ToyLanguageSpec.from_json({**spec.to_json(), "min_len": 3, "max_len": 3})
    rng = np.random.default_rng(0)
    assert all(len(tc.sample_source_sentence(fixed, rng)) == 3 for _ in range(200))


def test_sampling_is_seeded(spec):
    a = tc.sample_source_sentence(spec, np.random.default_rng(5))
    b = tc.sample_source_sentence(spec, np.random.default_rng(5))
    assert a == b


def test_sampling_covers_vocab(spec):
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(10_000):
        s = tc.sample_source_sentence(spec, rng)
        assert spec.min_len <= len(s) <= spec.max_len
        seen.update(s)
    assert seen == set(range(spec.n_source))


def test_plain_tokens_substitute_only(spec):
    plain = [t for t in range(spec.n_source) if t not in spec.expansions and all(t != a for a, _ in spec.reorder_pairs)]
    src = plain[:4]
    assert tc.translate_tokens(src, spec) == [spec.substitution[t] for t in src]


def test_marked_pair_swaps(spec):
    a, b = next((a, b) for a, b in spec.reorder_pairs if b not in spec.expansions)
    assert tc.translate_tokens([a, b], spec) == [spec.substitution[b], spec.substitution[a]]


def test_expansion_lengthens(spec):
    for k, v in spec.expansions.items():
        assert tc.translate_tokens([k], spec) == [spec.substitution[k], v]
    src = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
    assert len(tc.translate_tokens(src, spec)) == len(src) + sum(t in spec.expansions for t in src)


def test_out_of_vocab_rejected(spec):
    with pytest.raises(ContractError):
        tc.translate_tokens([spec.n_source], spec)
    with pytest.raises(ContractError):
        tc.translate_tokens([-1], spec)


def test_matches_naive_interpreter(spec):
    rng = np.random.default_rng(3)
    for _ in range(1000):
        s = [int(t) for t in rng.integers(0, spec.n_source, size=rng.integers(1, 12))]
        assert tc.translate_tokens(s, spec) == naive_translate(s, spec)


# rendering --------------------------------------------------------------------------------


def test_codebook_separation(renderer):
    for book in (renderer.bnf_codebook, renderer.mel_codebook):
        np.testing.assert_allclose(np.linalg.norm(book, axis=1), 1.0)
        d = np.linalg.norm(book[:, None] - book[None], axis=-1)
        assert d[~np.eye(len(book), dtype=bool)].min() >= 0.5


def test_speaker_transform_roundtrip(renderer):
    x = np.random.default_rng(0).standard_normal((5, 16))
    for s in range(renderer.n_speakers):
        np.testing.assert_allclose(renderer.from_speaker(renderer.to_speaker(x, s), s), x, atol=1e-12)


def test_rotation_power():
    q = tc.random_orthogonal(np.random.default_rng(2), 6)
    assert tc.rotation_power(q, 1.0) is q
    np.testing.assert_allclose(tc.rotation_power(q, 0.0), np.eye(6), atol=1e-12)
    for alpha in (0.25, 0.5, 0.9):
        r = tc.rotation_power(q, alpha)
        np.testing.assert_allclose(r @ r.T, np.eye(6), atol=1e-12)
    half = tc.rotation_power(q, 0.5)
    rot = q.copy()
    if np.linalg.det(rot) < 0:
        rot[:, 0] = -rot[:, 0]
    np.testing.assert_allclose(half @ half, rot, atol=1e-9)


def test_weaker_rotation_moves_less():
    q = tc.random_orthogonal(np.random.default_rng(3), 16)
    dist = [np.linalg.norm(tc.rotation_power(q, a) - np.eye(16)) for a in (0.1, 0.3, 0.6)]
    assert dist[0] < dist[1] < dist[2]


def test_identity_rendering(renderer):
    toks = [3, 1, 4]
    frames = tc._render(toks, renderer.bnf_codebook, np.ones(3, dtype=int), 1, 0.0, None)
    np.testing.assert_array_equal(frames, renderer.bnf_codebook[toks])


def test_frame_counts(renderer):
    f = tc.render_bnf([1, 2], renderer, None, np.random.default_rng(0), durations=np.array([3, 3]))
    assert f.shape == (6, 16)
    mel = tc.render_mel([1, 2], renderer, np.array([2, 2]), upsample=4)
    assert mel.shape == (16, 8)


def test_mel_r1_is_bnf_scheme(renderer):
    d = np.array([2, 3, 4])
    mel = tc.render_mel([5, 6, 7], renderer, d)
    ref = tc._render([5, 6, 7], renderer.mel_codebook, d, renderer.smoothing_width, 0.0, None)
    np.testing.assert_array_equal(mel, ref)


def test_render_is_seeded(renderer):
    a = tc.render_bnf([1, 2, 3], renderer, 2, np.random.default_rng(9))
    b = tc.render_bnf([1, 2, 3], renderer, 2, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_render_empty_rejected(renderer):
    with pytest.raises(ContractError):
        tc.render_bnf([], renderer, None, np.random.default_rng(0))


def test_run_length_collapse():
    book = np.eye(3)
    frames = book[[0, 0, 1, 1, 1]]
    assert tc.oracle_decode(frames, book) == [0, 1]


def test_min_run_drops_short_runs():
    book = np.eye(3)
    frames = book[[0, 0, 2, 0, 0, 1, 1]]
    assert tc.oracle_decode(frames, book, min_run=2) == [0, 1]


def test_noisy_decode_recovers_tokens(spec, renderer):
    rng = np.random.default_rng(4)
    for _ in range(1000):
        toks = tc.sample_source_sentence(spec, rng)
        s = int(rng.integers(0, renderer.n_speakers))
        f = tc.render_bnf(toks, renderer, s, rng)
        assert tc.oracle_decode(f, renderer.bnf_codebook, renderer, s) == toks


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 23), min_size=1, max_size=12), st.integers(0, 2**31))
def test_clean_decode_inverts_render(toks, seed):
    toks = [t for i, t in enumerate(toks) if i == 0 or t != toks[i - 1]]
    r = tc.make_renderer(CorpusConfig(), 16, 8, 7)
    rng = np.random.default_rng(seed)
    f = tc.render_bnf(toks, r, None, rng, noise=0.0)
    assert tc.oracle_decode(f, r.bnf_codebook) == toks
    d = r.sample_durations(len(toks), rng)
    assert tc.oracle_decode(tc.render_mel(toks, r, d), r.mel_codebook) == toks


# corpus ------------------------------------------------------------------------------------


def test_corpus_pairs_consistent(spec, renderer):
    c = tc.generate_corpus(spec, renderer, 60, 3, eval_size=6, upsample=2)
    assert len(c.pairs) == 60 and len(c.eval) == 6 and len(c.train) == 54
    for p in c.pairs:
        assert p.tgt_tokens == tc.translate_tokens(p.src_tokens, spec)
        assert len(p.f_tgt) == p.tgt_durations.sum()
        assert len(p.mel) == 2 * len(p.f_tgt)
        assert 0 <= p.speaker < renderer.n_speakers


def test_tied_durations(spec, renderer):
    c = tc.generate_corpus(spec, renderer, 30, 3, eval_size=3, tied_durations=True)
    for p in c.pairs:
        srcs = tc.translate_with_sources(p.src_tokens, spec)
        # every source token's frames reappear once on the target side
        assert sum(d for (_, pos), d in zip(srcs, p.tgt_durations) if pos is not None) == len(p.f_src)
    plain = tc.generate_corpus(spec, renderer, 30, 3, eval_size=3)
    for a, b in zip(c.pairs, plain.pairs):
        np.testing.assert_array_equal(a.f_src, b.f_src)


def test_single_pair_goes_to_train(spec, renderer):
    c = tc.generate_corpus(spec, renderer, 1, 0)
    assert c.train_ids == [0] and c.eval_ids == []


def test_size_zero_rejected(spec, renderer):
    with pytest.raises(ContractError):
        tc.generate_corpus(spec, renderer, 0, 0)


def test_default_split_is_five_percent(spec, renderer):
    c = tc.generate_corpus(spec, renderer, 100, 0)
    assert len(c.eval) == 5


def test_no_sentence_leakage(spec, renderer):
    c = tc.generate_corpus(spec, renderer, 2000, 11, eval_size=100)
    train = {tuple(p.src_tokens) for p in c.train}
    held = {tuple(p.src_tokens) for p in c.eval}
    assert not train & held


def test_speakers_roughly_uniform(spec, renderer):
    c = tc.generate_corpus(spec, renderer, 800, 5)
    counts = np.bincount([p.speaker for p in c.pairs], minlength=renderer.n_speakers)
    assert counts.min() > 60


def _digest(directory):
    h = hashlib.sha256()
    for f in sorted(directory.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_files_byte_identical_and_roundtrip(tmp_path, spec, renderer):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        tc.write_corpus(tc.generate_corpus(spec, renderer, 20, 4, eval_size=2), d)
    assert _digest(a) == _digest(b)
    assert tc.corpus_fingerprint(a) == tc.corpus_fingerprint(b)
    back = tc.read_corpus(a)
    orig = tc.generate_corpus(spec, renderer, 20, 4, eval_size=2)
    assert back.train_ids == orig.train_ids
    for p, q in zip(back.pairs, orig.pairs):
        assert p.src_tokens == q.src_tokens and p.speaker == q.speaker
        np.testing.assert_array_equal(p.f_src, q.f_src)
        np.testing.assert_array_equal(p.mel, q.mel)


def test_read_missing_corpus(tmp_path):
    with pytest.raises(FileNotFoundError):
        tc.read_corpus(tmp_path / "nope")
