import itertools

import numpy as np
import pytest

from modules import captioner as cap
from modules.decoding import (
    DecodeConfig,
    beam_decode,
    draw_token,
    greedy_decode,
    greedy_decode_batch,
    member_rng,
    sample_decode,
    sample_decode_batch,
)
from modules.dtypes import BOS, EOS, TokenSeq
from modules.exceptions import ConfigError, ShapeError

NO_IMAGE = np.zeros((1, 1))


def hashed_model(vocab: int, seed: int = 0, scale: float = 2.0):
    """A fixed random next-token distribution for every prefix."""

    def step(prefixes, features):
        del features
        return np.stack([np.random.default_rng([seed, *map(int, row)]).normal(size=vocab) * scale for row in prefixes])

    return step


def table_model(vocab: int, peaks: dict[int, int]):
    """Puts almost all mass on peaks[prefix length]; EOS otherwise."""

    def step(prefixes, features):
        del features
        out = np.zeros((len(prefixes), vocab))
        for row, prefix in enumerate(prefixes):
            out[row, peaks.get(len(prefix), EOS)] = 30.0
        return out

    return step


def policy_score(model, ids):
    total = 0.0
    for t in range(1, len(ids)):
        total += cap.policy_log_probs_array(model(np.array([ids[:t]]), NO_IMAGE[None]))[0, ids[t]]
    return total


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"beam_size": 0}, {"temperature": 0.0}, {"max_len": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DecodeConfig(**kwargs)


class TestGreedy:
    def test_eos_peaked_model_stops_immediately(self):
        assert greedy_decode(NO_IMAGE, table_model(6, {}), DecodeConfig()).ids == (BOS, EOS)

    def test_follows_the_argmax(self):
        model = table_model(6, {1: 4, 2: 5})
        assert greedy_decode(NO_IMAGE, model, DecodeConfig()).ids == (BOS, 4, 5, EOS)

    def test_truncates_at_max_len(self):
        model = table_model(6, dict.fromkeys(range(1, 50), 4))
        seq = greedy_decode(NO_IMAGE, model, DecodeConfig(max_len=3))
        assert seq.ids == (BOS, 4, 4, 4)
        assert not seq.finished

    def test_ties_go_to_lowest_id(self):
        def flat(prefixes, features):
            del features
            out = np.zeros((len(prefixes), 6))
            out[:, 0:2] = 99.0
            return out

        assert greedy_decode(NO_IMAGE, flat, DecodeConfig()).ids == (BOS, EOS)

    def test_batch_matches_single(self, cfg, params, features):
        model = cap.step_fn(params, cfg)
        decode = DecodeConfig(max_len=5)
        feats = np.stack([features, features * 2.0, -features])
        batch = greedy_decode_batch(feats, model, decode)
        assert batch == [greedy_decode(f, model, decode) for f in feats]

    def test_rejects_batched_features(self):
        with pytest.raises(ShapeError):
            greedy_decode(np.zeros((2, 1, 1)), table_model(6, {}), DecodeConfig())


class TestBeam:
    @pytest.mark.parametrize("seed", range(50))
    def test_beam_of_one_is_greedy(self, seed):
        model = hashed_model(7, seed)
        decode = DecodeConfig(max_len=5, beam_size=1)
        assert beam_decode(NO_IMAGE, model, decode) == greedy_decode(NO_IMAGE, model, decode)

    @pytest.mark.parametrize("seed", range(12))
    def test_wide_beam_finds_the_best_finished_caption(self, seed):
        """Exhaustive search over two content tokens and at most three generated tokens."""
        model = hashed_model(5, seed)
        best_score, best_ids = -np.inf, None
        for length in range(3):
            for body in itertools.product((3, 4), repeat=length):
                ids = (BOS, *body, EOS)
                score = policy_score(model, ids)
                if score > best_score:
                    best_score, best_ids = score, ids
        found = beam_decode(NO_IMAGE, model, DecodeConfig(max_len=3, beam_size=64))
        assert found.ids == best_ids

    def test_returns_partial_when_nothing_finishes(self):
        model = table_model(6, dict.fromkeys(range(1, 50), 4))
        seq = beam_decode(NO_IMAGE, model, DecodeConfig(max_len=3, beam_size=1))
        assert seq.ids == (BOS, 4, 4, 4)

    def test_beam_beats_greedy_on_a_trap(self):
        """Greedy takes the likelier first word; the other branch ends with more total mass."""

        def trap(prefixes, features):
            del features
            out = np.full((len(prefixes), 6), -20.0)
            for row, prefix in enumerate(prefixes):
                last = int(prefix[-1])
                if len(prefix) == 1:
                    out[row, 4], out[row, 5] = 0.2, 0.0
                elif last == 4:
                    out[row, [2, 3, 4, 5]] = 0.0
                else:
                    out[row, EOS] = 10.0
            return out

        decode = DecodeConfig(max_len=3, beam_size=2)
        assert greedy_decode(NO_IMAGE, trap, decode).ids[1] == 4
        assert beam_decode(NO_IMAGE, trap, decode).ids == (BOS, 5, EOS)


class TestSampling:
    def test_draw_token_matches_softmax(self):
        rng = np.random.default_rng(0)
        probs = np.array([0.1, 0.2, 0.3, 0.4])
        draws = np.array([draw_token(np.log(probs), 1.0, rng) for _ in range(100_000)])
        np.testing.assert_allclose(np.bincount(draws, minlength=4) / len(draws), probs, atol=0.01)

    def test_uniform_logits_give_uniform_draws(self):
        rng = np.random.default_rng(1)
        draws = np.array([draw_token(np.zeros(4), 1.0, rng) for _ in range(100_000)])
        np.testing.assert_allclose(np.bincount(draws, minlength=4) / len(draws), 0.25, atol=0.01)

    def test_cold_temperature_is_argmax(self):
        rng = np.random.default_rng(2)
        logits = np.array([0.1, 0.5, 0.45, -1.0])
        assert {draw_token(logits, 1e-6, rng) for _ in range(200)} == {1}

    @pytest.mark.parametrize("seed", range(6))
    def test_cold_sampling_equals_greedy(self, seed):
        model = hashed_model(7, seed)
        greedy = greedy_decode(NO_IMAGE, model, DecodeConfig(max_len=5))
        cold = sample_decode(NO_IMAGE, model, DecodeConfig(max_len=5, temperature=1e-6), np.random.default_rng(seed))
        assert cold.seq == greedy

    def test_first_token_frequency(self):
        """With equal raw logits over PAD, BOS, EOS and one word, EOS comes first half the time."""

        def flat(prefixes, features):
            del features
            return np.zeros((len(prefixes), 4))

        stops = sum(
            sample_decode(NO_IMAGE, flat, DecodeConfig(max_len=4), np.random.default_rng(i)).seq.ids[1] == EOS
            for i in range(4000)
        )
        assert stops / 4000 == pytest.approx(0.5, abs=0.04)

    def test_sample_log_probs_match_model(self, cfg, params, features):
        model = cap.step_fn(params, cfg)
        for member in range(5):
            sample = sample_decode(features, model, DecodeConfig(max_len=5), member_rng(0, 3, member))
            assert len(sample.log_probs) == len(sample.seq) - 1
            expected = cap.sequence_log_prob(sample.seq, features, params, cfg)
            assert sample.total_log_prob == pytest.approx(expected, abs=1e-10)

    def test_fixed_seed_is_reproducible(self, cfg, params, features):
        model = cap.step_fn(params, cfg)
        decode = DecodeConfig(max_len=5)
        a = sample_decode(features, model, decode, member_rng(11, 2, 1))
        b = sample_decode(features, model, decode, member_rng(11, 2, 1))
        assert a.seq == b.seq
        np.testing.assert_array_equal(a.log_probs, b.log_probs)

    def test_member_streams_differ(self):
        assert member_rng(0, 1, 0).random() != member_rng(0, 1, 1).random()

    def test_batch_rows_use_their_own_rng(self, cfg, params, features):
        model = cap.step_fn(params, cfg)
        decode = DecodeConfig(max_len=5)
        feats = np.stack([features, -features])
        batch = sample_decode_batch(feats, model, decode, [member_rng(4, 0, 0), member_rng(4, 1, 0)])
        alone = sample_decode(-features, model, decode, member_rng(4, 1, 0))
        assert batch[1].seq == alone.seq

    def test_rng_count_must_match_batch(self):
        with pytest.raises(ShapeError):
            sample_decode_batch(np.zeros((2, 1, 1)), table_model(6, {}), DecodeConfig(), [np.random.default_rng()])

    def test_sampled_captions_start_with_bos(self):
        sample = sample_decode(NO_IMAGE, hashed_model(6), DecodeConfig(max_len=4), np.random.default_rng(3))
        assert sample.seq.ids[0] == BOS
        assert isinstance(sample.seq, TokenSeq)
