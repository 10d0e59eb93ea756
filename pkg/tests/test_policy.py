import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_rlvr import autodiff as ad
from fewshot_rlvr.autodiff import Tape
from fewshot_rlvr.policy import (
    COORD_BINS,
    PolicyConfig,
    ToyVLM,
    Vocabulary,
    build_vocabulary,
    coord_token,
)
from fewshot_rlvr.taskgen import RASTER, make_sample

from fd import assert_grad_close, central_difference

TINY = PolicyConfig(embed_dim=8, num_layers=1, num_heads=2, max_seq_len=80, patch_count=64, seed=3)


@pytest.fixture(scope="module")
def model():
    return ToyVLM(PolicyConfig(seed=11))


@pytest.fixture(scope="module")
def sample():
    return make_sample("t0", "CLS", 5)


def prompt_of(m, s):
    return m.encode_prompt(s.query)


class TestVocabulary:
    def test_unique_and_sized(self):
        v = build_vocabulary()
        assert len(set(v.tokens)) == len(v)
        for tag in ("<reasoning>", "</reasoning>", "<answer>", "</answer>"):
            assert tag in v

    def test_coordinate_bins(self):
        v = build_vocabulary()
        for k in (0, 1, 50, 100):
            assert v.coord_bin(v.id(coord_token(k))) == k
            assert int(coord_token(k)) == 10 * k
        assert COORD_BINS == 101
        with pytest.raises(ValueError):
            coord_token(101)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from(build_vocabulary().tokens[3:]), min_size=1, max_size=20))
    def test_round_trip(self, toks):
        v = build_vocabulary()
        s = " ".join(toks)
        assert v.decode(v.encode(s)) == s

    def test_unknown_token(self):
        with pytest.raises(ValueError):
            build_vocabulary().encode("<answer> banana")

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary(["a", "a"])


class TestConfig:
    def test_heads_divide(self):
        with pytest.raises(ValueError):
            PolicyConfig(embed_dim=10, num_heads=3)

    def test_patch_grid(self):
        with pytest.raises(ValueError):
            PolicyConfig(patch_count=15)


class TestEncodeImage:
    def test_zero_raster_gives_bias(self, model):
        emb = model.encode_image(np.zeros((1, RASTER, RASTER))).data[0]
        np.testing.assert_array_equal(emb, np.broadcast_to(model.params["patch.b"].data, emb.shape))

    def test_deterministic(self, model, sample):
        a = model.encode_image(sample.image[None]).data
        b = model.encode_image(sample.image[None].copy()).data
        np.testing.assert_array_equal(a, b)

    def test_locality(self, model, sample):
        img = sample.image.copy()
        other = img.copy()
        other[20:22, 40:42] += 0.7  # one 2x2 cell inside patch (row 1, col 2)
        a = model.encode_image(img[None]).data[0]
        b = model.encode_image(other[None]).data[0]
        changed = np.flatnonzero(np.any(a != b, axis=1))
        side = RASTER // 4
        assert changed.tolist() == [(20 // side) * 4 + 40 // side]

    def test_bad_raster(self, model):
        with pytest.raises(ValueError):
            model.encode_image(np.zeros((1, 30, 30)))


class TestSample:
    def test_greedy_identical(self, model, sample):
        comps = model.sample(prompt_of(model, sample), sample.image, G=4, temperature=0, max_new_tokens=8)
        assert len({tuple(c.token_ids) for c in comps}) == 1

    def test_seeded_determinism(self, model, sample):
        runs = [
            model.sample(prompt_of(model, sample), sample.image, 4, 0.9, 12, rng=np.random.default_rng(5))
            for _ in range(2)
        ]
        for a, b in zip(*runs):
            assert a.token_ids == b.token_ids
            np.testing.assert_array_equal(a.token_logprobs, b.token_logprobs)

    def test_completion_invariants(self, model, sample):
        for c in model.sample(prompt_of(model, sample), sample.image, 8, 1.0, 10, rng=np.random.default_rng(0)):
            assert len(c.token_logprobs) == len(c.token_ids) == c.length
            assert np.all(c.token_logprobs <= 0)
            assert c.text == model.vocab.decode(c.token_ids)
            assert c.length == 10 or c.token_ids[-1] == model.vocab.eos

    def test_frequencies_match_softmax(self, model, sample):
        # 10 000 first tokens from an untrained policy against the exact softmax
        n = 10_000
        p = model.next_token_distribution(prompt_of(model, sample), sample.image)
        comps = model.sample(prompt_of(model, sample), sample.image, n, 1.0, 1, rng=np.random.default_rng(2024))
        counts = np.bincount([c.token_ids[0] for c in comps], minlength=len(p))
        # 3-sigma band on the Pearson statistic of the whole multinomial vector
        chi2 = np.sum((counts - n * p) ** 2 / (n * p))
        df = len(p) - 1
        assert chi2 <= df + 3 * np.sqrt(2 * df)
        assert counts.sum() == n

    def test_greedy_is_argmax(self, model, sample):
        pr = prompt_of(model, sample)
        (c,) = model.sample(pr, sample.image, 1, 0, 6)
        for t, tok in enumerate(c.token_ids):
            p = model.next_token_distribution(pr + c.token_ids[:t], sample.image)
            assert tok == int(np.argmax(p))

    def test_bad_arguments(self, model, sample):
        with pytest.raises(ValueError):
            model.sample(prompt_of(model, sample), sample.image, 2, 1.0, 0)
        with pytest.raises(ValueError):
            model.sample(prompt_of(model, sample), sample.image, 0, 1.0, 4)
        with Tape():
            with pytest.raises(RuntimeError):
                model.sample(prompt_of(model, sample), sample.image, 1, 1.0, 4)


class TestLogProbs:
    @pytest.mark.parametrize("temperature", [1.0, 0.9, 0.5])
    def test_consistent_with_sampling(self, model, sample, temperature):
        pr = prompt_of(model, sample)
        for c in model.sample(pr, sample.image, 6, temperature, 12, rng=np.random.default_rng(9)):
            lp = model.log_probs(pr, sample.image, c.token_ids, temperature).data
            np.testing.assert_allclose(lp, c.token_logprobs, rtol=0, atol=1e-10)

    def test_against_uncached_forward(self, model, sample):
        # every position recomputed from scratch, no key/value reuse
        pr = prompt_of(model, sample)
        comp = [model.vocab.id(t) for t in "<reasoning> look </reasoning> <answer> lake </answer> <eos>".split()]
        lp = model.log_probs(pr, sample.image, comp).data
        ref = [np.log(model.next_token_distribution(pr + comp[:t], sample.image)[comp[t]]) for t in range(len(comp))]
        np.testing.assert_allclose(lp, ref, rtol=0, atol=1e-12)

    def test_batch_rows_independent(self, model):
        samples = [make_sample(f"b{i}", k, 40 + i) for i, k in enumerate(["CLS", "VQA", "VG", "CLS"])]
        prompts = [model.encode_prompt(s.query) for s in samples]
        images = np.stack([s.image for s in samples])
        comps = [[5, 6, 7], [8], [9, 10, 11, 12, 13], [5, 6, 7]]
        lp, mask = model.batch_log_probs(prompts, images, comps)
        for i, s in enumerate(samples):
            single = model.log_probs(prompts[i], s.image, comps[i]).data
            np.testing.assert_allclose(lp.data[i, mask[i]], single, rtol=0, atol=1e-12)
        assert mask.sum(axis=1).tolist() == [3, 1, 5, 3]

    def test_full_distribution_consistent(self, model, sample):
        pr = prompt_of(model, sample)
        comps = [[5, 6, 7], [9]]
        lp, mask, full = model.batch_log_probs([pr, pr], np.stack([sample.image] * 2), comps, 0.9, full=True)
        np.testing.assert_allclose(np.exp(full).sum(-1), 1.0, rtol=0, atol=1e-12)
        picked = np.take_along_axis(full, np.array([[5, 6, 7], [9, 0, 0]])[..., None], -1)[..., 0]
        np.testing.assert_array_equal(picked[mask], lp.data[mask])

    def test_normalised(self, model, sample):
        rng = np.random.default_rng(0)
        comp = rng.integers(0, len(model.vocab), size=12).tolist()
        logits = model.logits_for([prompt_of(model, sample)], sample.image[None], [comp]).data[0]
        np.testing.assert_allclose(np.exp(ad.log_softmax(logits).data).sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_single_token_vocabulary(self):
        m = ToyVLM(PolicyConfig(embed_dim=4, num_heads=1, num_layers=1, max_seq_len=24), Vocabulary(["x"]))
        lp, _ = m.batch_log_probs([[0, 0]], np.zeros((1, RASTER, RASTER)), [[0, 0, 0]])
        np.testing.assert_array_equal(lp.data, 0.0)

    def test_out_of_vocabulary(self, model, sample):
        with pytest.raises(ValueError):
            model.log_probs(prompt_of(model, sample), sample.image, [len(model.vocab)])

    def test_argmax_temperature_invariant(self, model, sample):
        comp = [5, 9, 30, 2]
        pr = [prompt_of(model, sample)]
        a = model.logits_for(pr, sample.image[None], [comp]).data
        for t in (0.3, 0.9, 2.0):
            np.testing.assert_array_equal(np.argmax(a / t, axis=-1), np.argmax(a, axis=-1))

    def test_gradient_check(self):
        m = ToyVLM(TINY)
        assert m.num_parameters() <= 5000
        s = make_sample("g", "VG", 3)
        pr = m.encode_prompt(s.query)
        comp = [4, 30, 5, 6, 40, 7, 2]
        with Tape() as tape:
            loss = ad.neg(ad.mean(m.log_probs(pr, s.image, comp)))
        ad.backward(loss, tape)
        rng = np.random.default_rng(0)
        for name in ("tok_emb", "layer0.attn.wq", "layer0.mlp.w1", "patch.w", "head.b", "lnf.g"):
            p = m.params[name]
            coords = rng.choice(p.size, size=min(8, p.size), replace=False).tolist()

            def f(arr, p=p):
                saved = p.data
                p.data = arr
                try:
                    return -m.log_probs(pr, s.image, comp).data.mean()
                finally:
                    p.data = saved

            (num,) = central_difference(f, [p.data.copy()], coords={0: coords})
            assert_grad_close(p.grad, num, rtol=1e-4, atol=1e-7)


class TestState:
    def test_copy_is_independent(self, model):
        c = model.copy()
        c.params["head.b"].data = c.params["head.b"].data + 1
        assert not np.array_equal(c.params["head.b"].data, model.params["head.b"].data)

    def test_state_dict_round_trip(self, model):
        other = ToyVLM(PolicyConfig(seed=99))
        other.load_state_dict(model.state_dict())
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(other.params[k].data, v)

    def test_state_dict_mismatch(self, model):
        sd = model.state_dict()
        sd.pop("head.b")
        with pytest.raises(KeyError):
            ToyVLM().load_state_dict(sd)

    def test_prompt_padding(self, model):
        a = model.encode_prompt(("CLS",))
        b = model.encode_prompt(("VQA", "more", "tank", "ship"))
        assert len(a) == len(b)
        assert a[0] == model.vocab.bos
