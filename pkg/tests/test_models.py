import numpy as np
import pytest

from ctcbridge import tensor as tt
from ctcbridge.cli import build_aec_cache, eval_ctc_greedy, load_task
from ctcbridge.connector import ConnectorConfig
from ctcbridge.ctc import NBestList
from ctcbridge.lexicon import Vocabulary
from ctcbridge import models as md
from ctcbridge.rng import CounterRng
from ctcbridge.synthdata import build_vocabulary


MICRO_TASK = {
    "name": "micro", "vocab_size": 12, "feat_dim": 8,
    "length_range": [3, 5], "duration_range": [4, 6],
    "noise_sigma": 0.2, "confusion_prob": 0.1, "prototype_seed": 7,
    "chain": {"seed": 11, "successors": 3, "weights": [0.5, 0.3, 0.2], "smoothing": 0.02},
    "splits": {"train": 48, "dev": 12, "test": 12, "seed": 0},
}


@pytest.fixture(scope="module")
def micro():
    bundle = load_task(MICRO_TASK)
    train, dev, test = bundle.splits()
    return bundle, train, dev, test


@pytest.fixture(scope="module")
def vocab(micro):
    return micro[0].spec.vocab


def tiny_encoder(vocab, feat_dim=8, seed=0):
    return md.SpeechEncoder(
        md.EncoderConfig(feat_dim=feat_dim, out_slots=vocab.size + 1,
                         width=24, ffn=48, blocks=1),
        seed=seed,
    )


def tiny_decoder(vocab, seed=0, **kw):
    kw.setdefault("dim", 24)
    kw.setdefault("ffn", 48)
    kw.setdefault("blocks", 1)
    kw.setdefault("heads", 2)
    kw.setdefault("max_len", 96)
    return md.DecoderLM(md.DecoderConfig(vocab=vocab.size, **kw), vocab, seed=seed)


@pytest.fixture(scope="module")
def trained_encoder(micro, vocab):
    _, train, dev, _ = micro
    enc = tiny_encoder(vocab)
    cfg = md.TrainConfig(steps=150, batch_size=4, lr=4e-3, warmup=10,
                         eval_every=0, log_every=50, augment=None)
    log = md.train_encoder_ctc(enc, train, dev, cfg, vocab.blank_id)
    return enc, log


class TestEncoder:
    def test_subsample_arithmetic(self, vocab):
        enc = tiny_encoder(vocab)
        for t in (16, 17, 19, 40):
            frames = np.zeros((t, 8), dtype=np.float32)
            _, z = enc.forward(frames)
            assert z.shape == (-(-t // 4), vocab.size + 1)

    def test_too_few_frames_rejected(self, vocab):
        with pytest.raises(ValueError):
            tiny_encoder(vocab).forward(np.zeros((3, 8), dtype=np.float32))

    def test_zero_input_gives_identical_rows(self, vocab):
        _, z = tiny_encoder(vocab).forward(np.zeros((16, 8), dtype=np.float32))
        np.testing.assert_allclose(z.data, z.data[0][None, :].repeat(4, 0),
                                   rtol=0, atol=1e-5)

    def test_forward_is_deterministic(self, micro, vocab):
        utt = micro[1][0]
        enc = tiny_encoder(vocab)
        a = enc.forward(utt.frames)[1].data
        b = enc.forward(utt.frames)[1].data
        np.testing.assert_array_equal(a, b)

    def test_same_seed_same_params(self, vocab):
        a, b = tiny_encoder(vocab, seed=3), tiny_encoder(vocab, seed=3)
        for n in a.params:
            np.testing.assert_array_equal(a.params[n].value, b.params[n].value)


class TestEncoderTraining:
    def test_dev_loss_halves(self, trained_encoder):
        _, log = trained_encoder
        assert log.final_dev_loss < 0.5 * log.initial_dev_loss

    def test_zero_learning_rate_keeps_params_bitwise(self, micro, vocab):
        _, train, dev, _ = micro
        enc = tiny_encoder(vocab)
        before = {n: p.value.copy() for n, p in enc.params.items()}
        cfg = md.TrainConfig(steps=5, batch_size=2, lr=0.0, warmup=0, eval_every=0,
                             augment=None)
        md.train_encoder_ctc(enc, train, dev, cfg, vocab.blank_id)
        for n, p in enc.params.items():
            assert p.value.tobytes() == before[n].tobytes()

    def test_same_seed_reproduces_loss(self, micro, vocab):
        _, train, dev, _ = micro
        cfg = md.TrainConfig(steps=12, batch_size=2, lr=3e-3, warmup=2, eval_every=0,
                             augment=None)
        logs = []
        for _ in range(2):
            enc = tiny_encoder(vocab)
            logs.append(md.train_encoder_ctc(enc, train, dev, cfg, vocab.blank_id))
        assert logs[0].final_dev_loss == logs[1].final_dev_loss

    def test_empty_dataset_rejected(self, micro, vocab):
        cfg = md.TrainConfig(steps=1)
        with pytest.raises(ValueError):
            md.train_encoder_ctc(tiny_encoder(vocab), [], micro[2], cfg, vocab.blank_id)


class TestDecoderForward:
    def test_requires_bos(self, vocab):
        dec = tiny_decoder(vocab)
        with pytest.raises(ValueError):
            dec.forward(None, [0, 1])

    def test_plain_lm_logits_shape(self, vocab):
        dec = tiny_decoder(vocab)
        out = dec.forward(None, [vocab.bos_id, 0, 1])
        assert out.shape == (3, vocab.size)

    def test_length_cap(self, vocab):
        dec = tiny_decoder(vocab, max_len=8)
        with pytest.raises(ValueError):
            dec.forward(None, [vocab.bos_id] + [0] * 8)

    def test_causal_mask_text_side(self, vocab):
        dec = tiny_decoder(vocab)
        base = [vocab.bos_id, 0, 1, 2, 3]
        ref = dec.forward(None, base).data
        changed = list(base)
        changed[3] = 5  # perturb text position 3
        out = dec.forward(None, changed).data
        np.testing.assert_array_equal(out[:3], ref[:3])
        assert not np.allclose(out[3:], ref[3:])

    def test_speech_prefix_visible_everywhere(self, vocab):
        dec = tiny_decoder(vocab)
        rng = CounterRng(0)
        speech = rng.normals(4 * 24).reshape(4, 24)
        ref = dec.forward(tt.Tensor(speech), [vocab.bos_id, 0, 1]).data
        speech2 = speech.copy()
        speech2[0] += 1.0
        out = dec.forward(tt.Tensor(speech2), [vocab.bos_id, 0, 1]).data
        assert not np.allclose(out[0], ref[0])
        assert not np.allclose(out[-1], ref[-1])

    def test_tied_output_uses_embedding_rows(self, vocab):
        dec = tiny_decoder(vocab)
        # growing one embedding row's norm must move that token's logit
        text = [vocab.bos_id, 3]
        before = dec.forward(None, text).data[-1]
        dec.params["emb"].value[5] *= 10.0
        after = dec.forward(None, text).data[-1]
        assert before[5] != after[5]

    def test_untied_output_has_separate_matrix(self, vocab):
        dec = tiny_decoder(vocab, tie_output=False)
        assert "out.w" in dec.params
        out = dec.forward(None, [vocab.bos_id])
        assert out.shape == (1, vocab.size)


class TestSpProject:
    def test_zero_projection(self):
        h = tt.Tensor(np.ones((3, 4)))
        out = md.sp_project(h, tt.Tensor(np.zeros((4, 6))))
        assert np.abs(out.data).max() == 0.0

    def test_identity_passthrough(self):
        h = tt.Tensor(np.arange(12, dtype=np.float64).reshape(3, 4))
        out = md.sp_project(h, tt.Tensor(np.eye(4)))
        np.testing.assert_array_equal(out.data, h.data)

    def test_matches_manual_matmul(self):
        rng = CounterRng(8)
        h = rng.normals(12).reshape(3, 4)
        w = rng.normals(20).reshape(4, 5)
        out = md.sp_project(tt.Tensor(h), tt.Tensor(w))
        manual = tt.Tensor(h).data.astype(np.float64) @ tt.Tensor(w).data.astype(np.float64)
        np.testing.assert_allclose(out.data, manual.astype(np.float32), atol=1e-6)


class TestAecInput:
    def nbest(self):
        return NBestList((((0, 1), -0.1), ((0, 2), -0.9), ((3,), -1.4)),
                         beam_size=8, n=3)

    def test_sep_joined_in_score_order(self, vocab):
        out = md.aec_build_input(self.nbest(), 2, vocab)
        assert out == (0, 1, vocab.sep_id, 0, 2)

    def test_top1_has_no_sep(self, vocab):
        assert md.aec_build_input(self.nbest(), 1, vocab) == (0, 1)

    def test_n_larger_than_available_rejected(self, vocab):
        with pytest.raises(ValueError):
            md.aec_build_input(self.nbest(), 4, vocab)

    def test_empty_list_rejected(self, vocab):
        with pytest.raises(ValueError):
            md.aec_build_input(NBestList((), beam_size=1, n=1), 1, vocab)

    def test_teacher_forcing_stream_framing(self, vocab):
        sys_ = md.DecoderSystem(decoder=tiny_decoder(vocab), mode="aec",
                                conn=ConnectorConfig(), aec_n=1)
        text, targets, mask = md.teacher_forcing_example(
            sys_, vocab, (4, 5), self.nbest()
        )
        # bos ++ hyp ++ eos ++ target, loss on target ++ eos only
        assert text == [vocab.bos_id, 0, 1, vocab.eos_id, 4, 5]
        assert list(targets) == [0, 1, vocab.eos_id, 4, 5, vocab.eos_id]
        assert list(mask) == [0, 0, 0, 1, 1, 1]


class TestGenerate:
    def overfit_system(self, micro, vocab, utts, steps=260):
        _, train, dev, _ = micro
        enc = tiny_encoder(vocab)
        dec = tiny_decoder(vocab, dim=32, ffn=64, blocks=2, heads=1)
        sysm = md.build_system("lego", enc, dec, ConnectorConfig(), seed=0)
        cfg = md.TrainConfig(steps=steps, batch_size=len(utts), lr=4e-3, warmup=20,
                             dropout=0.0, eval_every=0, augment=None)
        md.adapt_decoder(sysm, enc, vocab, utts, utts, cfg)
        return sysm, enc

    def test_overfit_reproduces_references(self, micro, vocab):
        utts = micro[1][:5]
        sysm, enc = self.overfit_system(micro, vocab, utts)
        for utt in utts:
            out = md.decode_utterance(sysm, enc, vocab, utt, max_new=12)
            assert out == utt.target

    def test_max_new_one_gives_single_token(self, micro, vocab):
        utts = micro[1][:2]
        sysm, enc = self.overfit_system(micro, vocab, utts, steps=40)
        speech = md.conditioning(sysm, enc, utts[0].frames)
        out = md.generate(sysm, speech, [vocab.bos_id], max_new=1)
        assert len(out) <= 1

    def test_beam_one_equals_greedy(self, micro, vocab):
        utts = micro[1][:3]
        sysm, enc = self.overfit_system(micro, vocab, utts, steps=60)
        for utt in utts:
            speech = md.conditioning(sysm, enc, utt.frames)
            g = md.generate(sysm, speech, [vocab.bos_id], max_new=8, strategy="greedy")
            b = md.generate(sysm, speech, [vocab.bos_id], max_new=8,
                            strategy="beam", beam=1)
            assert g == b

    def test_beam_score_not_below_greedy(self, micro, vocab):
        utts = micro[1][:3]
        sysm, enc = self.overfit_system(micro, vocab, utts, steps=60)

        def score(tokens, speech):
            ids = [vocab.bos_id] + list(tokens) + [vocab.eos_id]
            logits = sysm.decoder.forward(speech, ids[:-1])
            logp = tt.log_softmax(logits).data
            return sum(logp[i, ids[i + 1]] for i in range(len(ids) - 1))

        for utt in utts:
            speech = md.conditioning(sysm, enc, utt.frames)
            g = md.generate(sysm, speech, [vocab.bos_id], max_new=8)
            b = md.generate(sysm, speech, [vocab.bos_id], max_new=8,
                            strategy="beam", beam=4)
            assert score(b, speech) >= score(g, speech) - 1e-4


class TestAdaptation:
    @pytest.mark.parametrize("mode", md.ADAPT_MODES)
    def test_every_mode_reduces_dev_loss_and_freezes_encoder(self, micro, vocab, mode):
        _, train, dev, _ = micro
        enc, _ = (tiny_encoder(vocab), None)
        cfg0 = md.TrainConfig(steps=120, batch_size=4, lr=4e-3, warmup=10,
                              eval_every=0, augment=None)
        md.train_encoder_ctc(enc, train, dev, cfg0, vocab.blank_id)
        digest = md.params_digest(enc.params)

        dec = tiny_decoder(vocab)
        conn = ConnectorConfig(k=3 if mode in ("topS", "topP") else None)
        sysm = md.build_system(mode, enc, dec, conn, seed=0, aec_n=2)
        cache = None
        if mode == "aec":
            cache = build_aec_cache(enc, list(train) + list(dev), beam=8, n=2)
        cfg = md.TrainConfig(steps=60, batch_size=4, lr=2e-3, warmup=10,
                             dropout=0.1, eval_every=0, augment=None)
        log = md.adapt_decoder(sysm, enc, vocab, train, dev, cfg, aec_cache=cache)
        assert log.final_dev_loss < log.initial_dev_loss
        assert md.params_digest(enc.params) == digest

    def test_lego_star_pins_blank_downscale(self, micro, vocab):
        enc = tiny_encoder(vocab)
        sysm = md.build_system("lego_star", enc, tiny_decoder(vocab))
        assert sysm.conn.blk_downscale == 1e4 and sysm.conn.mode == "full"

    def test_aec_without_cache_rejected(self, micro, vocab):
        _, train, dev, _ = micro
        enc = tiny_encoder(vocab)
        sysm = md.build_system("aec", enc, tiny_decoder(vocab))
        with pytest.raises(ValueError):
            md.adapt_decoder(sysm, enc, vocab, train, dev, md.TrainConfig(steps=1))

    def test_topp_without_projection_rejected(self, micro, vocab):
        _, train, dev, _ = micro
        enc = tiny_encoder(vocab)
        sysm = md.DecoderSystem(decoder=tiny_decoder(vocab), mode="topP",
                                conn=ConnectorConfig(mode="topP", k=2))
        with pytest.raises(ValueError):
            md.adapt_decoder(sysm, enc, vocab, train, dev, md.TrainConfig(steps=1))

    def test_unknown_mode_rejected(self, micro, vocab):
        enc = tiny_encoder(vocab)
        with pytest.raises(ValueError):
            md.build_system("nope", enc, tiny_decoder(vocab))

    def test_gradient_reaches_embedding_through_both_paths(self, vocab):
        # 2-frame, 3-token instance: d loss / d E gets reconstruction and
        # text-lookup contributions; check the whole thing against central
        # differences
        with tt.precision(np.float64):
            enc = tiny_encoder(vocab)
            dec = tiny_decoder(vocab)
            sysm = md.build_system("lego", enc, dec, ConnectorConfig(), seed=0)
            frames = np.asarray(CounterRng(4).normals(8 * 8).reshape(8, 8))
            text = [vocab.bos_id, 0, 1, 2]
            targets = np.array([0, 1, 2, vocab.eos_id])
            z = md.encoder_readout("lego", enc, frames)

            emb = dec.params["emb"]

            def loss_with(table_tensor) -> tt.Tensor:
                from ctcbridge.connector import reconstruct
                from ctcbridge.lexicon import LogitGram
                speech = reconstruct(LogitGram(tt.Tensor(z)), sysm.conn, table_tensor,
                                     at_inference=False)
                text_emb = tt.gather_rows(table_tensor, text)
                seq = tt.concat_rows([speech, text_emb])
                pos = tt.slice_rows(
                    tt.Tensor(dec.params["pos"].value), 0, seq.shape[0]
                )
                x = tt.add(seq, pos)
                for i in range(dec.cfg.blocks):
                    x = md._mix_block(x, dec.params, f"blk{i}", None, True, 0.0, None,
                                      heads=dec.cfg.heads)
                h = tt.layer_norm(x, tt.Tensor(dec.params["lnfg"].value),
                                  tt.Tensor(dec.params["lnfb"].value))
                h_text = tt.slice_rows(h, speech.shape[0], seq.shape[0])
                logits = tt.matmul(h_text, tt.transpose(
                    tt.slice_rows(table_tensor, 0, vocab.size)))
                return tt.cross_entropy(logits, targets)

            err = tt.finite_diff_check(loss_with, emb.value, h=1e-4)
        assert err < 1e-3


class TestTeacherForcingStats:
    def test_uniform_decoder_log_ppl_is_log_v(self, micro, vocab):
        _, train, dev, _ = micro
        enc = tiny_encoder(vocab)
        dec = tiny_decoder(vocab)
        for p in dec.params.values():
            p.value[...] = 0.0
        sysm = md.DecoderSystem(decoder=dec, mode="lego", conn=ConnectorConfig())
        stats = md.teacher_forcing_stats(sysm, enc, vocab, dev[:4])
        assert stats["log_ppl"] == pytest.approx(np.log(vocab.size), rel=1e-4)

    def test_accuracy_bounded(self, micro, vocab):
        _, train, dev, _ = micro
        enc = tiny_encoder(vocab)
        sysm = md.DecoderSystem(decoder=tiny_decoder(vocab), mode="lego",
                                conn=ConnectorConfig())
        stats = md.teacher_forcing_stats(sysm, enc, vocab, dev[:4])
        assert 0.0 <= stats["token_acc"] <= 1.0

    def test_empty_dataset_rejected(self, micro, vocab):
        enc = tiny_encoder(vocab)
        sysm = md.DecoderSystem(decoder=tiny_decoder(vocab), mode="lego",
                                conn=ConnectorConfig())
        with pytest.raises(ValueError):
            md.teacher_forcing_stats(sysm, enc, vocab, [])


class TestAdam:
    def test_descends_quadratic(self):
        p = tt.Parameter(np.array([5.0, -3.0]))
        opt = md.Adam([p], lr=0.1, total_steps=200, warmup=0)
        for _ in range(200):
            opt.zero_grad()
            p.grad[...] = 2 * p.value
            opt.step()
        assert np.abs(p.value).max() < 1e-2

    def test_cosine_schedule_endpoints(self):
        opt = md.Adam([tt.Parameter(np.zeros(1))], lr=1.0, total_steps=100, warmup=10)
        assert opt.lr_at(5) == pytest.approx(0.5)
        assert opt.lr_at(10) == pytest.approx(1.0)
        assert opt.lr_at(100) == pytest.approx(0.0, abs=1e-9)
