"""Training-loop contracts: determinism, no-op optimization, metric rows,
model-file round-trips, and the codebook variant's loop."""

import dataclasses

import numpy as np
import pytest

from crhash.codebook import train_codebook_variant
from crhash.errors import DegenerateInputError, FormatError
from crhash.synthdata import SynthSpec, generate
from crhash.training import (
    TrainConfig,
    encode,
    feature_rms,
    read_model,
    train,
    write_model,
)

SMALL_SPEC = SynthSpec(
    n_coarse=3, fines_per_coarse=2, samples_per_fine=8,
    channels=6, positions=4, seed=3,
)


@pytest.fixture(scope="module")
def small_ds():
    return generate(SMALL_SPEC)


def small_cfg(**kw) -> TrainConfig:
    base = dict(bits=8, epochs=3, batch_size=16, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestConfigValidation:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_bad_loss_mode(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_mode="l1")

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_pseudo=-0.5)

    def test_bits_range(self):
        with pytest.raises(ValueError):
            TrainConfig(bits=0)
        with pytest.raises(ValueError):
            TrainConfig(bits=5000)


class TestTrainBasics:
    def test_zero_lr_keeps_parameters(self, small_ds):
        cfg = small_cfg(epochs=1, lr=0.0, lambda_pseudo=0.0, lambda_att=0.0)
        state, history = train(small_ds, cfg)
        rng = np.random.default_rng(cfg.seed)
        from crhash.encoder import init_params

        fresh = init_params(cfg.bits, small_ds.channels, rng,
                            feature_scale=feature_rms(small_ds))
        np.testing.assert_array_equal(state.params.w_fc, fresh.w_fc)
        np.testing.assert_array_equal(state.params.b, fresh.b)
        assert len(history) == 2  # epoch 0 plus one epoch

    def test_zero_lr_codes_match_untrained(self, small_ds):
        cfg = small_cfg(epochs=1, lr=0.0)
        state, _ = train(small_ds, cfg)
        trained_codes = encode(small_ds, state)
        cfg1 = small_cfg(epochs=1, lr=0.0)
        state1, _ = train(small_ds, cfg1)
        assert encode(small_ds, state1) == trained_codes

    def test_metrics_rows_per_epoch(self, small_ds):
        state, history = train(small_ds, small_cfg(epochs=4))
        assert [m.epoch for m in history] == [0, 1, 2, 3, 4]
        for m in history:
            assert np.isfinite(m.mean_loss)
            assert np.isfinite(m.mean_norm_v)
            assert 0.0 <= m.p_collision <= 1.0
            assert 0.0 <= m.mean_ap <= 1.0

    def test_loss_decreases_on_small_run(self, small_ds):
        _, history = train(small_ds, small_cfg(epochs=10))
        assert history[-1].mean_loss < history[0].mean_loss

    def test_bit_reproducibility(self, small_ds):
        cfg = small_cfg(epochs=3)
        state_a, hist_a = train(small_ds, cfg)
        state_b, hist_b = train(small_ds, cfg)
        np.testing.assert_array_equal(state_a.params.w_fc, state_b.params.w_fc)
        np.testing.assert_array_equal(state_a.bank, state_b.bank)
        assert [dataclasses.astuple(m) for m in hist_a] == [
            dataclasses.astuple(m) for m in hist_b
        ]
        assert encode(small_ds, state_a) == encode(small_ds, state_b)

    def test_different_seeds_differ(self, small_ds):
        state_a, _ = train(small_ds, small_cfg(seed=1))
        state_b, _ = train(small_ds, small_cfg(seed=2))
        assert not np.array_equal(state_a.params.w_fc, state_b.params.w_fc)

    def test_encode_order_and_determinism(self, small_ds):
        state, _ = train(small_ds, small_cfg())
        assert encode(small_ds, state) == encode(small_ds, state)

    def test_pseudo_machinery_skipped_when_weight_zero(self, small_ds):
        state, _ = train(small_ds, small_cfg(lambda_pseudo=0.0))
        assert state.pseudo is None
        assert "pseudo" not in state.opt

    def test_pseudo_memory_created_for_full_mode(self, small_ds):
        state, _ = train(small_ds, small_cfg())
        assert state.pseudo is not None
        assert state.pseudo.n_c >= 1
        assert state.pseudo.assignment.shape == (small_ds.n,)

    def test_nhd_only_mode_skips_attention_and_pseudo(self, small_ds):
        state, _ = train(small_ds, small_cfg(loss_mode="nhd_only"))
        assert state.pseudo is None

    def test_no_csa_flag(self, small_ds):
        state, _ = train(small_ds, small_cfg(use_csa=False, lambda_att=0.0))
        assert state.use_csa is False
        assert encode(small_ds, state) == encode(small_ds, state)

    def test_anchor_noise_changes_training(self, small_ds):
        state_a, _ = train(small_ds, small_cfg(anchor_noise=0.0))
        state_b, _ = train(small_ds, small_cfg(anchor_noise=0.5))
        assert not np.array_equal(state_a.params.w_fc, state_b.params.w_fc)

    def test_positive_distance_softly_non_increasing(self, small_ds):
        # the bank starts at the features (d_pos = 0 exactly), escapes that
        # degenerate point in the first few epochs, and from there the
        # positive-pair pull keeps mean d_pos non-increasing over 10-epoch
        # windows (up to minibatch noise)
        for seed in range(3):
            _, history = train(small_ds, small_cfg(epochs=40, seed=seed))
            d = np.array([m.mean_d_pos for m in history])
            assert d[0] == 0.0
            for start in range(10, len(d) - 10):
                assert d[start + 10] <= d[start] + 0.02

    def test_degenerate_sample_reported_with_index(self):
        ds = generate(SMALL_SPEC)
        ds.features[5] = 0.0
        # a zero feature map yields zero fused vector only with a zero head
        # output; force it by zeroing the map and using zero-lr training
        cfg = small_cfg(epochs=1, lr=0.0)
        rng_probe = np.random.default_rng(cfg.seed)
        from crhash.encoder import forward_batch, init_params

        params = init_params(cfg.bits, ds.channels, rng_probe,
                             feature_scale=feature_rms(ds))
        v5 = forward_batch(ds.features[5:6], params, True).v
        if np.linalg.norm(v5) > 1e-12:
            pytest.skip("zero map does not produce a degenerate head output here")
        with pytest.raises(DegenerateInputError, match="sample 5"):
            train(ds, cfg)


class TestCodebookVariantTraining:
    def test_runs_and_encodes(self, small_ds):
        cfg = small_cfg(variant="codebook")
        state, history = train_codebook_variant(small_ds, cfg)
        assert state.codebooks is not None
        assert state.codebooks.bits == cfg.bits
        codes = encode(small_ds, state)
        assert codes.n == small_ds.n

    def test_variant_guard(self, small_ds):
        with pytest.raises(ValueError):
            train_codebook_variant(small_ds, small_cfg(variant="sign"))

    def test_codes_agree_with_delta_signs(self, small_ds):
        from crhash.codebook import deltas_batch
        from crhash.encoder import forward_batch

        cfg = small_cfg(variant="codebook")
        state, _ = train(small_ds, cfg)
        fused = forward_batch(small_ds.features, state.params, True).fused
        v = deltas_batch(fused, state.codebooks)
        codes = encode(small_ds, state)
        for i in range(small_ds.n):
            np.testing.assert_array_equal(codes.row(i).to_bits(), v[i] > 0)

    def test_pure_dec_training_runs(self, small_ds):
        # clustering loss alone: the loop completes, losses stay finite and
        # small (assignments are near-binary at this scale), codes come out
        cfg = small_cfg(
            epochs=20, variant="codebook",
            lambda_nhd=0.0, lambda_pseudo=0.0, lambda_att=0.0, lambda_code=1.0,
        )
        state, history = train(small_ds, cfg)
        losses = np.array([m.mean_loss for m in history])
        assert np.isfinite(losses).all()
        assert (losses >= 0).all()
        assert encode(small_ds, state).n == small_ds.n

    def test_determinism(self, small_ds):
        cfg = small_cfg(variant="codebook")
        state_a, _ = train(small_ds, cfg)
        state_b, _ = train(small_ds, cfg)
        np.testing.assert_array_equal(
            state_a.codebooks.centroids, state_b.codebooks.centroids
        )


class TestModelFile:
    @pytest.mark.parametrize("variant", ["sign", "codebook"])
    def test_roundtrip_bytes(self, small_ds, tmp_path, variant):
        state, _ = train(small_ds, small_cfg(variant=variant))
        p1 = tmp_path / "m1.crhm"
        p2 = tmp_path / "m2.crhm"
        write_model(state, p1)
        back = read_model(p1)
        write_model(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_values(self, small_ds, tmp_path):
        state, _ = train(small_ds, small_cfg())
        path = tmp_path / "m.crhm"
        write_model(state, path)
        back = read_model(path)
        np.testing.assert_array_equal(back.params.w_fc, state.params.w_fc)
        np.testing.assert_array_equal(back.bank, state.bank)
        np.testing.assert_array_equal(back.pseudo.rows, state.pseudo.rows)
        np.testing.assert_array_equal(back.pseudo.assignment, state.pseudo.assignment)
        assert back.epoch == state.epoch
        assert back.seed == state.seed
        assert back.variant == state.variant
        assert back.use_csa == state.use_csa
        assert back.opt["bank"].t == state.opt["bank"].t
        np.testing.assert_array_equal(back.opt["w_fc"].m, state.opt["w_fc"].m)
        assert back.opt["w_fc"].lr == state.opt["w_fc"].lr

    def test_reloaded_model_encodes_identically(self, small_ds, tmp_path):
        state, _ = train(small_ds, small_cfg(variant="codebook"))
        path = tmp_path / "m.crhm"
        write_model(state, path)
        assert encode(small_ds, read_model(path)) == encode(small_ds, state)

    def test_magic_and_version_checked(self, tmp_path):
        path = tmp_path / "bad.crhm"
        path.write_bytes(b"JUNK" + bytes(40))
        with pytest.raises(FormatError):
            read_model(path)

    def test_truncation_detected(self, small_ds, tmp_path):
        state, _ = train(small_ds, small_cfg())
        path = tmp_path / "m.crhm"
        write_model(state, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            read_model(path)
