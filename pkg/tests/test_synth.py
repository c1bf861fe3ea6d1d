import numpy as np
import pytest

from sleepalign import synth
from sleepalign.edf import EPOCH_SAMPLES, STAGES


class TestGenEpoch:
    def test_exact_length(self):
        ep = synth.gen_epoch("N3", synth.default_spectra()["N3"], seed=1)
        assert ep.samples.shape == (EPOCH_SAMPLES,)

    def test_delta_dominates_alpha_for_deep_sleep(self):
        spectra = synth.default_spectra()
        for seed in range(10):
            ep = synth.gen_epoch("N3", spectra["N3"], seed=seed)
            delta = synth.band_power(ep.samples, 0.5, 4.0)
            alpha = synth.band_power(ep.samples, 8.0, 12.0)
            assert delta >= 10 * alpha

    def test_same_seed_identical(self):
        spectra = synth.default_spectra()
        a = synth.gen_epoch("W", spectra["W"], seed=7)
        b = synth.gen_epoch("W", spectra["W"], seed=7)
        assert np.array_equal(a.samples, b.samples)

    def test_identity_shift_matches_no_shift(self):
        spectra = synth.default_spectra()
        a = synth.gen_epoch("W", spectra["W"], shift=synth.IDENTITY_SHIFT, seed=3)
        b = synth.gen_epoch("W", spectra["W"], shift=synth.ShiftSpec(), seed=3)
        assert np.array_equal(a.samples, b.samples)

    def test_invalid_band_rejected(self):
        with pytest.raises(ValueError):
            synth.StageSpectrum("W", ((10.0, 60.0, 1.0),), 0.5)

    def test_invalid_shift_rejected(self):
        with pytest.raises(ValueError):
            synth.ShiftSpec(amplitude_scale=0.0)


class TestGenDomain:
    def test_balanced_counts(self):
        ds = synth.gen_domain(10, seed=0)
        assert len(ds) == 50
        assert all(v == 10 for v in ds.class_counts.values())

    def test_adjacent_seeds_differ(self):
        a = synth.gen_domain(4, seed=5)
        b = synth.gen_domain(4, seed=6)
        assert len(a) == len(b)
        assert not np.array_equal(a.samples_matrix(), b.samples_matrix())

    def test_provenance_records_shift(self):
        shift = synth.shift_preset("strong")
        ds = synth.gen_domain(2, shift=shift, seed=1)
        assert ds.provenance["shift"]["amplitude_scale"] == 2.5

    def test_n_per_class_validated(self):
        with pytest.raises(ValueError):
            synth.gen_domain(0)

    def test_deterministic(self):
        a = synth.gen_domain(3, seed=9)
        b = synth.gen_domain(3, seed=9)
        assert np.array_equal(a.samples_matrix(), b.samples_matrix())


class TestBandSignature:
    def test_designated_band_has_max_power(self):
        # each stage's designated band beats the other designated bands with
        # high probability over seeds
        presets = synth.load_presets()
        spectra = synth.default_spectra()
        bands = presets["designated_bands"]
        trials, hits = 0, 0
        for stage in STAGES:
            for seed in range(40):
                ep = synth.gen_epoch(stage, spectra[stage], seed=seed * 17 + 3)
                powers = {s: synth.band_power(ep.samples, *bands[s]) for s in STAGES}
                trials += 1
                hits += max(powers, key=powers.get) == stage
        assert hits / trials >= 0.99

    def test_strong_shift_separates_populations(self):
        # shifted vs unshifted mean spectral distance exceeds within-population
        # distance, so planted-recovery tests are not vacuous
        spectra = synth.default_spectra()
        strong = synth.shift_preset("strong")

        def feats(shift, seed):
            ds = synth.gen_domain(6, spectra, shift=shift, seed=seed)
            mat = ds.samples_matrix()
            spec = np.abs(np.fft.rfft(mat, axis=1))[:, :600]
            labels = ds.labels_array()
            return {c: spec[labels == c] for c in range(5)}

        a = feats(synth.IDENTITY_SHIFT, 1)
        b = feats(synth.IDENTITY_SHIFT, 2)
        c = feats(strong, 3)
        for cls in range(5):
            within = np.linalg.norm(a[cls][:, None] - b[cls][None, :], axis=2).mean()
            across = np.linalg.norm(a[cls][:, None] - c[cls][None, :], axis=2).mean()
            assert across > within


class TestPresets:
    def test_presets_versioned(self):
        presets = synth.load_presets()
        assert presets["version"] >= 1

    def test_unknown_preset_rejected(self):
        with pytest.raises(KeyError):
            synth.shift_preset("nope")

    def test_strong_preset_values(self):
        s = synth.shift_preset("strong")
        assert (s.amplitude_scale, s.noise_sigma_delta, s.frequency_drift_hz) == (2.5, 1.0, 2.0)
