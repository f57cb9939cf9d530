import numpy as np
import pytest

from vesselshot.phantom import PhantomConfig, PhantomError, generate, generate_dataset


class TestGenerate:
    def test_deterministic_per_seed(self):
        cfg = PhantomConfig(seed=7)
        v1, m1 = generate(cfg)
        v2, m2 = generate(cfg)
        assert np.array_equal(v1.data, v2.data)
        assert np.array_equal(m1.data, m2.data)

    def test_no_tubes_empty_mask(self):
        vol, mask = generate(PhantomConfig(n_tubes=0, seed=1))
        assert np.count_nonzero(mask.data) == 0
        assert vol.data.std() > 0  # still a noisy volume

    def test_mask_binary(self):
        _, mask = generate(PhantomConfig(seed=3))
        assert set(np.unique(mask.data)) <= {0, 1}

    def test_tube_voxels_brighter_before_noise(self):
        cfg = PhantomConfig(noise_sigma=0.0, seed=5)
        vol, mask = generate(cfg)
        fg = vol.data[mask.data > 0]
        bg = vol.data[mask.data == 0]
        assert fg.mean() > bg.mean()

    def test_foreground_fraction_in_range(self):
        # Monte-Carlo over 20 seeds with the default config
        fracs = []
        for seed in range(20):
            _, mask = generate(PhantomConfig(seed=seed))
            fracs.append((mask.data > 0).mean())
        assert all(0.005 <= f <= 0.08 for f in fracs), fracs

    def test_invalid_configs(self):
        with pytest.raises(PhantomError):
            PhantomConfig(n_tubes=-1)
        with pytest.raises(PhantomError):
            PhantomConfig(contrast=1.0)
        with pytest.raises(PhantomError):
            PhantomConfig(radius_range=(1.0, 40.0))


class TestDataset:
    def test_subject_count_and_determinism(self):
        a = generate_dataset(3, seed=2)
        b = generate_dataset(3, seed=2)
        assert sorted(a) == ["subj000", "subj001", "subj002"]
        for k in a:
            assert np.array_equal(a[k][0].data, b[k][0].data)

    def test_subjects_differ(self):
        ds = generate_dataset(2, seed=0)
        assert not np.array_equal(ds["subj000"][0].data, ds["subj001"][0].data)
