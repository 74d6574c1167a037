import numpy as np
import pytest

from modalseg import robustness as R
from modalseg.cmtb import ModalityBundle
from modalseg.gradcheck import TINY
from modalseg.model import ModelConfig, SegModel
from modalseg.synth import CHANNELS, Dataset, SynthConfig, generate_samples


@pytest.fixture(scope="module")
def setup():
    cfg = SynthConfig(height=32, width=32, min_size=6, max_size=16)
    ds = Dataset.from_samples(generate_samples(6, 3, cfg), 6)
    model = SegModel(ModelConfig(**{**TINY, "modalities": dict(CHANNELS), "num_classes": 6}))
    return model, ds


def bundle(rng, shape=(2, 3, 32, 32), n=2):
    return ModalityBundle([rng.normal(size=shape) for _ in range(n)], [True] * n, [f"m{k}" for k in range(n)])


def test_keep_subsets():
    assert len(R.keep_subsets(4)) == 14
    assert len(R.keep_subsets(2)) == 2
    assert all(any(m) and not all(m) for m in R.keep_subsets(4))
    with pytest.raises(ValueError):
        R.keep_subsets(1)


def test_rmm_identity_and_full_drop(rng):
    b = bundle(rng)
    for orig, out in zip(b.maps, R.rmm_perturb(b, 0.0).maps):
        np.testing.assert_array_equal(orig, out)
    assert not any(np.asarray(m).any() for m in R.rmm_perturb(b, 1.0).maps)


def test_rmm_tile_frequency(rng):
    b = ModalityBundle([np.ones((100, 1, 160, 160))], [True], ["m"])
    out = np.asarray(R.rmm_perturb(b, 0.3, block=16, seed=4).maps[0])
    tiles = out[:, 0, ::16, ::16]
    assert tiles.size == 10_000
    assert abs((tiles == 0).mean() - 0.3) <= 0.02
    # whole tiles are zeroed together
    blocks = out[:, 0].reshape(100, 10, 16, 10, 16)
    assert np.all(blocks.min(axis=(2, 4)) == blocks.max(axis=(2, 4)))


def test_rmm_errors(rng):
    with pytest.raises(ValueError):
        R.rmm_perturb(bundle(rng), 0.5, block=10)
    with pytest.raises(ValueError):
        R.rmm_perturb(bundle(rng), 1.5)


def test_nm_statistics_and_determinism(rng):
    b = ModalityBundle([np.zeros((1, 1, 1000, 1000))], [True], ["m"])
    for level, sigma in (("low", 0.1), ("mid", 0.5)):
        diff = np.asarray(R.nm_perturb(b, level, seed=1).maps[0])
        assert abs(diff.std() / sigma - 1) <= 0.01
    small = bundle(rng)
    a = R.nm_perturb(small, 0.1, seed=9).maps[0]
    c = R.nm_perturb(small, 0.1, seed=9).maps[0]
    assert np.asarray(a).tobytes() == np.asarray(c).tobytes()
    np.testing.assert_array_equal(R.nm_perturb(small, 0.0).maps[0], small.maps[0])


def test_robustness_score():
    assert R.robustness_score([0.4] * 7) == pytest.approx(0.4)
    for name, (row, published) in R.PUBLISHED_ROWS.items():
        assert round(R.robustness_score(row), 2) == published
    assert R.self_test()["DeLiVER"]["computed"] == 50.21
    assert R.self_test()["MUSES"]["computed"] == 35.75
    with pytest.raises(ValueError):
        R.robustness_score({"mIoU": 1.0})
    with pytest.raises(ValueError):
        R.robustness_score([1.0] * 6)


def test_emm_avg_evaluates_every_subset(setup):
    model, ds = setup
    seen = []
    score, subsets = R.emm_eval(model, ds, "avg", log=seen.append)
    assert len(seen) == 14 == len(subsets)
    expected = np.mean([R.evaluate(model, ds, list(m)) for m in R.keep_subsets(4)])
    assert score == pytest.approx(expected, abs=1e-15)


def test_emm_fixed_zero_p_is_clean(setup):
    model, ds = setup
    assert R.emm_eval(model, ds, "fixed", p=0.0)[0] == R.evaluate(model, ds)
    with pytest.raises(ValueError):
        R.emm_eval(model, ds, "sometimes")


def test_emm_fixed_groups_keep_one(setup):
    model, ds = setup
    _, groups = R.emm_eval(model, ds, "fixed", p=0.9, seed=2)
    assert sum(groups.values()) == len(ds)
    assert all("1" in key for key in groups)


def test_threads_do_not_change_results(setup):
    model, ds = setup
    assert R.emm_eval(model, ds, "avg", threads=3)[0] == R.emm_eval(model, ds, "avg", threads=1)[0]


def test_benchmark_report_is_reproducible(setup):
    model, ds = setup
    protocol = R.Protocol(seed=5)
    a = R.run_benchmark(model, ds, protocol, provenance={"sgm": "off"})
    b = R.run_benchmark(model, ds, protocol, provenance={"sgm": "off"})
    assert a.to_json() == b.to_json()
    assert a.mean == pytest.approx(np.mean([getattr(a, k) for k in R.METRICS]))
    assert a.header["provenance"] == {"sgm": "off"}
    assert "mIoU" in R.format_table(a)


def test_evaluate_empty_dataset(setup):
    model, ds = setup
    empty = Dataset({k: v[:0] for k, v in ds.maps.items()}, ds.labels[:0], ds.names, ds.present, 6)
    with pytest.raises(ValueError):
        R.evaluate(model, empty)
