import struct

import numpy as np
import pytest

from cardiograph import dataset, epds
from cardiograph.dataset import StimulusConfig, sample_stimulus, split_80_20
from cardiograph.exceptions import (BadMagic, ChecksumMismatch, ConfigError, EmptyMask,
                                    FormatError, TooSmall, TruncatedFile, VersionMismatch)
from cardiograph.geometry import build_structured


def test_stimulus_deterministic_and_nonempty():
    g = build_structured((40, 40), (1.0, 1.0))
    cfg = StimulusConfig(radius_range=(0.03, 0.08))
    a = sample_stimulus(7, 3, g, cfg)
    b = sample_stimulus(7, 3, g, cfg)
    assert np.array_equal(a.stimulus.mask, b.stimulus.mask)
    assert a.stimulus.mask.sum() >= 1
    assert not np.array_equal(a.stimulus.mask, sample_stimulus(7, 4, g, cfg).stimulus.mask)
    assert a.stimulus.duration == 1.0


def test_stimulus_margin():
    g = build_structured((50, 50), (1.0, 1.0))
    for k in range(30):
        s = sample_stimulus(1, k, g, StimulusConfig(radius_range=(0.05, 0.2)))
        assert np.all(s.center >= s.radius - 1e-12)
        assert np.all(s.center <= 1.0 - s.radius + 1e-12)


def test_stimulus_area_matches_disk():
    g = build_structured((100, 100), (1.0, 1.0))
    s = sample_stimulus(0, 0, g, StimulusConfig(radius_range=(0.05, 0.05)))
    h = g.spacing[0]
    # brute-force count of lattice points inside the disk
    ii, jj = np.meshgrid(np.arange(100) * h, np.arange(100) * h, indexing="ij")
    brute = np.count_nonzero((ii - s.center[0]) ** 2 + (jj - s.center[1]) ** 2 <= s.radius ** 2)
    assert s.stimulus.mask.sum() == brute
    assert abs(brute - np.pi * 0.05 ** 2 / h ** 2) <= 0.2 * np.pi * 0.05 ** 2 / h ** 2


def test_stimulus_errors():
    with pytest.raises(ConfigError):
        StimulusConfig(radius_range=(0.0, 0.1))
    with pytest.raises(ConfigError):
        StimulusConfig(radius_range=(0.2, 0.6))
    coarse = build_structured((5, 5), (1.0, 1.0))
    with pytest.raises(EmptyMask):
        sample_stimulus(0, 0, coarse, StimulusConfig(radius_range=(0.1, 0.1)))


def test_generate_single_row(tiny_problem):
    g, cond = tiny_problem
    ds = dataset.generate(1, g, cond, seed=5, stim_cfg=StimulusConfig(radius_range=(0.12, 0.12)))
    assert ds.n_samples == 1
    assert ds.inputs.shape == ds.activation.shape == ds.repolarization.shape == (1, g.n_nodes)
    v = ds.valid[0]
    assert np.all(ds.activation[0][v] < ds.repolarization[0][v])
    with pytest.raises(TooSmall):
        dataset.generate(0, g, cond)


def test_generate_deterministic_and_row_independent(tiny_problem, tiny_dataset):
    g, cond = tiny_problem
    cfg = StimulusConfig(radius_range=(0.12, 0.12))
    again = dataset.generate(12, g, cond, seed=3, stim_cfg=cfg)
    for name in ("inputs", "activation", "repolarization", "valid", "centers", "radii"):
        assert np.array_equal(getattr(again, name), getattr(tiny_dataset, name))
    row = dataset.generate(1, g, cond, seed=3, stim_cfg=cfg, indices=[7])
    assert np.array_equal(row.activation[0], tiny_dataset.activation[7])


def test_generate_parallel_matches_serial(tiny_problem, tiny_dataset):
    g, cond = tiny_problem
    par = dataset.generate(12, g, cond, seed=3, n_jobs=2,
                           stim_cfg=StimulusConfig(radius_range=(0.12, 0.12)))
    assert np.array_equal(par.activation, tiny_dataset.activation)
    assert np.array_equal(par.repolarization, tiny_dataset.repolarization)


@pytest.mark.parametrize("n,train", [(10, 8), (2000, 1600), (5, 4), (250, 200)])
def test_split_sizes(n, train):
    s = split_80_20(n, seed=0)
    assert len(s.train) == train and len(s.test) == n - train
    assert np.array_equal(np.sort(np.concatenate([s.train, s.test])), np.arange(n))


def test_split_deterministic_and_small():
    assert np.array_equal(split_80_20(40, 2).test, split_80_20(40, 2).test)
    assert not np.array_equal(split_80_20(40, 2).test, split_80_20(40, 3).test)
    with pytest.raises(TooSmall):
        split_80_20(4)


def test_save_load_roundtrip(tmp_path, tiny_dataset):
    p = tmp_path / "d.epds"
    dataset.save(tiny_dataset, p)
    back = dataset.load(p)
    for name in ("inputs", "activation", "repolarization", "valid", "centers", "radii"):
        a, b = getattr(back, name), getattr(tiny_dataset, name)
        assert a.dtype == b.dtype and np.array_equal(a, b)
    assert back.geometry.same_as(tiny_dataset.geometry)
    assert back.meta["seed"] == 3
    dataset.save(back, tmp_path / "e.epds")
    assert p.read_bytes() == (tmp_path / "e.epds").read_bytes()


def test_save_rejects_empty(tmp_path, tiny_dataset):
    with pytest.raises(TooSmall):
        dataset.save(tiny_dataset.subset([]), tmp_path / "x.epds")


def test_epds_roundtrip_bits():
    arrays = {"a": np.array([0.1, -0.0, np.inf, np.nan, 5e-324]), "m": np.arange(6.0).reshape(2, 3)}
    meta, back = epds.decode(epds.encode({"k": [1, "x"]}, arrays))
    assert meta == {"k": [1, "x"]}
    assert back["a"].tobytes() == arrays["a"].tobytes()
    assert back["m"].shape == (2, 3)


def test_epds_corruption():
    buf = bytearray(epds.encode({"k": 1}, {"a": np.arange(4.0), "b": np.ones(3)}))
    _, _, offsets = epds.decode(bytes(buf), with_offsets=True)
    bad = bytearray(buf)
    bad[-10] ^= 0xFF  # a payload byte of the last array
    with pytest.raises(ChecksumMismatch) as err:
        epds.decode(bytes(bad))
    assert err.value.offset == offsets["b"]
    assert str(offsets["b"]) in str(err.value)
    with pytest.raises(BadMagic):
        epds.decode(b"XXXX" + bytes(buf[4:]))
    with pytest.raises(VersionMismatch):
        epds.decode(bytes(buf[:4]) + struct.pack("<I", 2) + bytes(buf[8:]))
    with pytest.raises(TruncatedFile):
        epds.decode(bytes(buf[:-3]))


def test_epds_every_single_byte_corruption_detected():
    buf = epds.encode({"type": "x", "v": [1.5, 2]}, {"a": np.arange(3.0), "bb": np.ones((2, 2))})
    for pos in range(len(buf)):
        for flip in (0x01, 0x80, 0xFF):
            bad = bytearray(buf)
            bad[pos] ^= flip
            with pytest.raises(FormatError):
                epds.decode(bytes(bad))


def test_load_rejects_other_container(tmp_path):
    p = tmp_path / "m.epds"
    epds.write(p, {"type": "kol"}, {"x": np.zeros(1)})
    with pytest.raises(ConfigError):
        dataset.load(p)


def test_desk_dataset_structure(desk_dataset):
    # every valid node repolarizes after it activates
    assert desk_dataset.n_samples == 250
    v = desk_dataset.valid
    assert np.all(desk_dataset.repolarization[v] > desk_dataset.activation[v])
