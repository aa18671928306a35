"""Dataset pipeline tests: truncation, windowing, folding, and the file format."""

import numpy as np
import pytest

from crashcast.data import (
    HEADER_SIZE,
    AssembledDataset,
    DatasetFormatError,
    Frame,
    SequenceSample,
    assemble_dataset,
    deserialize_dataset,
    kfold_plan,
    quantize_image,
    read_meta,
    sample_byte_size,
    samples_from_episodes,
    serialize_dataset,
    truncate_episode,
    windowize,
    write_meta,
)
from crashcast.sim import ScenarioSpec, default_cameras, run_scenario


def fake_frame(rng, cams=3, rows=4, cols=4):
    images = tuple((rng.integers(0, 256, (rows, cols, 1))).astype(np.uint8) for _ in range(cams))
    state = (rng.standard_normal(9)).astype(np.float32).astype(np.float64)
    return Frame(images=images, state=state, action=float(rng.integers(0, 2)))


def fake_samples(rng, n, seq_len=5, cams=3, rows=4, cols=4):
    cameras = ("left_mirror", "dashcam", "right_mirror")[:cams]
    out = []
    for i in range(n):
        frames = [fake_frame(rng, cams, rows, cols) for _ in range(seq_len)]
        out.append(SequenceSample(frames=frames, label=int(rng.integers(0, 2)),
                                  episode_id=i // 3, window_start=i % 3, cameras=cameras))
    return out


def test_truncate_keeps_five_second_window():
    ep = run_scenario(ScenarioSpec(3, 0.6, max_duration=12.0), default_cameras(rows=4, cols=4))
    # force a known event time at the final frame
    ep.event_time = ep.frames[-1].t
    assert ep.event_time == pytest.approx(12.0)
    frames = truncate_episode(ep)
    assert len(frames) == 101  # 5 s at 20 Hz plus the boundary frame


def test_truncate_clamps_at_episode_start():
    ep = run_scenario(ScenarioSpec(3, 0.2, max_duration=12.0), default_cameras(rows=4, cols=4))
    ep.event_time = 3.0
    frames = truncate_episode(ep)
    assert len(frames) == 61  # everything from t=0


def test_truncate_never_empty_and_builds_state_vector():
    ep = run_scenario(ScenarioSpec(4, 0.1), default_cameras(rows=4, cols=4))
    frames = truncate_episode(ep)
    assert len(frames) >= 1
    f = frames[0]
    assert f.state.shape == (9,)
    assert tuple(f.state[:3]) == (0.5, 0.0, 1.2)   # dashcam mount in vehicle frame
    assert f.state[5] == 0.0                        # vehicle z
    assert f.images[0].dtype == np.uint8
    assert len(f.images) == 3


def test_windowize_counts():
    rng = np.random.default_rng(0)
    frames10 = [fake_frame(rng) for _ in range(10)]
    assert len(windowize(frames10, seq_len=5, stride=1)) == 6
    assert len(windowize(frames10[:4], seq_len=5, stride=1)) == 0
    frames101 = [fake_frame(rng) for _ in range(101)]
    assert len(windowize(frames101, seq_len=5, stride=1)) == 97
    assert len(windowize(frames101, seq_len=5, stride=10)) == 10


def test_windowize_consecutive_and_label_inheritance():
    rng = np.random.default_rng(1)
    frames = [fake_frame(rng) for _ in range(8)]
    samples = windowize(frames, seq_len=5, stride=1, label=1, episode_id=7)
    for i, s in enumerate(samples):
        assert s.window_start == i
        assert s.label == 1 and s.episode_id == 7
        for t in range(5):
            assert s.frames[t] is frames[i + t]


def test_samples_from_episodes_assigns_episode_ids():
    cams = default_cameras(rows=4, cols=4)
    eps = [run_scenario(ScenarioSpec(4, 0.1), cams), run_scenario(ScenarioSpec(3, 0.1), cams)]
    samples = samples_from_episodes(eps, seq_len=5, stride=20)
    ids = {s.episode_id for s in samples}
    assert ids == {0, 1}
    for s in samples:
        assert s.label == eps[s.episode_id].label
        assert len(s.frames) == 5


def test_assemble_dataset_deterministic_partition():
    rng = np.random.default_rng(2)
    samples = fake_samples(rng, 50)
    a = assemble_dataset(samples, rng_seed=9)
    b = assemble_dataset(samples, rng_seed=9)
    c = assemble_dataset(samples, rng_seed=10)
    assert [id(s) for s in a.samples] == [id(s) for s in b.samples]
    assert [id(s) for s in a.samples] != [id(s) for s in c.samples]
    assert len(a.train) + len(a.validate) + len(a.test) == 50
    assert len(a.train) == 40 and len(a.validate) == 5
    # shuffling is a permutation: same multiset of objects
    assert sorted(map(id, a.samples)) == sorted(map(id, samples))
    assert isinstance(a, AssembledDataset)


def test_assemble_dataset_split_class_balance():
    rng = np.random.default_rng(3)
    samples = fake_samples(rng, 1200)
    a = assemble_dataset(samples, rng_seed=11)
    global_rate = np.mean([s.label for s in samples])
    for part in (a.train, a.validate, a.test):
        rate = np.mean([s.label for s in part])
        assert abs(rate - global_rate) <= 0.10


def test_assemble_validates_input():
    with pytest.raises(ValueError):
        assemble_dataset([], 0)
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        assemble_dataset(fake_samples(rng, 5), 0, split=(0.5, 0.5, 0.5))


def test_kfold_plan_balanced_partition():
    plan = kfold_plan(5000, k=10, rng_seed=5)
    sizes = [len(plan.fold_indices(f)) for f in range(10)]
    assert sizes == [500] * 10
    plan = kfold_plan(10, k=10, rng_seed=6)
    assert [len(plan.fold_indices(f)) for f in range(10)] == [1] * 10
    plan = kfold_plan(23, k=5, rng_seed=7)
    sizes = [len(plan.fold_indices(f)) for f in range(5)]
    assert max(sizes) - min(sizes) <= 1
    all_idx = np.concatenate([plan.fold_indices(f) for f in range(5)])
    assert sorted(all_idx.tolist()) == list(range(23))
    with pytest.raises(ValueError):
        kfold_plan(9, k=10)


def test_kfold_plan_deterministic():
    a = kfold_plan(100, 10, rng_seed=8)
    b = kfold_plan(100, 10, rng_seed=8)
    assert (a.assignment == b.assignment).all()
    c = kfold_plan(100, 10, rng_seed=9)
    assert not (a.assignment == c.assignment).all()


def test_serialize_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(10)
    samples = fake_samples(rng, 100)
    path = tmp_path / "d.dpmd"
    serialize_dataset(samples, path)
    loaded = deserialize_dataset(path)
    assert len(loaded.samples) == 100
    assert loaded.seq_len == 5 and loaded.rows == 4 and loaded.cols == 4
    assert loaded.cameras == ("left_mirror", "dashcam", "right_mirror")
    for orig, got in zip(samples, loaded.samples):
        assert got.label == orig.label
        for fo, fg in zip(orig.frames, got.frames):
            for io_, ig in zip(fo.images, fg.images):
                assert (io_ == ig).all()
            # states were float32-representable, so the round trip is bit-exact
            assert (fo.state == fg.state).all()
            assert fo.action == fg.action
    # writing the loaded samples again reproduces the file byte for byte
    path2 = tmp_path / "d2.dpmd"
    serialize_dataset(loaded.samples, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_serialized_file_size_closed_form(tmp_path):
    rng = np.random.default_rng(11)
    n, seq_len, cams, rows, cols = 7, 5, 3, 32, 32
    samples = fake_samples(rng, n, seq_len=seq_len, cams=cams, rows=rows, cols=cols)
    path = tmp_path / "sized.dpmd"
    serialize_dataset(samples, path)
    per_sample = sample_byte_size(seq_len, cams, rows, cols)
    assert per_sample == 1 + seq_len * (cams * rows * cols + 9 * 4 + 4)
    assert path.stat().st_size == HEADER_SIZE + n * per_sample


def test_deserialize_rejects_corruption(tmp_path):
    rng = np.random.default_rng(12)
    samples = fake_samples(rng, 3)
    path = tmp_path / "c.dpmd"
    serialize_dataset(samples, path)
    blob = bytearray(path.read_bytes())

    bad_magic = tmp_path / "m.dpmd"
    bad_magic.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(DatasetFormatError) as err:
        deserialize_dataset(bad_magic)
    assert err.value.offset == 0

    bad_version = tmp_path / "v.dpmd"
    bad_version.write_bytes(bytes(blob[:4]) + b"\x63\x00\x00\x00" + bytes(blob[8:]))
    with pytest.raises(DatasetFormatError) as err:
        deserialize_dataset(bad_version)
    assert err.value.offset == 4

    truncated = tmp_path / "t.dpmd"
    truncated.write_bytes(bytes(blob[:-10]))
    with pytest.raises(DatasetFormatError):
        deserialize_dataset(truncated)


def test_quantize_image_stable_fixed_points():
    # k/255 values are fixed points of the quantize/dequantize pair
    k = np.arange(256, dtype=np.float64).reshape(16, 16, 1)
    img = k / 255.0
    assert (quantize_image(img)[:, :, 0] == k[:, :, 0]).all()
    again = quantize_image(quantize_image(img) / 255.0)
    assert (again == quantize_image(img)).all()


def test_meta_sidecar_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    samples = fake_samples(rng, 9)
    scenarios = {eid: (eid % 4) + 1 for eid in {s.episode_id for s in samples}}
    path = tmp_path / "d.meta.csv"
    write_meta(samples, scenarios, path)
    episode_ids, scen = read_meta(path)
    assert (episode_ids == np.array([s.episode_id for s in samples])).all()
    assert (scen == np.array([scenarios[s.episode_id] for s in samples])).all()


def test_frame_validates_state_length():
    rng = np.random.default_rng(14)
    with pytest.raises(ValueError):
        Frame(images=(np.zeros((2, 2, 1), dtype=np.uint8),),
              state=rng.standard_normal(8), action=0.0)
