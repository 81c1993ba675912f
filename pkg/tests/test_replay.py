import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from latentdrive.errors import CheckpointError, ConfigurationError, ContractError, NotReadyError, UsageError
from latentdrive.replay import ReplayBuffer, to_uint8

S = 4


def fill(buf, length, tag=0, done_last=False):
    """Push an episode whose step k has pixels ``37 tag + k`` and reward ``tag + k``."""
    buf.start_episode()
    for k in range(length):
        img = np.full((S, S, 3), (tag * 37 + k) % 256, dtype=np.uint8)
        buf.push_step(img, img, img, action=None if k == 0 else [k, -k], reward=tag + k,
                      done=done_last and k == length - 1)
    buf.end_episode()


def test_single_window_episode():
    buf = ReplayBuffer(100, tau=10, image_size=S)
    fill(buf, 11)
    assert buf.num_windows == 1
    ep, off = buf.sample_indices(50, np.random.default_rng(0))
    assert np.all(ep == 0) and np.all(off == 0)


def test_windows_are_uniform_over_episodes_and_offsets():
    buf = ReplayBuffer(100, tau=10, image_size=S)
    fill(buf, 11)
    fill(buf, 21, tag=1)
    ep, off = buf.sample_indices(100_000, np.random.default_rng(0))
    share = np.mean(ep == 0)
    assert abs(share - 1 / 12) <= 0.05 / 12
    counts = np.bincount(off[ep == 1], minlength=11)
    assert counts.size == 11 and counts.min() > 0
    # each of the 11 offsets gets close to a 1/12 share too
    assert np.all(np.abs(counts / 100_000 - 1 / 12) <= 0.05 / 12)


def test_sample_alignment():
    buf = ReplayBuffer(100, tau=3, image_size=S)
    fill(buf, 8, tag=2, done_last=True)
    b = buf.gather(np.array([0]), np.array([4]))
    assert b.camera.shape == (1, 4, S, S, 3) and b.action.shape == (1, 3, 2)
    # observations 4..7 and the transitions that led to 5..7
    frames = (b.mask[0, :, 0, 0, 0] * 255).round().int().tolist()
    assert frames == [(74 + k) for k in range(4, 8)]
    assert b.reward[0].tolist() == [7.0, 8.0, 9.0]
    assert b.action[0, :, 0].tolist() == [5.0, 6.0, 7.0]
    assert b.done[0].tolist() == [0.0, 0.0, 1.0]


@given(st.lists(st.integers(1, 15), min_size=1, max_size=6), st.integers(1, 5), st.integers(0, 1000))
def test_windows_never_cross_episodes(lengths, tau, seed):
    buf = ReplayBuffer(1000, tau=tau, image_size=S)
    for i, n in enumerate(lengths):
        fill(buf, n, tag=i)
    if buf.num_windows == 0:
        with pytest.raises(NotReadyError):
            buf.sample(2, np.random.default_rng(seed))
        return
    assert buf.num_windows == sum(max(0, n - tau) for n in lengths)
    b = buf.sample(16, np.random.default_rng(seed))
    assert b.camera.shape[1] == tau + 1 and b.reward.shape[1] == tau
    # rewards inside a window are consecutive integers from a single episode
    assert torch.all(torch.diff(b.reward, dim=1) == 1.0)


def test_eviction_drops_oldest_whole_episodes():
    buf = ReplayBuffer(30, tau=2, image_size=S)
    for i in range(4):
        fill(buf, 12, tag=i * 100)
    assert buf.num_steps == 24
    assert [float(e.arrays["reward"][0]) for e in buf.episodes] == [200.0, 300.0]


def test_oversized_episode_is_kept_alone():
    buf = ReplayBuffer(12, tau=2, image_size=S)
    fill(buf, 5)
    fill(buf, 20, tag=1)
    assert len(buf.episodes) == 1 and buf.num_steps == 20


def test_float_images_are_quantised():
    assert to_uint8(np.array([0.0, 0.5, 1.0, 1.2, -0.1])).tolist() == [0, 128, 255, 255, 0]
    buf = ReplayBuffer(20, tau=1, image_size=S)
    buf.start_episode()
    img = np.full((S, S, 3), 0.3)
    for _ in range(3):
        buf.push_step(img, img, img)
    buf.end_episode()
    b = buf.sample(1, np.random.default_rng(0))
    assert torch.allclose(b.camera, torch.full_like(b.camera, 76 / 255))
    assert abs(float(b.camera[0, 0, 0, 0, 0]) - 0.3) <= 0.5 / 255


def test_usage_errors():
    buf = ReplayBuffer(20, tau=1, image_size=S)
    img = np.zeros((S, S, 3))
    with pytest.raises(UsageError):
        buf.push_step(img, img, img)
    with pytest.raises(UsageError):
        buf.end_episode()
    buf.start_episode()
    with pytest.raises(UsageError):
        buf.start_episode()
    with pytest.raises(ContractError):
        buf.push_step(np.zeros((S + 1, S, 3)), img, img)
    buf.push_step(img, img, img, done=True)
    with pytest.raises(UsageError):
        buf.push_step(img, img, img)
    with pytest.raises(NotReadyError):
        ReplayBuffer(20, tau=1, image_size=S).sample(1, np.random.default_rng(0))


def test_config_errors():
    with pytest.raises(ConfigurationError):
        ReplayBuffer(5, tau=10)
    with pytest.raises(ConfigurationError):
        ReplayBuffer(5, tau=0)


def test_save_load_roundtrip(tmp_path):
    buf = ReplayBuffer(100, tau=3, image_size=S)
    fill(buf, 8)
    fill(buf, 6, tag=1)
    path = tmp_path / "buf.npz"
    buf.save(path)
    back = ReplayBuffer.load(path)
    assert (back.tau, back.capacity, back.num_steps) == (3, 100, 14)
    for a, b in zip(buf.episodes, back.episodes):
        for k in a.arrays:
            assert np.array_equal(a.arrays[k], b.arrays[k])
    (tmp_path / "junk.npz").write_bytes(b"not an archive")
    with pytest.raises(CheckpointError):
        ReplayBuffer.load(tmp_path / "junk.npz")
